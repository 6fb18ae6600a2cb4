"""Optimization loop: Adam (or plain gradient steps) on a dequantization objective."""

import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .objectives import OBJECTIVES, compiled, draw_noise, model_inputs


def substream(seed, purpose, *index):
    """Independent generator for (seed, purpose, index...); stable across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode())] + [int(i) for i in index]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass
class ObjectiveConfig:
    kind: str = "elbo"
    n_mc: int = None  # 1 for elbo, 4 for iwll when unset
    batch_size: int = 100
    learning_rate: float = 1e-3
    iterations: int = 2000
    gradient_clip: float = 10.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.0  # 0 disables iterate averaging

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"objective kind must be one of {OBJECTIVES}, got {self.kind!r}")
        if self.n_mc is None:
            self.n_mc = 1 if self.kind == "elbo" else 4
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingHistory:
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    millis: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def append(self, loss, grad_norm, millis):
        self.loss.append(float(loss))
        self.grad_norm.append(float(grad_norm))
        self.millis.append(float(millis))

    def to_csv(self, path, header=None, with_time=False):
        with open(path, "w") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("iteration,loss,grad_norm" + (",millis" if with_time else "") + "\n")
            for i, (l, g) in enumerate(zip(self.loss, self.grad_norm)):
                row = f"{i},{l!r},{g!r}"
                if with_time:
                    row += f",{self.millis[i]:.3f}"
                fh.write(row + "\n")


class TrainingAborted(FloatingPointError):
    """Raised on a non-finite loss or gradient; carries the last good model."""

    def __init__(self, iteration, model, history, cause=""):
        super().__init__(f"non-finite objective at iteration {iteration}{': ' + cause if cause else ''}")
        self.iteration = iteration
        self.model = model
        self.history = history


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Ascent step (grads are of the objective being maximized)."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, g in grads.items():
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = params[k] + self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        return {k: params[k] + self.lr * g for k, g in grads.items()}


def _flatten(model):
    p = {f"theta/{k}": v for k, v in model.theta.weights.items()}
    p.update({f"phi/{k}": v for k, v in model.phi.weights.items()})
    return p


def _unflatten(model, flat):
    tw = {k: flat[f"theta/{k}"] for k in model.theta.weights}
    pw = {k: flat[f"phi/{k}"] for k in model.phi.weights}
    return model.with_weights(tw, pw)


def train(config, data, model, seed, callback=None):
    """Maximize the configured objective; returns ``(model, history)``.

    ``data(iteration, rng)`` returns a batch of manifold points.  Every
    iteration draws its batch and noise from its own substream, so the run is
    a pure function of ``seed``.  The loss recorded is the negated objective.
    With ``ema_decay > 0`` the returned weights are the exponential moving
    average of the iterates; the optimizer itself always follows the raw
    iterates.
    """
    history = TrainingHistory()
    if config.iterations == 0:
        return model, history
    if config.optimizer == "adam":
        opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    else:
        opt = SGD(config.learning_rate)
    params = _flatten(model)
    average = dict(params)
    decay = config.ema_decay
    current = model
    for it in range(config.iterations):
        t0 = time.perf_counter()
        batch = data(it, substream(seed, "batch", it))
        y = model_inputs(current, batch)
        noise = draw_noise(current, config.n_mc, y.shape[0], substream(seed, "noise", it))
        obj = compiled(current, config.kind, config.n_mc, y.shape)
        try:
            vals, grads = ad.value_and_gradient(obj.graph, obj.bindings(current, y, noise), obj.wrt,
                                                output="objective")
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingAborted(it, current, history, str(exc)) from exc
        value = float(vals["objective"])
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        if not (np.isfinite(value) and np.isfinite(norm)):
            raise TrainingAborted(it, current, history)
        if config.gradient_clip and norm > config.gradient_clip:
            scale = config.gradient_clip / norm
            grads = {k: g * scale for k, g in grads.items()}
        params = opt.step(params, grads)
        current = _unflatten(model, params)
        if decay:
            average = {k: decay * average[k] + (1.0 - decay) * v for k, v in params.items()}
        history.append(-value, norm, 1000.0 * (time.perf_counter() - t0))
        if callback is not None:
            callback(it, current, history)
    if decay:
        return _unflatten(model, average), history
    return current, history
