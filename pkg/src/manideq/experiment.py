"""End-to-end runs: sample the target, train, evaluate and write plot-ready files."""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import save_checkpoint
from .dequantizers import dequantizer_init
from .flows import flow_init
from .manifolds import Sphere, Stiefel, Torus
from .metrics import MetricsReport, evaluate_samples, moment_errors
from .objectives import DequantizedModel, expected_family, marginal_log_density, sample_manifold
from .targets import make_target, rejection_sample, write_samples_csv
from .training import TrainingAborted, substream, train

TABLE_COLUMNS = ("Mean MSE", "Covariance MSE", "KL(q‖p)", "KL(p‖q)", "Relative ESS")
_REPORT_KEYS = ("mean_mse", "cov_mse", "kl_q_p", "kl_p_q", "relative_ess")


class NumericalAbort(RuntimeError):
    pass


def build_model(cfg, target):
    """Fresh ambient flow and dequantizer for ``target`` as described by ``cfg``."""
    man = target.manifold
    seed = cfg.seed
    if cfg.method == "modulus":
        event, in_dim, aux = (man.m,), 2 * man.m, man.m
    elif isinstance(man, Sphere):
        event, in_dim, aux = (man.m,), man.m, 1
    elif isinstance(man, Torus):
        event, in_dim, aux = (2 * man.m,), 2 * man.m, man.m
    elif isinstance(man, Stiefel):
        event, in_dim, aux = (man.n, man.p), man.n * man.p, man.p
    else:
        raise ValueError(f"no model recipe for {man!r}")
    theta = flow_init(event, cfg.flow.n_layers, cfg.flow.hidden_width,
                      substream(seed, "init-theta"), cfg.flow.scale_cap)
    family = expected_family(man, cfg.method)
    if cfg.dequantizer.family not in ("auto", family):
        raise ValueError(f"dequantizer family {cfg.dequantizer.family!r} does not fit {man}")
    phi = dequantizer_init(family, in_dim, aux, cfg.dequantizer.hidden_width,
                           substream(seed, "init-phi"), cfg.dequantizer.window,
                           cfg.dequantizer.init_mu, cfg.dequantizer.init_sigma)
    return DequantizedModel(man, theta, phi, cfg.method)


def make_target_for(cfg):
    return make_target(cfg.target, proposal=cfg.data.proposal)


def training_data(cfg, target):
    """Batch source: fresh rejection draws per iteration, or batches of a fixed sample set."""
    batch = cfg.objective.batch_size
    if cfg.data.fixed_samples > 0:
        fixed = rejection_sample(target, cfg.data.fixed_samples,
                                 substream(cfg.seed, "fixed-data")).points

        def data(it, rng):
            return fixed[rng.choice(len(fixed), size=batch, replace=False)]

        return data

    def data(it, rng):
        return rejection_sample(target, batch, rng).points

    return data


@dataclass
class Evaluation:
    report: MetricsReport
    model_samples: np.ndarray
    target_samples: np.ndarray
    baseline: dict


def evaluate_model(model, target, mcfg, seed):
    """Metrics of ``model`` against ``target``; every draw comes from a named substream of ``seed``."""
    n = mcfg.n
    ys = sample_manifold(model, n, substream(seed, "eval-model"))
    lq = marginal_log_density(model, ys, mcfg.k_eval, substream(seed, "eval-density-model"))
    tp = rejection_sample(target, n, substream(seed, "eval-target")).points
    lqt = marginal_log_density(model, tp, mcfg.k_eval, substream(seed, "eval-density-target"))
    report = evaluate_samples(ys, lq, target.log_unnorm(ys), tp, lqt, target.log_unnorm(tp))
    if mcfg.n_moments > n:
        big_model = sample_manifold(model, mcfg.n_moments, substream(seed, "moments-model"))
        big_target = rejection_sample(target, mcfg.n_moments, substream(seed, "moments-target")).points
    else:
        big_model, big_target = ys, tp
    report.mean_mse, report.cov_mse = moment_errors(big_model, big_target)
    uniform = target.sample_proposal(len(big_target), substream(seed, "moments-uniform"))
    mu, cu = moment_errors(uniform, big_target)
    return Evaluation(report, ys, tp, {"mean_mse": mu, "cov_mse": cu})


def _header(cfg):
    return f"manideq {__version__} config={cfg.config_hash()}"


def density_grid(model, target, cfg, path, log_z):
    """Model and normalized target log densities on a lat/long or angle grid."""
    man = model.manifold
    g = cfg.metrics.grid
    if isinstance(man, Sphere) and man.m == 3:
        lat = (np.arange(g) + 0.5) * np.pi / g
        lon = np.arange(2 * g) * np.pi / g
        A, B = np.meshgrid(lat, lon, indexing="ij")
        pts = np.stack([np.sin(A) * np.cos(B), np.sin(A) * np.sin(B), np.cos(A)], axis=-1)
        names = ("lat", "lon")
    elif isinstance(man, Torus) and man.m == 2:
        ang = np.arange(g) * 2 * np.pi / g
        A, B = np.meshgrid(ang, ang, indexing="ij")
        pts = np.stack([np.cos(A), np.sin(A), np.cos(B), np.sin(B)], axis=-1)
        names = ("theta1", "theta2")
    else:
        return False
    flat = pts.reshape(-1, pts.shape[-1])
    lm = marginal_log_density(model, flat, cfg.metrics.k_eval, substream(cfg.seed, "grid"))
    lt = target.log_unnorm(flat) - log_z
    with open(path, "w") as fh:
        fh.write(f"# {_header(cfg)}\n")
        fh.write(f"{names[0]},{names[1]},model_log_density,target_log_density\n")
        for a, b, m_, t_ in zip(A.ravel(), B.ravel(), lm, lt):
            fh.write(f"{a!r},{b!r},{m_!r},{t_!r}\n")
    return True


def write_metrics(path, cfg, report, baseline=None, extra=None):
    doc = {"version": __version__, "config_hash": cfg.config_hash(), "target": cfg.target,
           "objective": cfg.objective.kind, "seed": cfg.seed}
    doc.update(report.to_dict())
    if baseline is not None:
        doc["uniform_baseline"] = baseline
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg, out=None):
    """Full pipeline; returns the evaluation.  Raises :class:`NumericalAbort` on NaN training."""
    out = out or cfg.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    target = make_target_for(cfg)
    model = build_model(cfg, target)
    data = training_data(cfg, target)
    header = _header(cfg)
    try:
        model, history = train(cfg.objective, data, model, cfg.seed)
    except TrainingAborted as exc:
        save_checkpoint(os.path.join(out, "checkpoint_last_good.json"), exc.model,
                        {"config_hash": cfg.config_hash(), "iteration": exc.iteration})
        exc.history.to_csv(os.path.join(out, "history.csv"), header)
        raise NumericalAbort(str(exc)) from exc
    history.to_csv(os.path.join(out, "history.csv"), header)
    history.to_csv(os.path.join(out, "timing.csv"), header, with_time=True)
    save_checkpoint(os.path.join(out, "checkpoint.json"), model,
                    {"config_hash": cfg.config_hash(), "target": cfg.target})
    try:
        ev = evaluate_model(model, target, cfg.metrics, cfg.seed)
        ev.report.check()
    except (ad.NonFiniteError, FloatingPointError, ValueError) as exc:
        raise NumericalAbort(f"evaluation failed: {exc}") from exc
    write_metrics(os.path.join(out, "metrics.json"), cfg, ev.report, ev.baseline)
    write_samples_csv(os.path.join(out, "samples_model.csv"), ev.model_samples, header)
    write_samples_csv(os.path.join(out, "samples_target.csv"), ev.target_samples, header)
    density_grid(model, target, cfg, os.path.join(out, "density_grid.csv"), np.log(ev.report.z_hat))
    return ev


def aggregate(reports):
    """Per-metric mean and standard error across trials (dicts with the report keys)."""
    rows = {}
    for col, key in zip(TABLE_COLUMNS, _REPORT_KEYS):
        vals = np.array([r[key] for r in reports], dtype=np.float64)
        if key == "relative_ess":
            vals = 100.0 * vals
        se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else float("nan")
        rows[col] = (float(vals.mean()), float(se))
    return rows


def write_table(path, label, rows):
    with open(path, "w") as fh:
        fh.write("Method," + ",".join(f"{c},{c} SE" for c in TABLE_COLUMNS) + "\n")
        fh.write(label + "," + ",".join(f"{rows[c][0]!r},{rows[c][1]!r}" for c in TABLE_COLUMNS) + "\n")


def trial_suite(cfg, n_trials, out=None, seeds=None, workers=1):
    """Run ``n_trials`` seeds (``cfg.seed``, ``cfg.seed + 1``, ...) and aggregate their metrics."""
    if n_trials < 2:
        raise ValueError("a trial suite needs at least two trials")
    out = out or cfg.out
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(n_trials)]
    jobs = []
    for i, s in enumerate(seeds):
        c = _with_seed(cfg, s)
        jobs.append((c, os.path.join(out, f"trial_{i:02d}_seed_{s}")))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_job, jobs))
    else:
        for job in jobs:
            _run_job(job)
    reports = []
    for _, d in jobs:
        with open(os.path.join(d, "metrics.json")) as fh:
            reports.append(json.load(fh))
    rows = aggregate(reports)
    label = f"Deq. RealNVP ({'ELBO' if cfg.objective.kind == 'elbo' else 'I.S.'})"
    write_table(os.path.join(out, "table.csv"), label, rows)
    return rows, reports


def _run_job(job):
    c, d = job
    run_experiment(c, d)


def _with_seed(cfg, seed):
    from .config import config_from_dict

    d = cfg.to_dict()
    d["seed"] = int(seed)
    return config_from_dict(d)
