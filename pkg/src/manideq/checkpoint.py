"""JSON checkpoints: architecture description plus base64 little-endian float64 weights."""

import base64
import json

import numpy as np

from . import __version__
from .dequantizers import DequantizerParameters
from .flows import FlowParameters, StandardNormal
from .manifolds import Integer, Orthogonal, Sphere, SpecialOrthogonal, Stiefel, Torus
from .objectives import DequantizedModel

FORMAT = "manideq-checkpoint/1"


class CheckpointError(ValueError):
    pass


def encode_weights(weights):
    out = {}
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f8")
        out[name] = {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode()}
    return out


def decode_weights(blob):
    weights = {}
    for name, entry in blob.items():
        raw = base64.b64decode(entry["data"])
        weights[name] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return weights


def manifold_to_dict(man):
    if isinstance(man, SpecialOrthogonal):
        return {"kind": "special_orthogonal", "n": man.n}
    if isinstance(man, Orthogonal):
        return {"kind": "orthogonal", "n": man.n}
    if isinstance(man, Stiefel):
        return {"kind": "stiefel", "n": man.n, "p": man.p}
    if isinstance(man, Sphere):
        return {"kind": "sphere", "m": man.m}
    if isinstance(man, Torus):
        return {"kind": "torus", "m": man.m}
    if isinstance(man, Integer):
        return {"kind": "integer"}
    raise CheckpointError(f"cannot serialize manifold {man!r}")


def manifold_from_dict(d):
    kind = d["kind"]
    if kind == "sphere":
        return Sphere(d["m"])
    if kind == "torus":
        return Torus(d["m"])
    if kind == "stiefel":
        return Stiefel(d["n"], d["p"])
    if kind == "orthogonal":
        return Orthogonal(d["n"])
    if kind == "special_orthogonal":
        return SpecialOrthogonal(d["n"])
    if kind == "integer":
        return Integer()
    raise CheckpointError(f"unknown manifold kind {kind!r}")


def model_to_dict(model, extra=None):
    doc = {
        "format": FORMAT,
        "version": __version__,
        "manifold": manifold_to_dict(model.manifold),
        "method": model.method,
        "reflection": None if model.reflection is None else np.asarray(model.reflection).tolist(),
        "theta": {"architecture": model.theta.architecture(), "weights": encode_weights(model.theta.weights)},
        "phi": {"architecture": model.phi.architecture(), "weights": encode_weights(model.phi.weights)},
    }
    if extra:
        doc["extra"] = extra
    return doc


def _theta_from(arch, weights):
    if arch["type"] == "realnvp":
        return FlowParameters(tuple(arch["event_shape"]), arch["n_layers"], arch["hidden_width"],
                              arch["scale_cap"], weights)
    if arch["type"] == "standard_normal":
        return StandardNormal(tuple(arch["event_shape"]))
    raise CheckpointError(f"unknown ambient density {arch['type']!r}")


def model_from_dict(doc):
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} document")
    theta = _theta_from(doc["theta"]["architecture"], decode_weights(doc["theta"]["weights"]))
    a = doc["phi"]["architecture"]
    phi = DequantizerParameters(a["type"], a["in_dim"], a["aux_dim"], a["hidden_width"], a["window"],
                                decode_weights(doc["phi"]["weights"]))
    refl = doc.get("reflection")
    return DequantizedModel(manifold_from_dict(doc["manifold"]), theta, phi, doc["method"],
                            None if refl is None else np.asarray(refl, dtype=np.float64))


def save_checkpoint(path, model, extra=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, extra), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_dict(doc), doc.get("extra", {})
