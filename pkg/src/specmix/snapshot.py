"""Self-describing JSON snapshots of models for checkpoint/resume and eval.

The document records the kernel structure plus every parameter's raw
(unconstrained) array, so a reload reproduces the model bit-for-bit.
"""

import json

import numpy as np

from .autodiff import Param
from .errors import SnapshotMismatch
from .ioutil import atomic_write_text
from .kernels import GSMKernel, RBFKernel, SMKernel
from .latent import ConstantFunction, GPInterpFunction, NeuralFunction
from .svgp import SVGPModel

FORMAT_VERSION = 1

KERNEL_NAMES = ("rbf", "sm", "gp-gsm", "neural-gsm", "gsm-constant")


def model_to_dict(model):
    kernel = model.kernel
    structure = {
        "input_dim": model.input_dim,
        "m_inducing": model.m_inducing,
    }
    if kernel.name != "rbf":
        structure["q"] = kernel.q
        structure["nyquist"] = [float(v) for v in kernel.nyquist]
    if kernel.name == "neural-gsm":
        structure["hidden"] = list(kernel.fn.hidden)
    params = {}
    for p in model.params():
        if p.name in params:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        params[p.name] = {
            "constraint": p.constraint,
            "shape": list(p.raw.shape),
            "raw": [float(v) for v in p.raw.reshape(-1)],
        }
    return {
        "format": FORMAT_VERSION,
        "kernel": kernel.name,
        "structure": structure,
        "jitter": model.jitter,
        "params": params,
    }


def model_from_dict(doc):
    if doc.get("format") != FORMAT_VERSION:
        raise SnapshotMismatch(f"unsupported snapshot format {doc.get('format')!r}")
    name = doc["kernel"]
    s = doc["structure"]
    d, m = int(s["input_dim"]), int(s["m_inducing"])
    z_param = None
    if name == "rbf":
        kernel = RBFKernel(d)
    elif name == "sm":
        kernel = SMKernel(int(s["q"]), np.asarray(s["nyquist"], dtype=float))
    elif name == "neural-gsm":
        fn = NeuralFunction(int(s["q"]), np.asarray(s["nyquist"], dtype=float), d,
                            hidden=tuple(s.get("hidden", (32, 32))))
        kernel = GSMKernel(fn)
    elif name == "gp-gsm":
        z_param = Param.from_raw(np.zeros((m, d)), "none", "inducing")
        fn = GPInterpFunction(int(s["q"]), np.asarray(s["nyquist"], dtype=float),
                              z_param)
        kernel = GSMKernel(fn)
    elif name == "gsm-constant":
        ny = np.asarray(s["nyquist"], dtype=float)
        q = int(s["q"])
        fn = ConstantFunction(np.ones(q), np.ones((q, d)),
                              np.full((q, d), 0.5) * ny, ny)
        kernel = GSMKernel(fn)
    else:
        raise SnapshotMismatch(f"unknown kernel {name!r} in snapshot")

    inducing = z_param if z_param is not None else np.zeros((m, d))
    model = SVGPModel(kernel, inducing, jitter=doc.get("jitter"))
    stored = doc["params"]
    for p in model.params():
        if p.name not in stored:
            raise SnapshotMismatch(f"snapshot is missing parameter {p.name!r}")
        rec = stored[p.name]
        if rec["constraint"] != p.constraint or tuple(rec["shape"]) != p.raw.shape:
            raise SnapshotMismatch(f"parameter {p.name!r} does not match snapshot")
        p.raw = np.asarray(rec["raw"], dtype=float).reshape(p.raw.shape)
    return model


def save_model(model, path):
    atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True, indent=1))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
