"""Parameter initialisation schemes."""
from __future__ import annotations

import numpy as np

from ..rng import derive_rng
from .params import ParamSet

SCHEMES = ("fanin_uniform", "xavier", "xavier_except_last")


def _fanin_uniform(rng, info):
    bound = np.sqrt(1.0 / info.fan_in)
    return rng.uniform(-bound, bound, size=info.shape)


def _xavier(rng, info):
    bound = np.sqrt(6.0 / (info.fan_in + info.fan_out))
    return rng.uniform(-bound, bound, size=info.shape)


def init_params(arch, scheme: str = "fanin_uniform", seed: int = 0) -> ParamSet:
    """Draw a parameter set for ``arch``; deterministic in ``(arch, scheme, seed)``.

    ``fanin_uniform`` samples weights and biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    where fan_in is input channels times kernel size (or input features).
    ``xavier`` uses Glorot-uniform weights and zero biases.
    ``xavier_except_last`` is ``xavier`` except that the final linear layer
    keeps the fan-in scheme. Norm scales start at 1 and shifts at 0.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown initialisation scheme {scheme!r}; expected one of {SCHEMES}")
    items = []
    for info in arch.layout():
        rng = derive_rng(seed, "init", getattr(arch, "kind", "net"), info.name)
        if info.kind == "bn_gamma":
            value = np.ones(info.shape)
        elif info.kind == "bn_beta":
            value = np.zeros(info.shape)
        elif scheme == "fanin_uniform" or (scheme == "xavier_except_last" and info.last_linear):
            value = _fanin_uniform(rng, info)
        elif info.kind == "weight":
            value = _xavier(rng, info)
        else:
            value = np.zeros(info.shape)
        items.append((info.name, value))
    return ParamSet.from_arrays(dict(items), arch.partition())
