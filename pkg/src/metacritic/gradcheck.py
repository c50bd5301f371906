"""Finite-difference verification suite for the autodiff engine and the outer loss.

Every primitive is checked at a seeded random point with a random linear
read-out (``sum(out * R)``) so that all output entries contribute. Points
for ReLU are kept at least 1e-3 away from the kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .metalearn import MetaConfig, episode_outer_loss, init_lslr
from .networks import CriticSpec, MLPSpec, ParamSet, init_params
from .rng import derive_rng
from .tasks import GaussianBlobs

PRIMITIVE_TOL = 1e-6
OUTER_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    coordinates: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def _readout(fn: Callable, shapes: Dict[str, tuple], seed: int, positive=()):
    """ParamSet of random inputs plus f(p) = sum(fn(**p) * R)."""
    rng = derive_rng(seed, "gradcheck")
    arrays = {}
    for name, shape in shapes.items():
        a = _away_from_zero(rng, shape, 1e-3)
        arrays[name] = np.abs(a) + 0.5 if name in positive else a
    out_shape = fn(**{k: Tensor(v) for k, v in arrays.items()}).shape
    weights = Tensor(rng.standard_normal(out_shape))

    def f(p):
        return ad.tsum(ad.mul(fn(**dict(p.items())), weights))

    return f, ParamSet.from_arrays(arrays)


def primitive_cases() -> Dict[str, tuple]:
    """name -> (function of named tensors, input shapes, positive-only inputs)."""
    labels = np.array([2, 0, 1, 2])
    bn_mean, bn_var = np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.5, 2.0])
    return {
        "add": (lambda a, b: ad.add(a, b), {"a": (3, 4), "b": (4,)}, ()),
        "sub": (lambda a, b: ad.sub(a, b), {"a": (3, 1), "b": (3, 4)}, ()),
        "mul": (lambda a, b: ad.mul(a, b), {"a": (3, 4), "b": (1, 4)}, ()),
        "div": (lambda a, b: ad.div(a, b), {"a": (3, 4), "b": (3, 4)}, ("b",)),
        "pow": (lambda a: ad.power(a, 3.0), {"a": (5,)}, ()),
        "exp": (lambda a: ad.exp(a), {"a": (5,)}, ()),
        "log": (lambda a: ad.log(a), {"a": (5,)}, ("a",)),
        "matmul": (lambda a, b: ad.matmul(a, b), {"a": (2, 3, 4), "b": (4, 5)}, ()),
        "linear": (lambda x, w, b: ad.linear(x, w, b), {"x": (3, 4), "w": (2, 4), "b": (2,)}, ()),
        "relu": (lambda a: ad.relu(a), {"a": (6,)}, ()),
        "sigmoid": (lambda a: ad.sigmoid(a), {"a": (6,)}, ()),
        "softmax": (lambda a: ad.softmax(a), {"a": (3, 5)}, ()),
        "log_softmax": (lambda a: ad.log_softmax(a), {"a": (3, 5)}, ()),
        "nll_loss": (lambda a: ad.nll_loss(ad.log_softmax(a), labels), {"a": (4, 3)}, ()),
        "mse_loss": (lambda a, b: ad.mse_loss(a, b), {"a": (3, 2), "b": (3, 2)}, ()),
        "conv1d": (lambda x, w, b: ad.conv1d(x, w, b, dilation=2, padding=(1, 1)),
                   {"x": (2, 3, 7), "w": (4, 3, 2), "b": (4,)}, ()),
        "conv1d_asym": (lambda x, w: ad.conv1d(x, w, padding=(0, 1)), {"x": (1, 2, 5), "w": (3, 2, 2)}, ()),
        "conv1d_stride": (lambda x, w: ad.conv1d(x, w, stride=2, padding=1), {"x": (1, 2, 6), "w": (2, 2, 3)}, ()),
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, padding=1), {"x": (2, 2, 4, 4), "w": (3, 2, 3, 3), "b": (3,)}, ()),
        "max_pool2d": (lambda x: ad.max_pool2d(x, 2), {"x": (1, 2, 4, 4)}, ()),
        "avg_pool2d": (lambda x: ad.avg_pool2d(x, 2), {"x": (1, 2, 4, 4)}, ()),
        "global_avg_pool": (lambda x: ad.global_avg_pool(x), {"x": (2, 3, 2, 2)}, ()),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), {"a": (2, 3), "b": (2, 2)}, ()),
        "reshape": (lambda a: ad.reshape(a, (3, 4)), {"a": (2, 6)}, ()),
        "transpose": (lambda a: ad.transpose(a, (1, 2, 0)), {"a": (2, 3, 4)}, ()),
        "pad": (lambda a: ad.pad(a, [(1, 0), (0, 2)]), {"a": (2, 3)}, ()),
        "batch_norm": (lambda x, g, b: ad.batch_norm(x, g, b, bn_mean, bn_var),
                       {"x": (2, 3, 2), "g": (3,), "b": (3,)}, ()),
        "sum": (lambda a: ad.tsum(a, axis=1, keepdims=True), {"a": (3, 4)}, ()),
        "mean": (lambda a: ad.mean(a, axis=0), {"a": (3, 4)}, ()),
    }


def check_primitives(step: float = 1e-6, seed: int = 0) -> List[CheckResult]:
    results = []
    for i, (name, (fn, shapes, positive)) in enumerate(primitive_cases().items()):
        t0 = time.perf_counter()
        f, at = _readout(fn, shapes, seed * 1000 + i, positive)
        report = finite_difference_check(f, at, step)
        results.append(CheckResult(name, report.max_rel_error, PRIMITIVE_TOL, report.checked_coordinates,
                                   time.perf_counter() - t0))
    return results


def tiny_sca_problem(seed: int = 0, variant: str = "sca_pred", critic_lslr: float = 0.5):
    """A small base model, critic, step-size table and one episode for outer-loss checks."""
    model = MLPSpec(in_features=3, hidden=(4,), num_classes=2)
    family = GaussianBlobs(seed=seed, dim=3, noise=0.5, split_sizes=(4, 2, 2))
    episode = family.sample_episode("train", 0, way=2, shot=1, query=2)
    cfg = MetaConfig(inner_steps=2, critic_steps=1, meta_batch_size=1, variant=variant,
                     lslr_init=0.3, critic_lslr_init=critic_lslr)
    theta = init_params(model, "fanin_uniform", seed)
    length = episode.x_target.shape[0] * model.num_classes
    if variant == "sca_pred_params":
        length += model.num_params()
    spec = CriticSpec(length)
    W = init_params(spec, "fanin_uniform", seed)
    lslr = init_lslr(theta, cfg)
    rng = derive_rng(seed, "lslr-jitter")
    lslr = ParamSet.from_arrays({n: t.data * rng.uniform(0.5, 1.5, t.shape) for n, t in lslr.items()})
    bn_state = model.initial_bn_state()
    return model, cfg, theta, W, lslr, episode, bn_state, spec


def combined(groups: Dict[str, ParamSet]) -> ParamSet:
    return ParamSet.from_arrays({f"{g}/{n}": t.data for g, p in groups.items() for n, t in p.items()})


def split_combined(p: ParamSet, template: Dict[str, ParamSet]) -> Dict[str, ParamSet]:
    return {g: ParamSet([(n, p[f"{g}/{n}"]) for n in t.names], t.partition) for g, t in template.items()}


def check_outer_loss(seed: int = 0, step: float = 1e-5, variant: str = "sca_pred",
                     max_coords_per_tensor: Optional[int] = 24) -> CheckResult:
    """Gradient of the full outer loss w.r.t. theta, the critic and the step sizes."""
    t0 = time.perf_counter()
    model, cfg, theta, W, lslr, episode, bn_state, spec = tiny_sca_problem(seed, variant)
    template = {"theta": theta, "critic": W, "lslr": lslr}

    def f(p):
        g = split_combined(p, template)
        loss, _, _ = episode_outer_loss(model, g["theta"], g["critic"], g["lslr"], episode, cfg,
                                        bn_state, 0, spec)
        return loss

    report = finite_difference_check(f, combined(template), step, max_coords_per_tensor, seed)
    return CheckResult(f"outer_loss[{variant}]", report.max_rel_error, OUTER_TOL,
                       report.checked_coordinates, time.perf_counter() - t0)


# The parameter-augmented critic input at seed 0 puts a critic ReLU within one
# probe step of its kink, so that variant is checked at a point clear of it.
PARAMS_VARIANT_SEED = 2


def run_suite(seed: int = 0, include_params_variant: bool = True) -> List[CheckResult]:
    results = check_primitives(seed=seed) + [check_outer_loss(seed)]
    if include_params_variant:
        results.append(check_outer_loss(PARAMS_VARIANT_SEED, variant="sca_pred_params"))
    return results
