"""Base-model classifiers with explicit parameters.

Each architecture is a frozen dataclass that knows its parameter layout and
exposes ``forward(theta, x, bn_state, stats)``. ``theta`` is always passed
in, so fast weights from an inner loop drop straight in. Normalisation uses
running statistics only; passing a ``stats`` dict collects the batch
moments (as plain arrays) for a later :meth:`BatchNormState.updated`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import ShapeError, Tensor
from .params import ADAPTED, SHARED, BatchNormState, ParamInfo, ParamSet

BN_EPS = 1e-5


def _check_theta(arch, theta: ParamSet) -> None:
    for info in arch.layout():
        if info.name not in theta:
            raise ShapeError(arch.kind, f"parameter {info.name!r} missing from theta")
        if theta[info.name].shape != info.shape:
            raise ShapeError(
                arch.kind, f"parameter {info.name!r} has shape {theta[info.name].shape}, expected {info.shape}"
            )


def _norm(theta, name: str, x: Tensor, bn_state: BatchNormState, stats: Optional[dict]) -> Tensor:
    if stats is not None:
        axes = (0,) + tuple(range(2, x.ndim))
        stats[name] = (x.data.mean(axis=axes), x.data.var(axis=axes))
    mean, var = bn_state[name]
    return ad.batch_norm(x, theta[name + ".gamma"], theta[name + ".beta"], mean, var, BN_EPS)


def _linear_info(prefix: str, fin: int, fout: int, partition=ADAPTED, last=False) -> List[ParamInfo]:
    return [
        ParamInfo(prefix + ".weight", (fout, fin), "weight", fin, fout, partition, last),
        ParamInfo(prefix + ".bias", (fout,), "bias", fin, fout, partition, last),
    ]


def _conv_info(prefix: str, cin: int, cout: int, kernel: Tuple[int, ...], partition=ADAPTED) -> List[ParamInfo]:
    k = int(np.prod(kernel))
    return [
        ParamInfo(prefix + ".weight", (cout, cin) + tuple(kernel), "weight", cin * k, cout * k, partition),
        ParamInfo(prefix + ".bias", (cout,), "bias", cin * k, cout * k, partition),
    ]


def _bn_info(prefix: str, c: int, partition=ADAPTED) -> List[ParamInfo]:
    return [
        ParamInfo(prefix + ".gamma", (c,), "bn_gamma", partition=partition),
        ParamInfo(prefix + ".beta", (c,), "bn_beta", partition=partition),
    ]


class _Architecture:
    kind = "base"

    def layout(self) -> List[ParamInfo]:
        raise NotImplementedError

    def bn_channels(self) -> Dict[str, int]:
        return {i.name[: -len(".gamma")]: i.shape[0] for i in self.layout() if i.kind == "bn_gamma"}

    def initial_bn_state(self, momentum: float = 0.99) -> BatchNormState:
        return BatchNormState.initial(self.bn_channels(), momentum)

    def partition(self) -> Dict[str, str]:
        return {i.name: i.partition for i in self.layout()}

    def num_params(self) -> int:
        return int(sum(np.prod(i.shape) for i in self.layout()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind
        return d

    def _prepare(self, theta: ParamSet, x, bn_state: Optional[BatchNormState]):
        _check_theta(self, theta)
        x = ad.as_tensor(x)
        expected = self.input_shape
        if tuple(x.shape[1:]) != tuple(expected):
            raise ShapeError(self.kind, f"input shape {x.shape[1:]} does not match {tuple(expected)}")
        if bn_state is None:
            bn_state = self.initial_bn_state()
        return x, bn_state


@dataclass(frozen=True)
class MLPSpec(_Architecture):
    """Fully connected base model for vector-valued tasks.

    Blocks are linear -> running-stats norm -> ReLU, followed by a linear head.
    """

    in_features: int = 16
    hidden: Tuple[int, ...] = (32, 32)
    num_classes: int = 5
    batch_norm: bool = True
    kind = "mlp"

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (self.in_features,)

    def layout(self) -> List[ParamInfo]:
        out: List[ParamInfo] = []
        fin = self.in_features
        for i, h in enumerate(self.hidden):
            out += _linear_info(f"fc{i}", fin, h)
            if self.batch_norm:
                out += _bn_info(f"bn{i}", h)
            fin = h
        out += _linear_info("head", fin, self.num_classes, last=True)
        return out

    def forward(self, theta: ParamSet, x, bn_state: Optional[BatchNormState] = None,
                stats: Optional[dict] = None) -> Tensor:
        h, bn_state = self._prepare(theta, x, bn_state)
        for i in range(len(self.hidden)):
            h = ad.linear(h, theta[f"fc{i}.weight"], theta[f"fc{i}.bias"])
            if self.batch_norm:
                h = _norm(theta, f"bn{i}", h, bn_state, stats)
            h = ad.relu(h)
        return ad.linear(h, theta["head.weight"], theta["head.bias"])


@dataclass(frozen=True)
class LowEndSpec(_Architecture):
    """Conv -> norm -> ReLU -> 2x2 max-pool blocks and a linear head.

    The default is a desk-scale stack; :meth:`full_scale` gives the
    four-block, 48-filter configuration used on 84x84 RGB images.
    """

    in_channels: int = 1
    image_size: int = 14
    filters: int = 8
    blocks: int = 3
    kernel_size: int = 3
    num_classes: int = 5
    kind = "lowend"

    @classmethod
    def full_scale(cls, num_classes: int = 5) -> "LowEndSpec":
        return cls(in_channels=3, image_size=84, filters=48, blocks=4, num_classes=num_classes)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (self.in_channels, self.image_size, self.image_size)

    def _final_size(self) -> int:
        s = self.image_size
        for _ in range(self.blocks):
            s //= 2
        if s < 1:
            raise ShapeError(self.kind, f"{self.blocks} pooling blocks collapse a {self.image_size}px input")
        return s

    def layout(self) -> List[ParamInfo]:
        out: List[ParamInfo] = []
        cin = self.in_channels
        k = (self.kernel_size, self.kernel_size)
        for i in range(self.blocks):
            out += _conv_info(f"conv{i}", cin, self.filters, k)
            out += _bn_info(f"bn{i}", self.filters)
            cin = self.filters
        s = self._final_size()
        out += _linear_info("head", self.filters * s * s, self.num_classes, last=True)
        return out

    def forward(self, theta: ParamSet, x, bn_state: Optional[BatchNormState] = None,
                stats: Optional[dict] = None) -> Tensor:
        h, bn_state = self._prepare(theta, x, bn_state)
        for i in range(self.blocks):
            h = ad.conv2d(h, theta[f"conv{i}.weight"], theta[f"conv{i}.bias"],
                          padding=self.kernel_size // 2)
            h = _norm(theta, f"bn{i}", h, bn_state, stats)
            h = ad.max_pool2d(ad.relu(h), 2)
        h = ad.flatten(h)
        return ad.linear(h, theta["head.weight"], theta["head.bias"])


def lowend_forward(theta: ParamSet, x, bn_state: Optional[BatchNormState] = None,
                   spec: LowEndSpec = LowEndSpec(), stats: Optional[dict] = None) -> Tensor:
    """Logits of the low-end classifier, shape (batch, num_classes)."""
    return spec.forward(theta, x, bn_state, stats)


@dataclass(frozen=True)
class HighEndSpec(_Architecture):
    """Dense-stage classifier with squeeze-excite dense block units.

    Layout: 3x3 stem conv, ``num_dense_stages`` stages of
    ``dense_block_units_per_stage`` units separated by transition layers
    (norm, ReLU, 1x1 compression conv, 2x2 average pool), then norm, ReLU,
    global average pooling and a linear head.

    A dense block unit rescales its input channels with squeeze-excite
    attention, runs a bottleneck (norm, ReLU, 1x1 conv to
    ``bottleneck_factor * k`` channels, norm, ReLU, 3x3 conv to ``k``
    channels) on the result, and appends those ``k`` channels to its input.

    Only the last unit and the head are in the adapted partition.
    """

    in_channels: int = 1
    image_size: int = 8
    growth_rate: int = 8
    num_dense_stages: int = 2
    dense_block_units_per_stage: int = 2
    transition_compression: float = 0.5
    se_reduction_ratio: int = 16
    bottleneck_factor: int = 4
    stem_channels: Optional[int] = None
    num_classes: int = 5
    kind = "highend"

    def __post_init__(self):
        if not 0.0 < self.transition_compression <= 1.0:
            raise ValueError("transition_compression must lie in (0, 1]")
        if self.growth_rate < 1 or self.se_reduction_ratio < 1:
            raise ValueError("growth_rate and se_reduction_ratio must be positive")

    @classmethod
    def full_scale(cls, num_classes: int = 5) -> "HighEndSpec":
        return cls(in_channels=3, image_size=84, growth_rate=64, num_classes=num_classes)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return (self.in_channels, self.image_size, self.image_size)

    @property
    def stem_width(self) -> int:
        return self.stem_channels or 2 * self.growth_rate

    def unit_prefix(self, stage: int, unit: int) -> str:
        return f"stage{stage}.unit{unit}"

    def stage_channels(self) -> List[Tuple[int, int]]:
        """(input, output) channel counts of every dense stage."""
        out = []
        c = self.stem_width
        for s in range(self.num_dense_stages):
            c_out = c + self.dense_block_units_per_stage * self.growth_rate
            out.append((c, c_out))
            c = c_out
            if s < self.num_dense_stages - 1:
                c = max(1, int(c * self.transition_compression))
        return out

    def layout(self) -> List[ParamInfo]:
        k = self.growth_rate
        width = self.bottleneck_factor * k
        last_unit = self.unit_prefix(self.num_dense_stages - 1, self.dense_block_units_per_stage - 1)
        out: List[ParamInfo] = _conv_info("stem", self.in_channels, self.stem_width, (3, 3), SHARED)
        stages = self.stage_channels()
        for s, (cin, cout) in enumerate(stages):
            c = cin
            for u in range(self.dense_block_units_per_stage):
                p = self.unit_prefix(s, u)
                part = ADAPTED if p == last_unit else SHARED
                squeeze = max(1, c // self.se_reduction_ratio)
                out += _linear_info(p + ".se1", c, squeeze, part)
                out += _linear_info(p + ".se2", squeeze, c, part)
                out += _bn_info(p + ".bn1", c, part)
                out += _conv_info(p + ".conv1", c, width, (1, 1), part)
                out += _bn_info(p + ".bn2", width, part)
                out += _conv_info(p + ".conv2", width, k, (3, 3), part)
                c += k
            if s < len(stages) - 1:
                out += _bn_info(f"transition{s}.bn", cout, SHARED)
                out += _conv_info(f"transition{s}.conv", cout, stages[s + 1][0], (1, 1), SHARED)
        out += _bn_info("final.bn", stages[-1][1], SHARED)
        out += _linear_info("head", stages[-1][1], self.num_classes, ADAPTED, last=True)
        return out

    def adapted_names(self) -> List[str]:
        return [i.name for i in self.layout() if i.partition == ADAPTED]

    def _unit(self, theta, p: str, x: Tensor, bn_state, stats) -> Tensor:
        b, c = x.shape[:2]
        z = ad.global_avg_pool(x)
        z = ad.relu(ad.linear(z, theta[p + ".se1.weight"], theta[p + ".se1.bias"]))
        z = ad.sigmoid(ad.linear(z, theta[p + ".se2.weight"], theta[p + ".se2.bias"]))
        att = ad.mul(x, ad.reshape(z, (b, c, 1, 1)))
        h = ad.relu(_norm(theta, p + ".bn1", att, bn_state, stats))
        h = ad.conv2d(h, theta[p + ".conv1.weight"], theta[p + ".conv1.bias"])
        h = ad.relu(_norm(theta, p + ".bn2", h, bn_state, stats))
        h = ad.conv2d(h, theta[p + ".conv2.weight"], theta[p + ".conv2.bias"], padding=1)
        return ad.concat([x, h], axis=1)

    def forward(self, theta: ParamSet, x, bn_state: Optional[BatchNormState] = None,
                stats: Optional[dict] = None) -> Tensor:
        h, bn_state = self._prepare(theta, x, bn_state)
        h = ad.conv2d(h, theta["stem.weight"], theta["stem.bias"], padding=1)
        for s in range(self.num_dense_stages):
            for u in range(self.dense_block_units_per_stage):
                h = self._unit(theta, self.unit_prefix(s, u), h, bn_state, stats)
            if s < self.num_dense_stages - 1:
                h = ad.relu(_norm(theta, f"transition{s}.bn", h, bn_state, stats))
                h = ad.conv2d(h, theta[f"transition{s}.conv.weight"], theta[f"transition{s}.conv.bias"])
                if min(h.shape[2:]) >= 2:
                    h = ad.avg_pool2d(h, 2)
        h = ad.relu(_norm(theta, "final.bn", h, bn_state, stats))
        h = ad.global_avg_pool(h)
        return ad.linear(h, theta["head.weight"], theta["head.bias"])


def highend_forward(theta: ParamSet, x, spec: HighEndSpec,
                    bn_state: Optional[BatchNormState] = None, stats: Optional[dict] = None) -> Tensor:
    """Logits of the high-end classifier, shape (batch, num_classes)."""
    return spec.forward(theta, x, bn_state, stats)


ARCHITECTURES = {cls.kind: cls for cls in (MLPSpec, LowEndSpec, HighEndSpec)}


def architecture_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = ARCHITECTURES[kind]
    except KeyError:
        raise ValueError(f"unknown architecture kind {kind!r}") from None
    for key, value in d.items():
        if isinstance(value, list):
            d[key] = tuple(value)
    return cls(**d)
