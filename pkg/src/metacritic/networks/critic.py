"""Learned label-free loss: a densely connected stack of dilated 1-D convolutions."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import autodiff as ad
from ..autodiff import ShapeError, Tensor
from .params import ParamInfo, ParamSet

NUM_CONV_LAYERS = 5
KERNEL_SIZE = 2
KERNELS_PER_LAYER = 8


def pad_for_layer(layer_index: int, num_layers: int = NUM_CONV_LAYERS) -> Tuple[int, int]:
    """Zero padding (left, right) that keeps the sequence length at layer ``layer_index``.

    With kernel size 2 and stride 1 the layer shortens its input by its
    dilation ``2**i``, so that many zeros are needed. An odd count puts the
    extra zero on the right.
    """
    if not 0 <= layer_index < num_layers:
        raise ValueError(f"layer index {layer_index} outside 0..{num_layers - 1}")
    total = (2 ** layer_index) * (KERNEL_SIZE - 1)
    return total // 2, total - total // 2


@dataclass(frozen=True)
class CriticSpec:
    """Shape of a critic for feature vectors of length ``length``.

    ``fc_skip`` feeds the raw input and every conv output to the first fully
    connected layer. Without it only the last conv output is used; that
    variant exists for diagnostics.
    """

    length: int
    num_conv_layers: int = NUM_CONV_LAYERS
    kernel_size: int = KERNEL_SIZE
    kernels_per_layer: int = KERNELS_PER_LAYER
    fc_skip: bool = True
    kind = "critic"

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("critic input length must be positive")
        if self.kernel_size != KERNEL_SIZE:
            raise ValueError("only kernel size 2 has a length-preserving padding table")

    def dilation(self, i: int) -> int:
        return 2 ** i

    def in_channels(self, i: int) -> int:
        return 1 + self.kernels_per_layer * i

    @property
    def concat_channels(self) -> int:
        return 1 + self.kernels_per_layer * self.num_conv_layers

    @property
    def fc_in_features(self) -> int:
        if self.fc_skip:
            return self.concat_channels * self.length
        return self.kernels_per_layer * self.length

    def layout(self) -> List[ParamInfo]:
        out: List[ParamInfo] = []
        k, m = self.kernel_size, self.kernels_per_layer
        for i in range(self.num_conv_layers):
            cin = self.in_channels(i)
            out.append(ParamInfo(f"conv{i}.weight", (m, cin, k), "weight", cin * k, m * k))
            out.append(ParamInfo(f"conv{i}.bias", (m,), "bias", cin * k, m * k))
        d = self.fc_in_features
        out.append(ParamInfo("fc1.weight", (d, d), "weight", d, d))
        out.append(ParamInfo("fc1.bias", (d,), "bias", d, d))
        out.append(ParamInfo("fc2.weight", (1, d), "weight", d, 1, last_linear=True))
        out.append(ParamInfo("fc2.bias", (1,), "bias", d, 1, last_linear=True))
        return out

    def num_params(self) -> int:
        return int(sum(np.prod(i.shape) for i in self.layout()))

    def partition(self) -> Dict[str, str]:
        return {i.name: "adapted" for i in self.layout()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind
        return d


def _infer_spec(W: ParamSet, length: int) -> CriticSpec:
    spec = CriticSpec(length)
    w = W["fc1.weight"] if "fc1.weight" in W else None
    if w is not None and w.shape[1] == spec.kernels_per_layer * length:
        spec = CriticSpec(length, fc_skip=False)
    return spec


def critic_forward(W: ParamSet, F, spec: Optional[CriticSpec] = None,
                   return_shapes: Optional[list] = None) -> Tensor:
    """Scalar critic value for a (1, L) feature row ``F``.

    Layer ``i`` sees the concatenation (on channels) of the input and all
    earlier conv outputs, uses dilation ``2**i`` and the padding from
    :func:`pad_for_layer`, and is followed by ReLU. The head is
    fc1 (square) -> ReLU -> fc2 (to one value). ``return_shapes``, when a
    list, receives the (in_shape, out_shape) of each conv layer and the
    fc1 input shape.
    """
    F = ad.as_tensor(F)
    if F.ndim != 2 or F.shape[0] != 1:
        raise ShapeError("critic", f"feature set must have shape (1, L), got {F.shape}")
    length = F.shape[1]
    if spec is None:
        spec = _infer_spec(W, length)
    elif spec.length != length:
        raise ShapeError("critic", f"critic built for L={spec.length} but feature set has L={length}")
    for info in spec.layout():
        if info.name not in W or W[info.name].shape != info.shape:
            got = W[info.name].shape if info.name in W else None
            raise ShapeError(
                "critic", f"parameter {info.name!r} has shape {got}, expected {info.shape} for L={length}"
            )

    head_in = critic_features(W, F, spec, return_shapes)
    h = ad.relu(ad.linear(head_in, W["fc1.weight"], W["fc1.bias"]))
    out = ad.linear(h, W["fc2.weight"], W["fc2.bias"])
    return ad.reshape(out, ())


def critic_features(W: ParamSet, F, spec: CriticSpec, return_shapes: Optional[list] = None) -> Tensor:
    """Run the dilated conv stack and return the (1, fc_in_features) input of the head.

    Only the ``conv*`` entries of ``W`` are read.
    """
    F = ad.as_tensor(F)
    length = F.shape[1]
    x = ad.reshape(F, (1, 1, length))
    features = [x]
    for i in range(spec.num_conv_layers):
        inp = features[0] if i == 0 else ad.concat(features, axis=1)
        h = ad.conv1d(inp, W[f"conv{i}.weight"], W[f"conv{i}.bias"],
                      dilation=spec.dilation(i), padding=pad_for_layer(i, spec.num_conv_layers))
        h = ad.relu(h)
        if return_shapes is not None:
            return_shapes.append((inp.shape, h.shape))
        features.append(h)
    head_in = ad.concat(features, axis=1) if spec.fc_skip else features[-1]
    head_in = ad.reshape(head_in, (1, -1))
    if return_shapes is not None:
        return_shapes.append(head_in.shape)
    return head_in


def critic_input_gradient_norm(W: ParamSet, F, spec: Optional[CriticSpec] = None) -> float:
    """Euclidean norm of d(critic output)/dF; a diagnostic for dead critics."""
    F = ad.Tensor(ad.as_tensor(F).data, requires_grad=True)
    with ad.grad_mode(True):
        out = critic_forward(W.detached(), F, spec)
    (g,) = ad.grad(out, [F])
    return float(np.linalg.norm(g.data))


def estimate_critic_memory(base_param_count: int, bytes_per_value: int,
                           concat_channels: int = 1 + NUM_CONV_LAYERS * KERNELS_PER_LAYER) -> int:
    """Bytes taken by the square first FC weight when every base parameter is a critic input."""
    if base_param_count <= 0 or bytes_per_value <= 0:
        raise ValueError("parameter count and bytes per value must be positive")
    width = int(base_param_count) * concat_channels
    return width * width * int(bytes_per_value)


def format_bytes(n: float) -> str:
    """Decimal (SI) rendering, e.g. ``32.9 TB``."""
    for unit in ("B", "kB", "MB", "GB", "TB", "PB"):
        if abs(n) < 1000 or unit == "PB":
            return f"{n:.3g} {unit}" if unit != "B" else f"{int(n)} B"
        n /= 1000.0
    return f"{n:.3g} PB"
