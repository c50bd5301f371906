"""Named parameter collections and running normalisation statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import Tensor, concat, reshape

ADAPTED = "adapted"
SHARED = "shared"


@dataclass(frozen=True)
class ParamInfo:
    """Layout entry describing one parameter tensor of an architecture."""

    name: str
    shape: Tuple[int, ...]
    kind: str  # "weight", "bias", "bn_gamma" or "bn_beta"
    fan_in: int = 1
    fan_out: int = 1
    partition: str = ADAPTED
    last_linear: bool = False


class ParamSet(Mapping[str, Tensor]):
    """Ordered, immutable mapping of parameter names to tensors.

    Each entry carries a partition label, ``"adapted"`` (updated by inner
    loops) or ``"shared"`` (only touched by the outer loop). :meth:`replace`
    is how fast weights are produced: it returns a new set and leaves this
    one untouched.
    """

    __slots__ = ("_names", "_tensors", "_partition")

    def __init__(self, items: Iterable[Tuple[str, Tensor]],
                 partition: Optional[Mapping[str, str]] = None):
        names: List[str] = []
        tensors: Dict[str, Tensor] = {}
        for name, t in items:
            if name in tensors:
                raise ValueError(f"duplicate parameter name {name!r}")
            names.append(name)
            tensors[name] = t if isinstance(t, Tensor) else Tensor(t)
        part = {n: ADAPTED for n in names}
        if partition:
            for n, label in partition.items():
                if n not in tensors:
                    raise KeyError(f"partition names unknown parameter {n!r}")
                if label not in (ADAPTED, SHARED):
                    raise ValueError(f"unknown partition label {label!r}")
                part[n] = label
        self._names = tuple(names)
        self._tensors = tensors
        self._partition = part

    # Mapping protocol
    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} tensors, {self.num_values} values)"

    @property
    def names(self) -> Tuple[str, ...]:
        return self._names

    @property
    def adapted_names(self) -> Tuple[str, ...]:
        return tuple(n for n in self._names if self._partition[n] == ADAPTED)

    @property
    def shared_names(self) -> Tuple[str, ...]:
        return tuple(n for n in self._names if self._partition[n] == SHARED)

    @property
    def partition(self) -> Dict[str, str]:
        return dict(self._partition)

    def partition_of(self, name: str) -> str:
        return self._partition[name]

    @property
    def num_values(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def replace(self, updates: Mapping[str, Tensor]) -> "ParamSet":
        """New set with ``updates`` substituted; shapes must be preserved."""
        for name, t in updates.items():
            if name not in self._tensors:
                raise KeyError(f"unknown parameter {name!r}")
            if tuple(t.shape) != self._tensors[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {tuple(t.shape)} vs {self._tensors[name].shape}"
                )
        items = [(n, updates[n] if n in updates else self._tensors[n]) for n in self._names]
        return ParamSet(items, self._partition)

    def subset(self, names: Sequence[str]) -> "ParamSet":
        return ParamSet([(n, self._tensors[n]) for n in names],
                        {n: self._partition[n] for n in names})

    def detached(self) -> "ParamSet":
        return ParamSet([(n, t.detach()) for n, t in self.items()], self._partition)

    def as_leaves(self) -> "ParamSet":
        """Fresh leaf tensors sharing the values, recording gradients."""
        return ParamSet([(n, Tensor(t.data, requires_grad=True)) for n, t in self.items()],
                        self._partition)

    def flatten(self) -> Tensor:
        """All values as one (1, P) row, in parameter order."""
        return concat([reshape(self._tensors[n], (1, -1)) for n in self._names], axis=1)

    def to_numpy(self) -> Dict[str, np.ndarray]:
        return {n: self._tensors[n].data.copy() for n in self._names}

    def equal(self, other: "ParamSet") -> bool:
        return self._names == other._names and all(
            np.array_equal(self[n].data, other[n].data) for n in self._names
        )

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray],
                    partition: Optional[Mapping[str, str]] = None,
                    requires_grad: bool = False) -> "ParamSet":
        return cls([(n, Tensor(np.array(a, dtype=np.float64), requires_grad=requires_grad))
                    for n, a in arrays.items()], partition)


class BatchNormState:
    """Running mean/variance per normalisation layer.

    Forward passes only read these values. :meth:`updated` is the single
    write path; it returns a new state.
    """

    def __init__(self, stats: Mapping[str, Tuple[np.ndarray, np.ndarray]], momentum: float = 0.99):
        self.stats = {k: (np.asarray(m, dtype=np.float64), np.asarray(v, dtype=np.float64))
                      for k, (m, v) in stats.items()}
        self.momentum = float(momentum)

    @classmethod
    def initial(cls, channels: Mapping[str, int], momentum: float = 0.99) -> "BatchNormState":
        return cls({k: (np.zeros(c), np.ones(c)) for k, c in channels.items()}, momentum)

    def __getitem__(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        return self.stats[name]

    def __contains__(self, name: str) -> bool:
        return name in self.stats

    def updated(self, batch_stats: Mapping[str, Tuple[np.ndarray, np.ndarray]]) -> "BatchNormState":
        d = self.momentum
        new = dict(self.stats)
        for name, (bm, bv) in batch_stats.items():
            m, v = self.stats[name]
            new[name] = (d * m + (1.0 - d) * bm, d * v + (1.0 - d) * bv)
        return BatchNormState(new, d)

    def copy(self) -> "BatchNormState":
        return BatchNormState({k: (m.copy(), v.copy()) for k, (m, v) in self.stats.items()},
                              self.momentum)

    def equal(self, other: "BatchNormState") -> bool:
        return self.stats.keys() == other.stats.keys() and all(
            np.array_equal(self.stats[k][0], other.stats[k][0])
            and np.array_equal(self.stats[k][1], other.stats[k][1]) for k in self.stats
        )


def average_stats(collected: Sequence[Mapping[str, Tuple[np.ndarray, np.ndarray]]]):
    """Average per-layer batch statistics gathered from several forward passes."""
    if not collected:
        return {}
    keys = collected[0].keys()
    return {k: (np.mean([c[k][0] for c in collected], axis=0),
                np.mean([c[k][1] for c in collected], axis=0)) for k in keys}
