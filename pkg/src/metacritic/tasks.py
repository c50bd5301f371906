"""Few-shot task families and episode sampling.

Three family kinds share one sampling rule:

* ``gaussian_blobs``: each class is an isotropic Gaussian around a prototype
  drawn once per family seed.
* ``pattern_glyphs``: each class is a 14x14 binary glyph made of a few
  strokes; samples are jittered and speckled copies.
* ``file_corpus``: a fixed pool of samples per class, loaded from disk or
  materialised from one of the generators.

Classes are split into disjoint ``train``/``val``/``test`` pools. An episode
is a pure function of ``(family seed, split, index, way, shot, query)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .container import ArrayWriter, FormatError, read_array, read_container, write_container
from .rng import derive_rng

SPLITS = ("train", "val", "test")
CORPUS_MAGIC = b"METACORP"


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task with episode-local labels ``0..way-1``."""

    task_id: str
    x_support: np.ndarray
    y_support: np.ndarray
    x_target: np.ndarray
    y_target: np.ndarray
    way: int
    shot: int
    query: int
    classes: Tuple[str, ...]  # global class id behind each local label

    def equal(self, other: "Episode") -> bool:
        return (
            self.task_id == other.task_id
            and self.classes == other.classes
            and np.array_equal(self.x_support, other.x_support)
            and np.array_equal(self.y_support, other.y_support)
            and np.array_equal(self.x_target, other.x_target)
            and np.array_equal(self.y_target, other.y_target)
        )


def _check_split(split: str) -> None:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")


class TaskFamily:
    """Base class; subclasses provide ``_draw(class_id, rng, n)``."""

    kind = "base"

    def __init__(self, splits: Mapping[str, Sequence[str]], seed: int = 0):
        pools = {s: tuple(splits.get(s, ())) for s in SPLITS}
        seen: Dict[str, str] = {}
        for s, ids in pools.items():
            for c in ids:
                if c in seen:
                    raise ValueError(f"class {c!r} appears in both {seen[c]!r} and {s!r} splits")
                seen[c] = s
        self.splits = pools
        self.seed = int(seed)

    def pool(self, split: str) -> Tuple[str, ...]:
        _check_split(split)
        return self.splits[split]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        raise NotImplementedError

    def _draw(self, class_id: str, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def sample_episode(self, split: str, index: int, way: int, shot: int, query: int) -> Episode:
        pool = self.pool(split)
        if way < 1 or shot < 1 or query < 1:
            raise ValueError("way, shot and query must be positive")
        if way > len(pool):
            raise ValueError(f"way={way} exceeds the {len(pool)} classes of split {split!r}")
        rng = derive_rng(self.seed, "episode", split, int(index))
        chosen = [pool[i] for i in rng.choice(len(pool), size=way, replace=False)]
        xs, ys, xt, yt = [], [], [], []
        for label, cid in enumerate(chosen):
            samples = self._draw(cid, rng, shot + query)
            xs.append(samples[:shot])
            xt.append(samples[shot:])
            ys += [label] * shot
            yt += [label] * query
        xs, xt = np.concatenate(xs), np.concatenate(xt)
        ys, yt = np.asarray(ys, dtype=np.int64), np.asarray(yt, dtype=np.int64)
        # shuffle so that sample order carries no label information
        ps, pt = rng.permutation(len(ys)), rng.permutation(len(yt))
        return Episode(f"{split}-{index}", xs[ps], ys[ps], xt[pt], yt[pt], way, shot, query, tuple(chosen))

    def materialize(self, samples_per_class: int) -> "FileCorpus":
        """Freeze ``samples_per_class`` draws of every class into a :class:`FileCorpus`."""
        data = {}
        for split in SPLITS:
            for cid in self.splits[split]:
                data[cid] = self._draw(cid, derive_rng(self.seed, "materialize", cid), samples_per_class)
        return FileCorpus(data, self.splits, self.seed, source={"kind": self.kind, **self.params()})


def _class_ids(counts: Sequence[int]) -> Dict[str, List[str]]:
    out, k = {}, 0
    for split, n in zip(SPLITS, counts):
        out[split] = [f"c{k + i:04d}" for i in range(n)]
        k += n
    return out


class GaussianBlobs(TaskFamily):
    kind = "gaussian_blobs"

    def __init__(self, seed: int = 0, dim: int = 16, noise: float = 0.1, spread: float = 1.0,
                 split_sizes: Tuple[int, int, int] = (64, 16, 20)):
        super().__init__(_class_ids(split_sizes), seed)
        if noise < 0 or spread <= 0:
            raise ValueError("noise must be non-negative and spread positive")
        self.dim, self.noise, self.spread = int(dim), float(noise), float(spread)
        self.split_sizes = tuple(int(n) for n in split_sizes)
        total = sum(self.split_sizes)
        protos = derive_rng(self.seed, "prototypes").normal(0.0, self.spread, size=(total, self.dim))
        self.prototypes = {f"c{i:04d}": protos[i] for i in range(total)}

    @property
    def sample_shape(self):
        return (self.dim,)

    def params(self) -> dict:
        return {"dim": self.dim, "noise": self.noise, "spread": self.spread,
                "split_sizes": list(self.split_sizes)}

    def _draw(self, class_id, rng, n):
        return self.prototypes[class_id] + self.noise * rng.standard_normal((n, self.dim))


_DIRECTIONS = [(0, 1), (1, 0), (1, 1), (1, -1), (0, -1), (-1, 0), (-1, -1), (-1, 1)]


class PatternGlyphs(TaskFamily):
    kind = "pattern_glyphs"

    def __init__(self, seed: int = 0, size: int = 14, strokes: int = 3, jitter: int = 1,
                 flip_prob: float = 0.02, split_sizes: Tuple[int, int, int] = (64, 16, 20)):
        super().__init__(_class_ids(split_sizes), seed)
        self.size, self.strokes, self.jitter, self.flip_prob = int(size), int(strokes), int(jitter), float(flip_prob)
        self.split_sizes = tuple(int(n) for n in split_sizes)
        self.glyphs = {cid: self._render(derive_rng(self.seed, "glyph", cid))
                       for ids in self.splits.values() for cid in ids}

    @property
    def sample_shape(self):
        return (1, self.size, self.size)

    def params(self) -> dict:
        return {"size": self.size, "strokes": self.strokes, "jitter": self.jitter,
                "flip_prob": self.flip_prob, "split_sizes": list(self.split_sizes)}

    def _render(self, rng) -> np.ndarray:
        img = np.zeros((self.size, self.size))
        margin = 2
        for _ in range(self.strokes):
            r, c = rng.integers(margin, self.size - margin, size=2)
            dr, dc = _DIRECTIONS[rng.integers(len(_DIRECTIONS))]
            for _ in range(rng.integers(3, 8)):
                if 0 <= r < self.size and 0 <= c < self.size:
                    img[r, c] = 1.0
                r, c = r + dr, c + dc
        return img

    def _draw(self, class_id, rng, n):
        base = self.glyphs[class_id]
        out = np.empty((n, 1, self.size, self.size))
        for i in range(n):
            dr, dc = rng.integers(-self.jitter, self.jitter + 1, size=2)
            img = np.roll(np.roll(base, dr, axis=0), dc, axis=1)
            flips = rng.random(img.shape) < self.flip_prob
            out[i, 0] = np.where(flips, 1.0 - img, img)
        return out


class FileCorpus(TaskFamily):
    """Fixed per-class sample arrays; episodes draw without replacement within a class."""

    kind = "file_corpus"

    def __init__(self, samples: Mapping[str, np.ndarray], splits: Mapping[str, Sequence[str]],
                 seed: int = 0, source: Optional[dict] = None):
        super().__init__(splits, seed)
        self.samples = {k: np.asarray(v, dtype=np.float64) for k, v in samples.items()}
        for split, ids in self.splits.items():
            for cid in ids:
                if cid not in self.samples:
                    raise ValueError(f"class {cid!r} declared in split {split!r} has no samples")
        shapes = {v.shape[1:] for v in self.samples.values()}
        if len(shapes) > 1:
            raise ValueError(f"classes disagree on sample shape: {sorted(shapes)}")
        self._shape = shapes.pop() if shapes else ()
        self.source = source or {}

    @property
    def sample_shape(self):
        return self._shape

    def params(self) -> dict:
        return {"source": self.source}

    def _draw(self, class_id, rng, n):
        pool = self.samples[class_id]
        if n > len(pool):
            raise ValueError(f"class {class_id!r} has {len(pool)} samples, episode needs {n}")
        return pool[rng.permutation(len(pool))[:n]]


def save_corpus(path: Union[str, Path], corpus: FileCorpus) -> None:
    """Write ``corpus`` in the container format (magic ``METACORP``).

    Header::

        {"kind": "file_corpus", "seed": int, "source": {...},
         "manifest": {"train": [ids], "val": [ids], "test": [ids]},
         "classes": [{"id": str, "samples": {"shape": [n, ...], "offset": o}}, ...]}
    """
    writer = ArrayWriter()
    classes = [{"id": cid, "samples": writer.add(arr)} for cid, arr in corpus.samples.items()]
    header = {
        "kind": "file_corpus",
        "seed": corpus.seed,
        "source": corpus.source,
        "manifest": {s: list(corpus.splits[s]) for s in SPLITS},
        "classes": classes,
    }
    write_container(path, CORPUS_MAGIC, header, writer)


def load_episode_file(path: Union[str, Path]) -> FileCorpus:
    """Read a corpus written by :func:`save_corpus`; malformed input raises :class:`FormatError`."""
    header, data = read_container(path, CORPUS_MAGIC)
    if header.get("kind") != "file_corpus":
        raise FormatError(f"{path}: header kind must be 'file_corpus', got {header.get('kind')!r}")
    manifest = header.get("manifest")
    if not isinstance(manifest, dict):
        raise FormatError(f"{path}: missing manifest")
    unknown = set(manifest) - set(SPLITS)
    if unknown:
        raise FormatError(f"{path}: manifest has unknown splits {sorted(unknown)}")
    samples: Dict[str, np.ndarray] = {}
    for i, rec in enumerate(header.get("classes", [])):
        if not isinstance(rec, dict) or "id" not in rec or "samples" not in rec:
            raise FormatError(f"{path}: class record {i} needs 'id' and 'samples'")
        cid = str(rec["id"])
        if cid in samples:
            raise FormatError(f"{path}: class record {i} repeats id {cid!r}")
        arr = read_array(data, rec["samples"], f"{path}: class record {i} ({cid})")
        if arr.ndim < 1:
            raise FormatError(f"{path}: class record {i} ({cid}) must have a sample axis")
        samples[cid] = arr
    for split in SPLITS:
        for cid in manifest.get(split, []):
            if cid not in samples:
                raise FormatError(f"{path}: manifest split {split!r} declares class {cid!r} with no record")
    try:
        return FileCorpus(samples, manifest, int(header.get("seed", 0)), header.get("source"))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def make_family(kind: str, seed: int = 0, path: Optional[str] = None, **params) -> TaskFamily:
    """Build a family from its kind name (as used in configuration files)."""
    if kind == "gaussian_blobs":
        return GaussianBlobs(seed=seed, **params)
    if kind == "pattern_glyphs":
        return PatternGlyphs(seed=seed, **params)
    if kind == "file_corpus":
        if not path:
            raise ValueError("file_corpus needs a path")
        return load_episode_file(path)
    raise ValueError(f"unknown task family {kind!r}")


def nearest_prototype_accuracy(episode: Episode) -> float:
    """Accuracy of classifying target samples by the closest support-class mean."""
    xs = episode.x_support.reshape(len(episode.x_support), -1)
    xt = episode.x_target.reshape(len(episode.x_target), -1)
    protos = np.stack([xs[episode.y_support == c].mean(axis=0) for c in range(episode.way)])
    d = ((xt[:, None, :] - protos[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(axis=1) == episode.y_target))
