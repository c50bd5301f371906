"""Experiment orchestration: configuration, early-stopped training, seeds, statistics and reports."""
from __future__ import annotations

import ast
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .metalearn import AdamState, MetaConfig, MetaState, evaluate_episode, init_meta_state, meta_step
from .networks import (Checkpoint, HighEndSpec, LowEndSpec, MLPSpec, load_checkpoint,
                       save_checkpoint)
from .rng import derive_rng
from .tasks import TaskFamily, make_family

SCHEMA_VERSION = 1
OUT_ENV = "METACRITIC_OUT"
SECTIONS = ("experiment", "meta", "model", "task", "train")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def parse_value(text: str):
    """Python literal if it parses as one, otherwise the stripped string."""
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return tuple(value) if isinstance(value, list) else value


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    """Flat ``section.key = value`` lines; ``#`` starts a comment."""
    flat: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        check_key(key, f"{source}:{lineno}")
        flat[key] = parse_value(value)
    return flat


def check_key(key: str, where: str = "override") -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"{where}: key {key!r} must look like '<section>.<name>' with section in {SECTIONS}")


def parse_overrides(items: Sequence[str]) -> Dict[str, object]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be 'section.key=value'")
        key, value = item.split("=", 1)
        check_key(key.strip())
        out[key.strip()] = parse_value(value)
    return out


ARCH_PRESETS = {
    "mlp": lambda **kw: MLPSpec(**kw),
    "lowend": lambda **kw: LowEndSpec(**kw),
    "highend": lambda **kw: HighEndSpec(**kw),
    "lowend_full": lambda **kw: LowEndSpec.full_scale(**kw),
    "highend_full": lambda **kw: HighEndSpec.full_scale(**kw),
}

# the dense-stage classifier trains stably with plain SGD and Xavier init (last layer fan-in)
HIGHEND_META_DEFAULTS = {"outer_optimizer": "sgd", "outer_lr": 1e-4, "init_scheme": "xavier_except_last"}


@dataclass
class ExperimentConfig:
    """Full description of an experiment; ``from_flat`` builds one from config-file keys."""

    meta: MetaConfig = field(default_factory=MetaConfig)
    arch: str = "mlp"
    arch_params: Dict[str, object] = field(default_factory=dict)
    task: str = "gaussian_blobs"
    task_params: Dict[str, object] = field(default_factory=dict)
    task_seed: int = 0
    task_path: Optional[str] = None
    way: int = 5
    shot: int = 1
    query: int = 15
    epochs: int = 100
    train_episodes: int = 100
    val_episodes: int = 50
    test_episodes: int = 200
    patience: int = 10
    seeds: Tuple[int, ...] = (0, 1, 2)
    out_dir: str = "runs"
    name: str = "experiment"
    parallel: bool = False
    save_checkpoints: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for attr in ("way", "shot", "query", "epochs", "val_episodes", "test_episodes", "train_episodes"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{attr} must be >= 1")
        if self.train_episodes % self.meta.meta_batch_size:
            raise ConfigError(
                f"train_episodes={self.train_episodes} is not a multiple of "
                f"meta_batch_size={self.meta.meta_batch_size}")
        if self.arch not in ARCH_PRESETS:
            raise ConfigError(f"unknown architecture preset {self.arch!r}; choose from {sorted(ARCH_PRESETS)}")

    # flat key/value representation --------------------------------------
    _EXPERIMENT_KEYS = {"name": "name", "seeds": "seeds", "out_dir": "out_dir", "parallel": "parallel",
                        "save_checkpoints": "save_checkpoints"}
    _TRAIN_KEYS = ("epochs", "train_episodes", "val_episodes", "test_episodes", "patience")
    _TASK_KEYS = {"kind": "task", "seed": "task_seed", "path": "task_path", "way": "way", "shot": "shot",
                  "query": "query"}

    @classmethod
    def from_flat(cls, flat: Mapping[str, object], env: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        kwargs: Dict[str, object] = {"arch_params": {}, "task_params": {}}
        meta_kwargs: Dict[str, object] = {}
        meta_fields = {f.name for f in fields(MetaConfig)}
        for key, value in flat.items():
            check_key(key)
            section, name = key.split(".", 1)
            if section == "experiment":
                if name not in cls._EXPERIMENT_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                kwargs[cls._EXPERIMENT_KEYS[name]] = value
            elif section == "train":
                if name not in cls._TRAIN_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                kwargs[name] = value
            elif section == "meta":
                if name not in meta_fields:
                    raise ConfigError(f"unknown key {key!r}")
                meta_kwargs[name] = value
            elif section == "model":
                if name == "arch":
                    kwargs["arch"] = value
                else:
                    kwargs["arch_params"][name] = value
            else:
                if name in cls._TASK_KEYS:
                    kwargs[cls._TASK_KEYS[name]] = value
                else:
                    kwargs["task_params"][name] = value
        env = os.environ if env is None else env
        if env.get(OUT_ENV):
            kwargs["out_dir"] = env[OUT_ENV]
        if "seeds" in kwargs and isinstance(kwargs["seeds"], int):
            kwargs["seeds"] = (kwargs["seeds"],)
        if str(kwargs.get("arch", "")).startswith("highend"):
            for key, value in HIGHEND_META_DEFAULTS.items():
                meta_kwargs.setdefault(key, value)
        shot = int(kwargs.get("shot", 1))
        try:
            meta = MetaConfig.for_shot(shot, **meta_kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid meta configuration: {exc}") from None
        return cls(meta=meta, **kwargs)

    def to_flat(self) -> Dict[str, object]:
        flat: Dict[str, object] = {}
        for name, attr in self._EXPERIMENT_KEYS.items():
            flat[f"experiment.{name}"] = getattr(self, attr)
        for name in self._TRAIN_KEYS:
            flat[f"train.{name}"] = getattr(self, name)
        for name, value in asdict(self.meta).items():
            flat[f"meta.{name}"] = value
        flat["model.arch"] = self.arch
        for name, value in self.arch_params.items():
            flat[f"model.{name}"] = value
        for name, attr in self._TASK_KEYS.items():
            flat[f"task.{name}"] = getattr(self, attr)
        for name, value in self.task_params.items():
            flat[f"task.{name}"] = value
        return flat

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.to_flat().items()}

    # derived objects -----------------------------------------------------
    def build_family(self) -> TaskFamily:
        return make_family(self.task, self.task_seed, self.task_path, **self.task_params)

    def build_model(self, family: TaskFamily):
        params = dict(self.arch_params)
        params.setdefault("num_classes", self.way)
        shape = family.sample_shape
        if self.arch == "mlp":
            params.setdefault("in_features", int(np.prod(shape)))
        elif len(shape) == 3 and not self.arch.endswith("_full"):
            params.setdefault("in_channels", shape[0])
            params.setdefault("image_size", shape[1])
        return ARCH_PRESETS[self.arch](**params)

    def validate(self) -> Tuple[TaskFamily, object]:
        """Build the family and model, rejecting conflicting settings before any training."""
        try:
            family = self.build_family()
            model = self.build_model(family)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for split in ("train", "val", "test"):
            if self.way > len(family.pool(split)):
                raise ConfigError(f"way={self.way} exceeds the {len(family.pool(split))} classes "
                                  f"of the {split!r} split")
        if model.num_classes != self.way:
            raise ConfigError(f"model has {model.num_classes} outputs but way={self.way}")
        expected = _model_input_shape(model)
        if expected is not None and tuple(expected) != tuple(family.sample_shape):
            raise ConfigError(f"model expects samples of shape {expected}, task produces {family.sample_shape}")
        return family, model


def _model_input_shape(model) -> Optional[Tuple[int, ...]]:
    if isinstance(model, MLPSpec):
        return None
    return (model.in_channels, model.image_size, model.image_size)


def load_config(path: Union[str, Path, None] = None, overrides: Optional[Mapping[str, object]] = None,
                env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Config file (optional), then the process environment, then explicit overrides."""
    flat: Dict[str, object] = {}
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text(), str(path)))
    flat.update(overrides or {})
    cfg = ExperimentConfig.from_flat(flat, env)
    if overrides and "experiment.out_dir" in overrides:
        cfg = replace(cfg, out_dir=str(overrides["experiment.out_dir"]))
    return cfg


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def ci95(values: Sequence[float]) -> float:
    """1.96 times the standard error, with the n-1 sample variance."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("ci95 needs at least 2 values")
    # sorted and shifted by the minimum: order-independent, and exactly 0 for equal values
    x = np.sort(x)
    x = x - x[0]
    return float(1.96 * math.sqrt(float(np.var(x, ddof=1)) / x.size))


def _ci_or_zero(values: Sequence[float]) -> float:
    return ci95(values) if len(values) >= 2 else 0.0


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EarlyStopOutcome:
    best_epoch: int
    best_value: float
    epochs_run: int
    history: List[float]


def train_with_early_stopping(train_epoch: Callable[[int], object], validate: Callable[[int], float],
                              max_epochs: int, patience: int = 10,
                              on_improve: Optional[Callable[[int, float], None]] = None) -> EarlyStopOutcome:
    """Run epochs ``1..max_epochs``; stop once ``patience`` epochs pass without a strict improvement."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best_epoch, best_value, history = 0, -math.inf, []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        train_epoch(epoch)
        value = float(validate(epoch))
        history.append(value)
        if value > best_value:
            best_epoch, best_value = epoch, value
            if on_improve is not None:
                on_improve(epoch, value)
        if epoch - best_epoch >= patience:
            break
    return EarlyStopOutcome(best_epoch, best_value, epoch, history)


@dataclass
class SeedResult:
    seed: int
    test_accuracy: float
    episode_accuracies: List[float]
    best_epoch: int
    epochs_run: int
    best_val_accuracy: float
    wall_clock: float
    val_history: List[float]
    critic_grad_norms: List[float]
    checkpoint: Optional[str] = None


def train_episode_indices(seed: int, epoch: int, count: int) -> np.ndarray:
    """Episode indices of one training epoch; each seed sees its own stream."""
    return derive_rng(seed, "train-episodes", epoch).integers(0, 2 ** 62, size=count)


def state_to_checkpoint(state: MetaState, meta: dict) -> Checkpoint:
    groups = {"theta": state.theta, "lslr": state.lslr}
    if state.critic is not None:
        groups["critic"] = state.critic
    return Checkpoint(state.model, groups, state.bn_state, state.critic_spec, meta)


def state_from_checkpoint(ckpt: Checkpoint) -> MetaState:
    """An evaluation-ready state (optimiser moments are not stored)."""
    theta, lslr = ckpt.groups["theta"], ckpt.groups["lslr"]
    return MetaState(ckpt.arch, theta, lslr, ckpt.bn_state, AdamState.zeros(theta), AdamState.zeros(lslr),
                     ckpt.groups.get("critic"), ckpt.critic_arch)


def evaluate_split(state: MetaState, family: TaskFamily, cfg: ExperimentConfig, split: str,
                   count: int) -> List[float]:
    return [evaluate_episode(state, family.sample_episode(split, i, cfg.way, cfg.shot, cfg.query), cfg.meta)[0]
            for i in range(count)]


def run_seed(cfg: ExperimentConfig, seed: int, log: Optional[Callable[[str], None]] = None) -> SeedResult:
    """Train one seed with early stopping and score its best-validation state on the test split."""
    start = time.perf_counter()
    family, model = cfg.validate()
    mc = cfg.meta
    holder = {"state": init_meta_state(model, mc, seed, cfg.way, cfg.query)}
    best = {}
    norms: List[float] = []
    ckpt_path = Path(cfg.out_dir) / cfg.name / f"seed{seed}" / "best.ckpt"

    def train_epoch(epoch: int) -> None:
        idx = train_episode_indices(seed, epoch, cfg.train_episodes)
        state = holder["state"]
        for k in range(0, len(idx), mc.meta_batch_size):
            batch = [family.sample_episode("train", int(i), cfg.way, cfg.shot, cfg.query)
                     for i in idx[k:k + mc.meta_batch_size]]
            state, metrics = meta_step(state, batch, mc, epoch - 1)
            if mc.uses_critic:
                norms.append(metrics.grad_norm_critic)
        holder["state"] = state

    def validate(epoch: int) -> float:
        acc = float(np.mean(evaluate_split(holder["state"], family, cfg, "val", cfg.val_episodes)))
        if log:
            log(f"seed {seed} epoch {epoch}: val acc {acc:.4f}")
        return acc

    def on_improve(epoch: int, value: float) -> None:
        best["state"] = holder["state"]
        if cfg.save_checkpoints:
            ckpt_path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt_path, state_to_checkpoint(
                holder["state"], {"seed": seed, "epoch": epoch, "val_accuracy": value}))

    outcome = train_with_early_stopping(train_epoch, validate, cfg.epochs, cfg.patience, on_improve)
    state = state_from_checkpoint(load_checkpoint(ckpt_path)) if cfg.save_checkpoints else best["state"]
    test = evaluate_split(state, family, cfg, "test", cfg.test_episodes)
    return SeedResult(seed, float(np.mean(test)), test, outcome.best_epoch, outcome.epochs_run,
                      outcome.best_value, time.perf_counter() - start, outcome.history, norms,
                      str(ckpt_path) if cfg.save_checkpoints else None)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    variant: str
    way: int
    shot: int
    seeds: List[int]
    accuracies: List[float]
    mean: float
    ci95: float
    wall_clock: List[float]
    best_epochs: List[int]
    epochs_run: List[int] = field(default_factory=list)
    episode_ci95: Optional[float] = None
    min_critic_grad_norm: Optional[float] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")
        if self.ci95 < 0:
            raise ValueError("ci95 must be non-negative")

    @classmethod
    def from_seeds(cls, cfg: ExperimentConfig, seeds: Sequence[SeedResult]) -> "RunResult":
        seeds = sorted(seeds, key=lambda r: r.seed)
        accs = [r.test_accuracy for r in seeds]
        episodes = [a for r in seeds for a in r.episode_accuracies]
        norms = [n for r in seeds for n in r.critic_grad_norms]
        return cls(cfg.name, cfg.meta.variant, cfg.way, cfg.shot, [r.seed for r in seeds], accs,
                   float(np.mean(accs)), _ci_or_zero(accs), [r.wall_clock for r in seeds],
                   [r.best_epoch for r in seeds], [r.epochs_run for r in seeds], _ci_or_zero(episodes),
                   min(norms) if norms else None, cfg.to_dict())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["ci95_aggregation"] = "per-seed test accuracy"
        d["episode_ci95_aggregation"] = "per test episode, all seeds pooled"
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "RunResult":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported result schema version {version!r}")
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def save_result(result: RunResult, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "result.json"
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    (directory / "result.csv").write_text(emit_report([result], "csv"))
    return path


def load_results(paths: Sequence[Union[str, Path]]) -> List[RunResult]:
    out = []
    for p in paths:
        data = json.loads(Path(p).read_text())
        items = data if isinstance(data, list) else [data]
        out.extend(RunResult.from_dict(d) for d in items)
    return out


def run_experiment(cfg: ExperimentConfig, log: Optional[Callable[[str], None]] = None,
                   parallel: Optional[bool] = None, write: bool = True) -> RunResult:
    """Every seed of ``cfg``; writes the result record under ``out_dir/name``."""
    cfg.validate()
    if cfg.parallel if parallel is None else parallel:
        with ProcessPoolExecutor() as pool:
            seeds = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        seeds = [run_seed(cfg, s, log) for s in cfg.seeds]
    result = RunResult.from_seeds(cfg, seeds)
    if write:
        save_result(result, Path(cfg.out_dir) / cfg.name)
    return result


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def format_cell(mean: float, ci: float) -> str:
    """Fractions rendered as percentages, e.g. ``55.38 ± 0.39%``."""
    return f"{100 * mean:.2f} ± {100 * ci:.2f}%"


def format_duration(seconds: Sequence[float]) -> str:
    x = np.asarray(seconds, dtype=np.float64)
    mean = float(x.mean())
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    if mean >= 3600:
        return f"{mean / 3600:.1f} ± {std / 3600:.1f}h"
    return f"{mean / 60:.1f} ± {std / 60:.1f}min"


REPORT_COLUMNS = ("name", "variant", "way", "shot", "n_seeds", "mean", "ci95", "episode_ci95",
                  "wall_clock_mean_s", "wall_clock_std_s")


def _row(r: RunResult) -> dict:
    wc = np.asarray(r.wall_clock, dtype=np.float64)
    return {"name": r.name, "variant": r.variant, "way": r.way, "shot": r.shot, "n_seeds": len(r.seeds),
            "mean": r.mean, "ci95": r.ci95, "episode_ci95": r.episode_ci95,
            "wall_clock_mean_s": float(wc.mean()) if wc.size else 0.0,
            "wall_clock_std_s": float(wc.std(ddof=1)) if wc.size > 1 else 0.0}


def emit_report(results: Sequence[RunResult], fmt: str = "table") -> str:
    if not results:
        raise ValueError("no results to report")
    if fmt == "json":
        return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            # repr keeps full double precision
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in _row(r).items()})
        return buf.getvalue()
    if fmt == "table":
        header = ("Variant", "Way", "Shot", "Accuracy", "Wall-clock")
        rows = [(r.variant, str(r.way), str(r.shot), format_cell(r.mean, r.ci95), format_duration(r.wall_clock))
                for r in results]
        widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
        lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
                 "-+-".join("-" * w for w in widths)]
        lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}; expected table, csv or json")
