"""MAML++ and self-critique-and-adapt optimisation loops.

An episode is processed as follows. Starting from the meta initialisation,
``inner_steps`` SGD steps with learned per-tensor, per-step step sizes are
taken on the labelled support set. For the critic variants,
``critic_steps`` further steps then descend the critic's value on the
unlabelled target set. The outer loss is an importance-weighted sum of
target losses at each support step, plus the labelled target loss after
the critic steps. Its gradient updates the initialisation and step sizes
(Adam by default, optionally plain SGD) and the critic (plain SGD).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import BatchNormState, CriticSpec, ParamSet, average_stats, critic_forward, init_params
from .tasks import Episode

VARIANTS = ("maml_pp", "sca_pred", "sca_pred_params")
GAMMA_MODES = ("learned", "fixed")
OUTER_OPTIMIZERS = ("adam", "sgd")


def check_simplex(weights: Sequence[float], length: int, what: str, strict: bool = False) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (length,):
        raise ValueError(f"{what}: expected {length} weights, got {w.size}")
    if strict and np.any(w <= 0):
        raise ValueError(f"{what}: weights must be positive")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"{what}: weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{what}: weights must sum to 1 (got {w.sum():.12g})")
    return w


@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 5
    critic_steps: int = 1
    meta_batch_size: int = 2
    outer_lr: float = 1e-3
    critic_outer_lr: float = 1e-6
    lslr_init: float = 0.01
    critic_lslr_init: float = 0.01
    gamma_mode: str = "learned"
    importance_weights: Optional[Tuple[float, ...]] = None
    critic_weights: Optional[Tuple[float, ...]] = None
    anneal_epochs: int = 15
    first_order_epochs: int = 0
    multi_step_critic: bool = False
    variant: str = "maml_pp"
    bn_momentum: float = 0.99
    init_scheme: str = "fanin_uniform"
    critic_init_scheme: str = "fanin_uniform"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    outer_optimizer: str = "adam"

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.critic_steps < 0:
            raise ValueError("critic_steps must be >= 0")
        if self.meta_batch_size < 1:
            raise ValueError("meta_batch_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.outer_optimizer not in OUTER_OPTIMIZERS:
            raise ValueError(f"unknown outer_optimizer {self.outer_optimizer!r}; expected one of {OUTER_OPTIMIZERS}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.importance_weights is not None:
            check_simplex(self.importance_weights, self.inner_steps, "importance_weights", strict=True)
        if self.critic_weights is not None and self.num_critic_steps:
            check_simplex(self.critic_weights, self.num_critic_steps, "critic_weights", strict=True)

    @classmethod
    def for_shot(cls, shot: int, **kwargs) -> "MetaConfig":
        """Defaults with meta-batch size 2 for one-shot and 1 otherwise."""
        kwargs.setdefault("meta_batch_size", 2 if shot == 1 else 1)
        return cls(**kwargs)

    @property
    def uses_critic(self) -> bool:
        return self.variant != "maml_pp"

    @property
    def num_critic_steps(self) -> int:
        return self.critic_steps if self.uses_critic else 0

    @property
    def total_steps(self) -> int:
        return self.inner_steps + self.num_critic_steps

    def base_importance_weights(self) -> np.ndarray:
        if self.importance_weights is None:
            return np.full(self.inner_steps, 1.0 / self.inner_steps)
        return np.asarray(self.importance_weights, dtype=np.float64)

    def base_critic_weights(self) -> np.ndarray:
        n = self.num_critic_steps
        if n == 0:
            return np.zeros(0)
        if self.critic_weights is None:
            return np.full(n, 1.0 / n)
        return np.asarray(self.critic_weights, dtype=np.float64)


def anneal_importance_weights(v: Sequence[float], epoch: int, end_epoch: int) -> np.ndarray:
    """Move ``v`` linearly towards one-hot on the last step, reaching it at ``end_epoch``."""
    v = check_simplex(v, len(v), "importance weights")
    target = np.zeros_like(v)
    target[-1] = 1.0
    t = 1.0 if end_epoch <= 0 else min(max(epoch, 0) / end_epoch, 1.0)
    out = (1.0 - t) * v + t * target
    return out / out.sum()


def first_order_mode(cfg: MetaConfig, epoch: int) -> bool:
    return epoch < cfg.first_order_epochs


def init_lslr(theta: ParamSet, cfg: MetaConfig) -> ParamSet:
    """Step-size table: one vector of length ``total_steps`` per adapted tensor."""
    row = np.concatenate([np.full(cfg.inner_steps, cfg.lslr_init),
                          np.full(cfg.num_critic_steps, cfg.critic_lslr_init)])
    return ParamSet.from_arrays({n: row.copy() for n in theta.adapted_names})


# ---------------------------------------------------------------------------
# Inner loops
# ---------------------------------------------------------------------------

@dataclass
class InnerTrajectory:
    params: List[ParamSet]
    support_losses: List[float] = field(default_factory=list)
    critic_values: List[float] = field(default_factory=list)

    @property
    def num_support_steps(self) -> int:
        return len(self.support_losses)

    @property
    def num_critic_steps(self) -> int:
        return len(self.critic_values)

    @property
    def final(self) -> ParamSet:
        return self.params[-1]


def gradient_descent(theta: ParamSet, loss_fn: Callable[[ParamSet], Tensor], lslr: ParamSet,
                     steps: int, start_step: int = 0, create_graph: bool = True,
                     what: str = "loss") -> Tuple[List[ParamSet], List[float]]:
    """``steps`` updates of the adapted tensors; step size of tensor ``n`` at step ``s`` is ``lslr[n][s]``."""
    names = theta.adapted_names
    params, values = [theta], []
    for k in range(steps):
        current = params[-1]
        with ad.grad_mode(True):
            # untracked inputs (evaluation, finite-difference probes) become fresh leaves
            loose = {n: Tensor(current[n].data, requires_grad=True)
                     for n in names if not current[n].requires_grad}
            if loose:
                current = current.replace(loose)
            loss = loss_fn(current)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite {what} at inner step {start_step + k}")
            grads = ad.grad(loss, [current[n] for n in names], create_graph=create_graph)
        s = start_step + k
        updates = {n: ad.sub(current[n], ad.mul(ad.getitem(lslr[n], s), g)) for n, g in zip(names, grads)}
        params.append(current.replace(updates))
        values.append(value)
    return params, values


def support_loss(model, theta: ParamSet, x, y, bn_state, stats: Optional[dict] = None) -> Tensor:
    return ad.cross_entropy(model.forward(theta, x, bn_state, stats), y)


def inner_adapt(model, theta: ParamSet, x_support, y_support, lslr: ParamSet, steps: int,
                create_graph: bool = True, bn_state: Optional[BatchNormState] = None,
                stats: Optional[dict] = None) -> InnerTrajectory:
    """Support-set adaptation ``theta_{i+1} = theta_i - alpha_i * grad L(theta_i)``.

    ``stats``, if given, collects normalisation batch moments at ``theta_0``.
    """
    if steps < 1:
        raise ValueError("at least one support step is required")
    first = [True]

    def loss_fn(p):
        collect = stats if first[0] else None
        first[0] = False
        return support_loss(model, p, x_support, y_support, bn_state, collect)

    params, losses = gradient_descent(theta, loss_fn, lslr, steps, 0, create_graph, "support loss")
    return InnerTrajectory(params, losses, [])


def collect_features(model, theta: ParamSet, x_target, variant: str = "pred",
                     bn_state: Optional[BatchNormState] = None) -> Tensor:
    """Critic input row: flattened target softmax, optionally followed by the flattened parameters."""
    x_target = ad.as_tensor(x_target)
    if x_target.shape[0] == 0:
        raise ValueError("target set is empty")
    probs = ad.softmax(model.forward(theta, x_target, bn_state), axis=-1)
    feats = ad.reshape(probs, (1, -1))
    if variant in ("pred+params", "sca_pred_params"):
        feats = ad.concat([feats, theta.flatten()], axis=1)
    elif variant not in ("pred", "sca_pred"):
        raise ValueError(f"unknown feature variant {variant!r}")
    return feats


def critic_adapt(model, theta_n: ParamSet, x_target, W: ParamSet, lslr: ParamSet, steps: int,
                 create_graph: bool = True, bn_state: Optional[BatchNormState] = None,
                 variant: str = "pred", start_step: Optional[int] = None,
                 critic_spec: Optional[CriticSpec] = None) -> InnerTrajectory:
    """Label-free adaptation on the target inputs by descending the critic value.

    ``start_step`` indexes the step-size table (defaults to the number of
    support steps, i.e. table length minus ``steps``).
    """
    if steps < 0:
        raise ValueError("critic steps must be >= 0")
    if start_step is None:
        start_step = len(next(iter(lslr.values())).data) - steps if len(lslr) else 0

    def loss_fn(p):
        return critic_forward(W, collect_features(model, p, x_target, variant, bn_state), critic_spec)

    params, values = gradient_descent(theta_n, loss_fn, lslr, steps, start_step, create_graph, "critic value")
    return InnerTrajectory(params, [], values)


# ---------------------------------------------------------------------------
# Outer losses
# ---------------------------------------------------------------------------

def target_loss(model, theta: ParamSet, x_target, y_target, bn_state=None) -> Tuple[Tensor, float]:
    logits = model.forward(theta, x_target, bn_state)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(y_target)))
    return ad.cross_entropy(logits, y_target), acc


def outer_loss_maml_pp(model, trajectory: InnerTrajectory, x_target, y_target,
                       v: Sequence[float], bn_state=None) -> Tensor:
    """``sum_i v_i * L_target(theta_i)`` over the support steps ``i = 1..N``."""
    n = trajectory.num_support_steps
    v = check_simplex(v, n, "importance weights")
    total = None
    for i in range(1, n + 1):
        if v[i - 1] == 0.0:
            continue
        term = ad.mul(target_loss(model, trajectory.params[i], x_target, y_target, bn_state)[0], v[i - 1])
        total = term if total is None else ad.add(total, term)
    return total


def outer_loss_sca(model, trajectory: InnerTrajectory, x_target, y_target, v: Sequence[float],
                   w: Sequence[float], multi_step: bool = False, bn_state=None) -> Tensor:
    """MAML++ multi-step loss plus the labelled target loss after critic adaptation.

    Without ``multi_step`` only the final critic-adapted parameters add a
    term; with it every critic step ``j`` adds ``w_j * L_target(theta_{N+j})``.
    No critic steps means no extra term.
    """
    total = outer_loss_maml_pp(model, trajectory, x_target, y_target, v, bn_state)
    n, i_steps = trajectory.num_support_steps, trajectory.num_critic_steps
    if len(trajectory.params) != n + i_steps + 1:
        raise ValueError("trajectory length does not match its step counts")
    if i_steps == 0:
        return total
    if multi_step:
        w = check_simplex(w, i_steps, "critic importance weights")
        for j in range(1, i_steps + 1):
            term = ad.mul(target_loss(model, trajectory.params[n + j], x_target, y_target, bn_state)[0], w[j - 1])
            total = ad.add(total, term)
        return total
    final = target_loss(model, trajectory.params[n + i_steps], x_target, y_target, bn_state)[0]
    return ad.add(total, final)


# ---------------------------------------------------------------------------
# Meta state and update
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls({n: np.zeros(p.shape) for n, p in params.items()},
                   {n: np.zeros(p.shape) for n, p in params.items()}, 0)


def adam_update(params: ParamSet, grads: Dict[str, np.ndarray], state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[ParamSet, AdamState]:
    t = state.t + 1
    m, v, out = {}, {}, {}
    for n, p in params.items():
        g = grads[n]
        m[n] = beta1 * state.m[n] + (1 - beta1) * g
        v[n] = beta2 * state.v[n] + (1 - beta2) * g * g
        m_hat = m[n] / (1 - beta1 ** t)
        v_hat = v[n] / (1 - beta2 ** t)
        out[n] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ParamSet.from_arrays(out, params.partition), AdamState(m, v, t)


def sgd_update(params: ParamSet, grads: Dict[str, np.ndarray], lr: float) -> ParamSet:
    return ParamSet.from_arrays({n: p.data - lr * grads[n] for n, p in params.items()}, params.partition)


@dataclass
class MetaState:
    """Everything the outer loop updates."""

    model: object
    theta: ParamSet
    lslr: ParamSet
    bn_state: BatchNormState
    theta_opt: AdamState
    lslr_opt: AdamState
    critic: Optional[ParamSet] = None
    critic_spec: Optional[CriticSpec] = None
    step: int = 0


def critic_input_length(model, cfg: MetaConfig, way: int, query: int) -> int:
    length = way * query * model.num_classes
    if cfg.variant == "sca_pred_params":
        length += model.num_params()
    return length


def init_meta_state(model, cfg: MetaConfig, seed: int, way: int, query: int,
                    with_critic: Optional[bool] = None) -> MetaState:
    theta = init_params(model, cfg.init_scheme, seed)
    lslr = init_lslr(theta, cfg)
    critic = spec = None
    if with_critic if with_critic is not None else cfg.uses_critic:
        spec = CriticSpec(critic_input_length(model, cfg, way, query))
        critic = init_params(spec, cfg.critic_init_scheme, seed)
    return MetaState(model, theta, lslr, model.initial_bn_state(cfg.bn_momentum),
                     AdamState.zeros(theta), AdamState.zeros(lslr), critic, spec)


def episode_trajectory(model, theta: ParamSet, W: Optional[ParamSet], lslr: ParamSet, episode: Episode,
                       cfg: MetaConfig, bn_state, create_graph: bool, critic_create_graph: bool,
                       critic_spec: Optional[CriticSpec] = None,
                       stats: Optional[dict] = None) -> InnerTrajectory:
    traj = inner_adapt(model, theta, episode.x_support, episode.y_support, lslr, cfg.inner_steps,
                       create_graph, bn_state, stats)
    if cfg.num_critic_steps:
        if W is None:
            raise ValueError(f"variant {cfg.variant!r} needs critic parameters")
        tail = critic_adapt(model, traj.final, episode.x_target, W, lslr, cfg.num_critic_steps,
                            critic_create_graph, bn_state, cfg.variant, cfg.inner_steps, critic_spec)
        traj = InnerTrajectory(traj.params + tail.params[1:], traj.support_losses, tail.critic_values)
    return traj


def episode_outer_loss(model, theta: ParamSet, W: Optional[ParamSet], lslr: ParamSet, episode: Episode,
                       cfg: MetaConfig, bn_state=None, epoch: int = 0,
                       critic_spec: Optional[CriticSpec] = None,
                       stats: Optional[dict] = None) -> Tuple[Tensor, float, InnerTrajectory]:
    """Outer loss of one episode together with target accuracy at the final fast weights.

    In first-order epochs the support-step gradients are detached. The
    critic steps always keep their graph, since the critic only learns
    through them.
    """
    first_order = first_order_mode(cfg, epoch)
    traj = episode_trajectory(model, theta, W, lslr, episode, cfg, bn_state,
                              not first_order, True, critic_spec, stats)
    v = anneal_importance_weights(cfg.base_importance_weights(), epoch, cfg.anneal_epochs)
    if cfg.uses_critic:
        loss = outer_loss_sca(model, traj, episode.x_target, episode.y_target, v,
                              cfg.base_critic_weights(), cfg.multi_step_critic, bn_state)
    else:
        loss = outer_loss_maml_pp(model, traj, episode.x_target, episode.y_target, v, bn_state)
    with ad.no_grad():
        _, acc = target_loss(model, traj.final, episode.x_target, episode.y_target, bn_state)
    return loss, acc, traj


@dataclass
class StepMetrics:
    outer_loss: float
    episode_losses: List[float]
    episode_accuracies: List[float]
    grad_norm_theta: float
    grad_norm_lslr: float
    grad_norm_critic: float


def _norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def outer_gradients(state: MetaState, batch: Sequence[Episode], cfg: MetaConfig, epoch: int = 0):
    """Summed outer loss over ``batch`` and its gradients for theta, lslr and the critic."""
    theta = state.theta.as_leaves()
    lslr = state.lslr.as_leaves()
    W = state.critic.as_leaves() if (state.critic is not None and cfg.uses_critic) else None
    total, losses, accs, collected = None, [], [], []
    for b, episode in enumerate(batch):
        stats: dict = {}
        loss, acc, _ = episode_outer_loss(state.model, theta, W, lslr, episode, cfg, state.bn_state,
                                          epoch, state.critic_spec, stats)
        if not math.isfinite(float(loss.data)):
            raise FloatingPointError(f"non-finite outer loss for episode {b} of the meta-batch")
        losses.append(float(loss.data))
        accs.append(acc)
        collected.append(stats)
        total = loss if total is None else ad.add(total, loss)
    groups = [("theta", theta), ("lslr", lslr)] + ([("critic", W)] if W is not None else [])
    flat = [(g, n, p[n]) for g, p in groups for n in p.names]
    grads = ad.grad(total, [t for _, _, t in flat])
    out: Dict[str, Dict[str, np.ndarray]] = {g: {} for g, _ in groups}
    for (g, n, _), gr in zip(flat, grads):
        out[g][n] = gr.data
    if "critic" not in out and state.critic is not None:
        out["critic"] = {n: np.zeros(t.shape) for n, t in state.critic.items()}
    return total, out, losses, accs, collected


def meta_step(state: MetaState, batch: Sequence[Episode], cfg: MetaConfig,
              epoch: int = 0) -> Tuple[MetaState, StepMetrics]:
    """One outer update from a meta-batch of ``cfg.meta_batch_size`` episodes."""
    if len(batch) != cfg.meta_batch_size:
        raise ValueError(f"meta-batch has {len(batch)} episodes, config expects {cfg.meta_batch_size}")
    total, grads, losses, accs, collected = outer_gradients(state, batch, cfg, epoch)

    lslr_grads = grads["lslr"]
    if cfg.gamma_mode == "fixed" and cfg.num_critic_steps:
        lslr_grads = {n: np.concatenate([g[: cfg.inner_steps], np.zeros(cfg.num_critic_steps)])
                      for n, g in lslr_grads.items()}
    if cfg.outer_optimizer == "adam":
        adam = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
        theta, theta_opt = adam_update(state.theta, grads["theta"], state.theta_opt, cfg.outer_lr, **adam)
        lslr, lslr_opt = adam_update(state.lslr, lslr_grads, state.lslr_opt, cfg.outer_lr, **adam)
    else:
        theta, theta_opt = sgd_update(state.theta, grads["theta"], cfg.outer_lr), state.theta_opt
        lslr, lslr_opt = sgd_update(state.lslr, lslr_grads, cfg.outer_lr), state.lslr_opt
    for n, t in lslr.items():
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"step size table entry {n!r} became non-finite")
    critic = state.critic
    if critic is not None and cfg.uses_critic:
        critic = sgd_update(critic, grads["critic"], cfg.critic_outer_lr)
    bn_state = state.bn_state.updated(average_stats(collected))
    new_state = replace(state, theta=theta, lslr=lslr, critic=critic, bn_state=bn_state,
                        theta_opt=theta_opt, lslr_opt=lslr_opt, step=state.step + 1)
    metrics = StepMetrics(float(total.data), losses, accs, _norm(grads["theta"]), _norm(grads["lslr"]),
                          _norm(grads["critic"]) if "critic" in grads else 0.0)
    return new_state, metrics


def evaluate_episode(state: MetaState, episode: Episode, cfg: MetaConfig) -> Tuple[float, float]:
    """Adapt to ``episode`` (support steps, then critic steps) and score the target set."""
    theta = state.theta.as_leaves()
    W = state.critic.detached() if state.critic is not None else None
    lslr = state.lslr.detached()
    traj = episode_trajectory(state.model, theta, W, lslr, episode, cfg, state.bn_state,
                              False, False, state.critic_spec)
    with ad.no_grad():
        loss, acc = target_loss(state.model, traj.final, episode.x_target, episode.y_target, state.bn_state)
    return acc, float(loss.data)


def predict_proba(state: MetaState, x_support, y_support, x_target, cfg: MetaConfig) -> np.ndarray:
    """Class probabilities for ``x_target`` after adapting on the support set and, if enabled, the critic."""
    episode = Episode("predict", np.asarray(x_support, dtype=np.float64), np.asarray(y_support),
                      np.asarray(x_target, dtype=np.float64), np.zeros(len(x_target), dtype=np.int64),
                      0, 0, 0, ())
    theta = state.theta.as_leaves()
    W = state.critic.detached() if state.critic is not None else None
    traj = episode_trajectory(state.model, theta, W, state.lslr.detached(), episode, cfg, state.bn_state,
                              False, False, state.critic_spec)
    with ad.no_grad():
        return ad.softmax(state.model.forward(traj.final, episode.x_target, state.bn_state)).data
