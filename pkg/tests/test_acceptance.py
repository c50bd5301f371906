"""Acceptance criteria 1-10; each test prints one ``PASS``/``FAIL criterion N: ...`` line.

Run alone with ``python3 tests/test_acceptance.py`` (or ``pytest tests/test_acceptance.py -s``).
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from metacritic.gradcheck import OUTER_TOL, PRIMITIVE_TOL, run_suite, tiny_sca_problem
from metacritic.harness import ci95, format_cell, load_config, run_experiment, train_with_early_stopping
from metacritic.metalearn import (MetaConfig, critic_adapt, episode_outer_loss, episode_trajectory,
                                  init_lslr, init_meta_state, inner_adapt, meta_step,
                                  outer_loss_maml_pp, outer_loss_sca, target_loss)
from metacritic.networks import (BatchNormState, CriticSpec, HighEndSpec, LowEndSpec, MLPSpec,
                                 critic_features, estimate_critic_memory, format_bytes, init_params,
                                 lowend_forward, pad_for_layer)
from metacritic.autodiff import Tensor
from metacritic.tasks import Episode, GaussianBlobs, PatternGlyphs

BENCHMARK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_benchmark.cfg"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
        assert ok, detail
    return emit


def test_criterion_01_gradcheck_suite(verdict):
    start = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    prims = [r for r in results if r.tolerance == PRIMITIVE_TOL]
    outer = [r for r in results if r.tolerance == OUTER_TOL]
    model = tiny_sca_problem(0, "sca_pred")[0]
    worst_p = max(r.max_rel_error for r in prims)
    worst_o = max(r.max_rel_error for r in outer)
    ok = (all(r.passed for r in results) and worst_p <= 1e-6 and worst_o <= 1e-4 and elapsed <= 120
          and model.num_params() <= 200 and len(prims) >= 20 and outer)
    verdict(1, ok, f"{len(prims)} primitives max rel err {worst_p:.2e} (<= 1e-6); "
                   f"{len(outer)} outer-loss checks (theta, W, LSLR) max rel err {worst_o:.2e} (<= 1e-4); "
                   f"base net {model.num_params()} params; {elapsed:.1f}s (<= 120s)")


def _state(variant, seed):
    model = MLPSpec(hidden=(8,))
    cfg = MetaConfig(inner_steps=2, critic_steps=0, variant=variant, lslr_init=0.1)
    return cfg, init_meta_state(model, cfg, seed, way=5, query=3, with_critic=True)


def test_criterion_02_reduction_equivalence(verdict):
    worst = 0.0
    for seed in range(3):
        cfg_m, a = _state("maml_pp", seed)
        cfg_s, b = _state("sca_pred", seed)
        fam = GaussianBlobs(seed=seed, noise=0.5)
        for step in range(5):
            batch = [fam.sample_episode("train", 10 * step + j, 5, 1, 3) for j in range(cfg_m.meta_batch_size)]
            a, _ = meta_step(a, batch, cfg_m)
            b, _ = meta_step(b, batch, cfg_s)
            worst = max(worst, max(float(np.max(np.abs(a.theta[n].data - b.theta[n].data))) for n in a.theta))
    verdict(2, worst <= 1e-12, f"sca_pred (I=0) vs maml_pp theta over 5 meta-steps x 3 seeds: "
                               f"max |diff| {worst:.1e} (<= 1e-12)")


def test_criterion_03_critic_shape_laws(verdict):
    problems = []
    for length in (17, 64, 257):
        spec = CriticSpec(length)
        W = init_params(spec, "fanin_uniform", 0)
        shapes = []
        head = critic_features(W, Tensor(np.ones((1, length))), spec, shapes)
        for i, (inp, out) in enumerate(shapes[:-1]):
            if inp != (1, 1 + 8 * i, length) or out[-1] != length:
                problems.append(f"L={length} layer {i}: {inp} -> {out}")
        if head.shape != (1, 41 * length) or spec.fc_in_features != 41 * length:
            problems.append(f"L={length}: fc input {head.shape}")
    table = [pad_for_layer(i) for i in range(5)]
    if table != [(0, 1), (1, 1), (2, 2), (4, 4), (8, 8)]:
        problems.append(f"padding table {table}")
    verdict(3, not problems, "; ".join(problems) or
            f"L in (17, 64, 257): length preserved, inputs 1+8i, fc input 41L; padding {table}")


def test_criterion_04_memory_estimator(verdict):
    n = estimate_critic_memory(70000, 4)
    rel = abs(n - 32e12) / 32e12
    quadratic = all(estimate_critic_memory(2 * p, 4) == 4 * estimate_critic_memory(p, 4)
                    for p in (1, 7, 1000, 70000, 123457))
    verdict(4, rel <= 0.05 and quadratic,
            f"estimate_critic_memory(70000, 4) = {format_bytes(n)} ({rel:.1%} from 32 TB); f(2p) = 4 f(p): {quadratic}")


def test_criterion_05_multi_step_loss(verdict):
    model = MLPSpec(hidden=(8,))
    ep = GaussianBlobs(seed=0, noise=0.5).sample_episode("train", 0, 5, 1, 3)
    theta = init_params(model, "fanin_uniform", 0)
    cfg = MetaConfig(inner_steps=3, variant="maml_pp")
    traj = inner_adapt(model, theta, ep.x_support, ep.y_support, init_lslr(theta, cfg), 3)
    one_hot = float(outer_loss_maml_pp(model, traj, ep.x_target, ep.y_target, [0, 0, 1]).data)
    final = float(target_loss(model, traj.final, ep.x_target, ep.y_target)[0].data)

    m, _, th, W, _, ep2, bn, spec = tiny_sca_problem(0)
    cfg2 = MetaConfig(inner_steps=2, critic_steps=1, variant="sca_pred", meta_batch_size=1)
    traj2 = episode_trajectory(m, th, W, init_lslr(th, cfg2), ep2, cfg2, bn, False, False, spec)
    single = float(outer_loss_sca(m, traj2, ep2.x_target, ep2.y_target, [0.4, 0.6], [1.0], multi_step=False).data)
    multi = float(outer_loss_sca(m, traj2, ep2.x_target, ep2.y_target, [0.4, 0.6], [1.0], multi_step=True).data)
    verdict(5, one_hot == final and single == multi,
            f"one-hot v: {one_hot!r} vs final-step {final!r}; I=1 multi-step {multi!r} vs single {single!r}")


def test_criterion_06_label_hygiene(verdict):
    model, cfg, theta, W, lslr, ep, bn, spec = tiny_sca_problem(2)
    rng = np.random.default_rng(0)
    identical, loss_moves = True, False
    base = episode_trajectory(model, theta, W, lslr, ep, cfg, bn, False, False, spec)
    base_loss = float(episode_outer_loss(model, theta, W, lslr, ep, cfg, bn, critic_spec=spec)[0].data)
    for _ in range(5):
        perm = rng.permutation(ep.y_target)
        shuffled = Episode(ep.task_id, ep.x_support, ep.y_support, ep.x_target, perm,
                           ep.way, ep.shot, ep.query, ep.classes)
        other = episode_trajectory(model, theta, W, lslr, shuffled, cfg, bn, False, False, spec)
        identical &= all(a.equal(b) for a, b in zip(base.params, other.params))
        loss = float(episode_outer_loss(model, theta, W, lslr, shuffled, cfg, bn, critic_spec=spec)[0].data)
        loss_moves |= not np.array_equal(perm, ep.y_target) and loss != base_loss
    verdict(6, identical and loss_moves,
            f"fast weights bit-identical under 5 target-label permutations: {identical}; "
            f"outer loss responds to target labels: {loss_moves}")


def test_criterion_07_batch_size_one_normalisation(verdict):
    arch = LowEndSpec()
    theta = init_params(arch, "fanin_uniform", 3)
    rng = np.random.default_rng(0)
    bn = BatchNormState({k: (rng.standard_normal(c), rng.random(c) + 0.5) for k, c in arch.bn_channels().items()})
    x = np.random.default_rng(1).standard_normal((7, 1, 14, 14))
    batch = lowend_forward(theta, x, bn, arch).data
    worst = max(float(np.max(np.abs(lowend_forward(theta, x[i:i + 1], bn, arch).data[0] - batch[i])))
                for i in range(7))
    verdict(7, worst <= 1e-12, f"low-end logits alone vs in a batch of 7: max |diff| {worst:.1e} (<= 1e-12)")


def test_criterion_08_highend_partial_adaptation(verdict):
    spec = HighEndSpec(in_channels=1, image_size=6, growth_rate=4)
    theta = init_params(spec, "xavier_except_last", 0)
    last = f"stage{spec.num_dense_stages - 1}.unit{spec.dense_block_units_per_stage - 1}."
    expected = {n for n in theta.names if n.startswith(last) or n.startswith("head.")}
    partition_ok = set(theta.adapted_names) == expected
    ep = PatternGlyphs(seed=0, size=6).sample_episode("train", 0, 5, 1, 2)
    cfg = MetaConfig(inner_steps=3, critic_steps=2, variant="sca_pred", meta_batch_size=1, lslr_init=0.1,
                     critic_lslr_init=0.1)
    lslr = init_lslr(theta, cfg)
    critic_spec = CriticSpec(ep.x_target.shape[0] * ep.way)
    W = init_params(critic_spec, "fanin_uniform", 0)
    bn = spec.initial_bn_state()
    support = inner_adapt(spec, theta, ep.x_support, ep.y_support, lslr, 3, create_graph=False, bn_state=bn)
    critic = critic_adapt(spec, support.final, ep.x_target, W, lslr, 2, create_graph=False, bn_state=bn,
                          critic_spec=critic_spec)
    states = support.params + critic.params[1:]
    shared_fixed = all(np.array_equal(p[n].data, theta[n].data) for p in states for n in theta.shared_names)
    moved = {n for n in theta.names if not np.array_equal(critic.final[n].data, theta[n].data)}
    verdict(8, partition_ok and shared_fixed and moved <= expected and bool(moved),
            f"adapted partition = last dense unit + head ({len(expected)} tensors): {partition_ok}; "
            f"{len(theta.shared_names)} shared tensors unchanged over {len(states) - 1} inner steps: {shared_fixed}")


@pytest.mark.slow
def test_criterion_09_desk_benchmark(verdict, tmp_path):
    start = time.perf_counter()
    runs = {}
    for variant in ("maml_pp", "sca_pred"):
        cfg = load_config(BENCHMARK_CONFIG, {"meta.variant": variant, "experiment.name": f"desk_{variant}",
                                             "experiment.out_dir": str(tmp_path)}, env={})
        runs[variant] = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    maml, sca = runs["maml_pp"], runs["sca_pred"]
    wins = sum(s >= m for s, m in zip(sca.accuracies, maml.accuracies))
    norm = sca.min_critic_grad_norm
    ok = elapsed <= 900 and maml.mean > 0.6 and wins >= 2 and norm is not None and norm > 0
    verdict(9, ok, f"maml_pp {format_cell(maml.mean, maml.ci95)}, sca_pred {format_cell(sca.mean, sca.ci95)}; "
                   f"sca_pred >= maml_pp in {wins}/3 seeds; min critic grad norm {norm:.3g}; "
                   f"{elapsed:.0f}s (<= 900s)")


def test_criterion_10_statistics(verdict):
    ci = ci95([0, 1])
    cell = format_cell(0.5538, 0.0039)
    out = train_with_early_stopping(lambda e: None, lambda e: 0.42, max_epochs=100, patience=10)
    staged = [0.2, 0.3, 0.5] + [0.5] * 30
    out2 = train_with_early_stopping(lambda e: None, lambda e: staged[e - 1], max_epochs=len(staged), patience=10)
    ok = ci == 0.98 and cell == "55.38 ± 0.39%" and out.epochs_run == out.best_epoch + 10 == 11 \
        and out2.epochs_run == out2.best_epoch + 10 == 13
    verdict(10, ok, f"ci95([0, 1]) = {ci!r}; cell {cell!r}; frozen validation stops at epoch {out.epochs_run} "
                    f"(best {out.best_epoch} + 10); staged fixture stops at {out2.epochs_run} (best {out2.best_epoch} + 10)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
