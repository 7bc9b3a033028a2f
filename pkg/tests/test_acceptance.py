"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The end-to-end criteria share one pretrained base per seed (cached for the session).
Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE, central_diff, rel_err, with_flat
from maskforget.config import RunConfig
from maskforget.diffusion import diffusion_loss_and_grad, draw_noised, make_schedule, noisify
from maskforget.eval import evaluate
from maskforget.masking import GradAccumulator, MaskScope, active_count_for, cosine_ratio, init_mask, update_mask
from maskforget.nn import Architecture, denoise_batch, init_params, save_checkpoint
from maskforget.pipeline import pretrain, relapse, resolve_tasks, run_unlearning
from maskforget.unlearning import (
    ForgetSet,
    LossWeights,
    SuperSet,
    TeacherSnapshot,
    align_loss,
    reg_loss,
    total_loss,
    unlearn_loss,
)

SEEDS = (1, 2, 3)
CFG = RunConfig()


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


class Cache:
    bases: dict = {}
    runs: dict = {}
    pretrain_seconds: dict = {}
    run_seconds: dict = {}


def base_model(seed: int):
    if seed not in Cache.bases:
        reg = CFG.load_registry()
        start = time.perf_counter()
        params, _ = pretrain(CFG.arch.build(reg), reg, CFG.schedule.build(), CFG.pretrain, seed)
        Cache.pretrain_seconds[seed] = time.perf_counter() - start
        Cache.bases[seed] = params
    return Cache.bases[seed]


def unlearning_run(seed: int, beta: float):
    key = (seed, beta)
    if key not in Cache.runs:
        reg = CFG.load_registry()
        cfg = CFG.with_unlearn(beta=beta)
        base = base_model(seed)
        start = time.perf_counter()
        Cache.runs[key] = run_unlearning(base, reg, CFG.schedule.build(), resolve_tasks(reg, cfg.unlearn.tasks),
                                         cfg.unlearn.params, seed, CFG.eval.n_eval)
        Cache.run_seconds[key] = time.perf_counter() - start
    return Cache.runs[key]


def test_criterion_1_cosine_ratio_identities():
    T = 800
    errs = [abs(cosine_ratio(0, 0.3, T) - 0.3), abs(cosine_ratio(T, 0.3, T)), abs(cosine_ratio(T // 2, 0.3, T) - 0.15),
            abs(cosine_ratio(0, 0.7, 97) - 0.7), abs(cosine_ratio(97, 0.7, 97))]
    ok = max(errs) <= 1e-12
    record(1, ok, f"max identity error {max(errs):.2e} (tol 1e-12)")
    assert ok


class TestCriterion2:
    violations = []
    trials = [0]

    @settings(max_examples=1000, deadline=None, database=None)
    @given(
        n=st.integers(1, 60),
        extra=st.integers(0, 20),
        sparsity=st.floats(0.01, 0.99),
        seed=st.integers(0, 2**32 - 1),
        taus=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8),
    )
    def check(self, n, extra, sparsity, seed, taus):
        self.trials[0] += 1
        k = active_count_for(sparsity, n)
        if k == 0:
            return
        rng = np.random.default_rng(seed)
        total = n + extra
        scope = MaskScope("all_params", np.sort(rng.choice(total, size=n, replace=False)), total)
        in_scope = np.zeros(total, dtype=bool)
        in_scope[scope.indices] = True
        mask = init_mask(GradAccumulator(rng.standard_normal(total), 1), sparsity, scope)
        for tau in taus:
            # coarse values force plenty of ties
            acc = GradAccumulator(np.round(rng.standard_normal(total), 1), 1)
            mask, _ = update_mask(mask, acc, tau)
            if mask.active_count != k or np.any(mask.active & ~in_scope):
                self.violations.append((n, extra, sparsity, seed, tau))

    def test_mask_conservation(self):
        self.check()
        ok = not self.violations and self.trials[0] >= 1000
        record(2, ok, f"{self.trials[0]} randomized update sequences, {len(self.violations)} violations")
        assert ok


def test_criterion_3_gradient_exactness():
    arch = Architecture(2, (4,), 5, 3, 4)
    sched = make_schedule(20, 1e-3, 0.2)
    rng = np.random.default_rng(2718)
    worst = {"diff": 0.0, "unlearn": 0.0, "align": 0.0, "reg": 0.0}
    for trial in range(20):
        params = init_params(arch, trial)
        params.flat[...] += 0.3 * rng.standard_normal(params.flat.size)
        teacher_p = params.copy()
        teacher_p.flat[...] += 0.1 * rng.standard_normal(params.flat.size)
        teacher = TeacherSnapshot(teacher_p, 0)
        x0 = rng.standard_normal((3, 2))
        cond = rng.integers(0, 5, size=3)
        c, c_s = rng.choice(5, size=2, replace=False)
        s = int(rng.integers(0, 2**31))

        def check(name, fn, oracle=None):
            _, g = fn(params, np.random.default_rng(s))
            f = oracle or (lambda flat: fn(with_flat(params, flat), np.random.default_rng(s))[0])
            worst[name] = max(worst[name], rel_err(g, central_diff(f, params.flat.copy())).max())

        check("diff", lambda p, r: diffusion_loss_and_grad(p, x0, cond, sched, r))
        check("align", lambda p, r: align_loss(p, x0, c_s, sched, r))
        check("reg", lambda p, r: reg_loss(p, teacher, x0, c_s, sched, r))
        # the superclass branch of the unlearning loss is a constant target
        nb = draw_noised(x0, sched, np.random.default_rng(s))
        target = denoise_batch(params, nb.x_t, nb.t, c_s, sched.T)

        def frozen(flat):
            return float(np.mean((denoise_batch(with_flat(params, flat), nb.x_t, nb.t, c, sched.T) - target) ** 2))

        check("unlearn", lambda p, r: unlearn_loss(p, x0, c, c_s, sched, r), frozen)
    ok = max(worst.values()) < 1e-5
    record(3, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " over 20 trials (tol 1e-5)")
    assert ok


def test_criterion_4_masked_update_isolation():
    state, _ = unlearning_run(SEEDS[0], 0.25)
    after = [r.params_before for r in state.history[1:]] + [state.params]
    changed = 0
    tasks = 0
    for result, params_after in zip(state.history, after):
        never = ~result.mask_tracker.ever_active
        changed += int(np.count_nonzero(params_after.flat[never] != result.params_before.flat[never]))
        tasks += len(result.trace) == CFG.unlearn.params.T_end
    ok = changed == 0 and tasks == len(state.history)
    record(4, ok, f"{changed} never-active positions changed across {tasks} full {CFG.unlearn.params.T_end}-step tasks")
    assert ok


def test_criterion_5_loss_linearity():
    reg = CFG.load_registry()
    arch = CFG.arch.build(reg)
    sched = CFG.schedule.build()
    rng = np.random.default_rng(5)
    params = init_params(arch, 0)
    teacher_p = params.copy()
    teacher_p.flat[...] += 0.05 * rng.standard_normal(arch.n_params)
    teacher = TeacherSnapshot(teacher_p, 0)
    fb = ForgetSet(rng.standard_normal((16, 2)), np.full(16, 0), np.full(16, 8))
    sb = SuperSet(rng.standard_normal((16, 2)), np.full(16, 8))
    w = LossWeights(0.25, 0.25)
    total, g, terms = total_loss(params, fb, sb, teacher, w, sched, np.random.default_rng(9))
    r_u, r_a, r_r = np.random.default_rng(9).spawn(3)
    lu, gu = unlearn_loss(params, fb.x0, fb.c, fb.c_s, sched, r_u)
    la, ga = align_loss(params, sb.x0, sb.c_s, sched, r_a)
    lr_, gr = reg_loss(params, teacher, sb.x0, sb.c_s, sched, r_r)
    err = max(np.max(np.abs(g - (gu + 0.25 * ga + 0.25 * gr))), abs(total - (lu + 0.25 * la + 0.25 * lr_)))
    ok = err <= 1e-12
    record(5, ok, f"max deviation from weighted sum {err:.2e} (tol 1e-12)")
    assert ok


def test_criterion_6_end_to_end():
    reg = CFG.load_registry()
    lines, ok = [], True
    for seed in SEEDS:
        base_report = evaluate(base_model(seed), reg, [], CFG.schedule.build(), CFG.eval.n_eval, seed=seed)
        base_acc = min(base_report.per_concept_acc.values())
        _, metrics = unlearning_run(seed, 0.25)
        last = metrics[-1].report
        forget, others = last.mean_forget_rate, last.others_acc
        align, rel = min(last.super_align.values()), relapse(metrics)
        seed_ok = base_acc >= 0.85 and forget <= 0.10 and others >= 0.85 and align >= 0.80 and rel <= 0.15
        ok &= seed_ok
        lines.append(f"seed {seed}: base {base_acc:.3f} forget {forget:.3f} others {others:.3f} "
                     f"align {align:.3f} relapse {rel:.3f} {'ok' if seed_ok else 'MISS'}")
    seconds = sum(Cache.pretrain_seconds.get(s, 0) + Cache.run_seconds[(s, 0.25)] for s in SEEDS)
    ok &= seconds <= 600
    record(6, ok, "; ".join(lines) + f"; {seconds:.0f}s")
    assert ok


def test_criterion_7_regularisation_ablation():
    with_reg = [relapse(unlearning_run(s, 0.25)[1]) for s in SEEDS]
    without = [relapse(unlearning_run(s, 0.0)[1]) for s in SEEDS]
    ok = np.mean(without) > np.mean(with_reg)
    record(7, ok, f"mean relapse beta=0 {np.mean(without):.3f} {without} vs beta=0.25 {np.mean(with_reg):.3f} {with_reg}")
    assert ok


@pytest.mark.parametrize("t_name", ["1", "T/2", "T"])
def test_criterion_8_forward_noising_moments(t_name):
    sched = CFG.schedule.build()
    t = {"1": 1, "T/2": sched.T // 2, "T": sched.T}[t_name]
    n = 100_000
    x0 = np.array([-5.2, 4.0])
    rng = np.random.default_rng(88 + t)
    xt = noisify(np.tile(x0, (n, 1)), np.full(n, t), rng.standard_normal((n, 2)), sched)
    ab = sched.alpha_bar[t - 1]
    var = 1.0 - ab
    z_mean = np.abs(xt.mean(0) - np.sqrt(ab) * x0) / np.sqrt(var / n)
    z_var = np.abs(xt.var(0, ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
    worst = max(z_mean.max(), z_var.max())
    ok = worst < 4.0
    previous = ACCEPTANCE.get(8, "")
    status = ok and "FAIL" not in previous
    detail = (previous.split("  ", 1)[1] + "; " if previous else "") + f"t={t}: max |z| {worst:.2f}"
    record(8, status, detail)
    assert ok


def test_criterion_9_determinism(tmp_path):
    seed = SEEDS[0]
    reg = CFG.load_registry()
    sched = CFG.schedule.build()
    fresh_base, _ = pretrain(CFG.arch.build(reg), reg, sched, CFG.pretrain, seed)
    state, _ = run_unlearning(fresh_base, reg, sched, resolve_tasks(reg, CFG.unlearn.tasks), CFG.unlearn.params,
                              seed, CFG.eval.n_eval)
    cached, _ = unlearning_run(seed, 0.25)
    a, b = tmp_path / "a.ck", tmp_path / "b.ck"
    save_checkpoint(state.params, a)
    save_checkpoint(cached.params, b)
    ok = a.read_bytes() == b.read_bytes() and fresh_base.digest() == base_model(seed).digest()
    record(9, ok, f"final checkpoint sha256 {cached.params.digest()[:16]} vs {state.params.digest()[:16]}")
    assert ok
