"""Concept-aware unlearning losses and the sequential multi-concept engine.

Per task the model is fine-tuned with

    total = unlearn + alpha * align + beta * reg

where ``unlearn`` pulls the forgotten condition's noise prediction toward the
superclass prediction (held constant), ``align`` is the denoising loss on
superclass data, and ``reg`` distils a frozen teacher's superclass predictions.
Updates go through the dynamic gradient mask.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .concepts import ConceptRegistry, classify
from .diffusion import NoiseSchedule, diffusion_loss_and_grad, draw_noised, sample
from .eval import EvalReport, evaluate
from .masking import (
    AdamState,
    DynamicMask,
    GradAccumulator,
    MaskSchedule,
    MaskScope,
    MaskTracker,
    accumulate,
    apply_masked_update,
    cosine_ratio,
    init_mask,
    reset,
    update_mask,
)
from .nn import DenoiserParams, denoise_batch, vjp_batch

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
REG_SCOPES = ("current", "previous", "current+previous")
TRACE_COLUMNS = ("step", "L_unlearn", "L_align", "L_reg", "L_total", "tau", "mask_changes")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ForgetTask:
    concept_id: int
    super_id: int

    @classmethod
    def for_concept(cls, reg: ConceptRegistry, concept_id: int) -> ForgetTask:
        return cls(concept_id, reg.superclass_of(concept_id))


@dataclass(frozen=True)
class ForgetSet:
    x0: np.ndarray
    c: np.ndarray
    c_s: np.ndarray

    def __len__(self):
        return len(self.x0)


@dataclass(frozen=True)
class SuperSet:
    x0: np.ndarray
    c_s: np.ndarray

    def __len__(self):
        return len(self.x0)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.25
    beta: float = 0.25

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)) or self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be finite and non-negative")


class TeacherSnapshot:
    """Frozen copy of the denoiser; the parameter buffer is made read-only."""

    def __init__(self, params: DenoiserParams, provenance: int):
        frozen = params.copy()
        frozen.flat.flags.writeable = False
        self._params = frozen
        self.provenance = provenance
        self.digest = frozen.digest()

    @property
    def params(self) -> DenoiserParams:
        return self._params


@dataclass(frozen=True)
class UnlearnConfig:
    alpha: float = 0.25
    beta: float = 0.25
    sparsity: float = 0.5
    # "masked": sparsity is the frozen fraction of the scope; "kept": it is the trainable fraction
    sparsity_semantics: str = "masked"
    scope: str = "condition_coupling"
    r_m: float = 0.3
    T_end: int = 800
    delta_T: int = 100
    warmup_steps: int = 50
    n_forget: int = 100
    n_super: int = 100
    batch: int = 64
    lr: float = 2e-3
    # superclass data drops samples the oracle assigns to any forgotten concept
    exclude_forgotten_from_super: bool = True
    # superclass data the teacher is distilled on: "current", "previous" or "current+previous"
    reg_scope: str = "previous"

    def __post_init__(self):
        self.weights
        self.schedule
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in (0, 1), got {self.sparsity}")
        if self.sparsity_semantics not in ("masked", "kept"):
            raise ValueError(f"unknown sparsity_semantics {self.sparsity_semantics!r}")
        if self.scope not in ("all_params", "condition_coupling"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.reg_scope not in REG_SCOPES:
            raise ValueError(f"unknown reg_scope {self.reg_scope!r}")
        if min(self.n_forget, self.n_super, self.batch) < 1:
            raise ValueError("n_forget, n_super and batch must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def schedule(self) -> MaskSchedule:
        return MaskSchedule(self.r_m, self.T_end, self.delta_T, self.warmup_steps)

    @property
    def masked_fraction(self) -> float:
        return self.sparsity if self.sparsity_semantics == "masked" else 1.0 - self.sparsity


def build_forget_set(params_base: DenoiserParams, task: ForgetTask, n: int, sched: NoiseSchedule,
                     rng: np.random.Generator) -> ForgetSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    x0 = sample(params_base, task.concept_id, sched, rng, n)
    return ForgetSet(x0, np.full(n, task.concept_id), np.full(n, task.super_id))


def build_super_set(params_base: DenoiserParams, task: ForgetTask, n: int, sched: NoiseSchedule,
                    rng: np.random.Generator, reg: ConceptRegistry | None = None,
                    exclude=(), max_rounds: int = 20) -> SuperSet:
    """Sample ``n`` rows under the superclass token.

    With ``reg`` and a non-empty ``exclude``, rows the oracle assigns to an
    excluded concept are rejected and resampled (up to ``max_rounds`` draws).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    exclude = np.asarray(sorted(exclude), dtype=np.int64)
    if reg is None or exclude.size == 0:
        return SuperSet(sample(params_base, task.super_id, sched, rng, n), np.full(n, task.super_id))
    kept = []
    total = 0
    for _ in range(max_rounds):
        x = sample(params_base, task.super_id, sched, rng, n)
        x = x[~np.isin(classify(reg, x), exclude)]
        kept.append(x)
        total += len(x)
        if total >= n:
            break
    else:
        raise RuntimeError(f"could not collect {n} superclass rows outside {exclude.tolist()}")
    x0 = np.concatenate(kept)[:n]
    return SuperSet(x0, np.full(n, task.super_id))


def unlearn_loss(params: DenoiserParams, x0, c, c_s, sched: NoiseSchedule,
                 rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """MSE between the concept-conditioned and superclass-conditioned predictions.

    The superclass prediction is a constant target: no gradient flows through it.
    """
    nb = draw_noised(x0, sched, rng)
    n = nb.x0.shape[0]
    c = np.broadcast_to(np.asarray(c), (n,))
    c_s = np.broadcast_to(np.asarray(c_s), (n,))
    target = denoise_batch(params, nb.x_t, nb.t, c_s, sched.T)
    pred = denoise_batch(params, nb.x_t, nb.t, c, sched.T)
    resid = pred - target
    loss = float(np.mean(resid ** 2))
    return loss, vjp_batch(params, nb.x_t, nb.t, c, 2.0 * resid / resid.size, sched.T)


def align_loss(params: DenoiserParams, x0, c_s, sched: NoiseSchedule,
               rng: np.random.Generator) -> tuple[float, np.ndarray]:
    return diffusion_loss_and_grad(params, x0, c_s, sched, rng)


def reg_loss(params: DenoiserParams, teacher: TeacherSnapshot, x0, c_s, sched: NoiseSchedule,
             rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Distillation MSE to the frozen teacher on identical (x_t, t, c_s) inputs."""
    if teacher.params.arch != params.arch:
        raise ValueError("teacher architecture differs from the student")
    nb = draw_noised(x0, sched, rng)
    c_s = np.broadcast_to(np.asarray(c_s), (nb.x0.shape[0],))
    target = denoise_batch(teacher.params, nb.x_t, nb.t, c_s, sched.T)
    pred = denoise_batch(params, nb.x_t, nb.t, c_s, sched.T)
    resid = pred - target
    loss = float(np.mean(resid ** 2))
    return loss, vjp_batch(params, nb.x_t, nb.t, c_s, 2.0 * resid / resid.size, sched.T)


@dataclass(frozen=True)
class LossTerms:
    unlearn: float
    align: float
    reg: float
    total: float


def total_loss(params: DenoiserParams, forget_batch: ForgetSet, super_batch: SuperSet,
               teacher: TeacherSnapshot, weights: LossWeights, sched: NoiseSchedule,
               rng: np.random.Generator) -> tuple[float, np.ndarray, LossTerms]:
    """Weighted sum of the three terms, each drawn from its own rng sub-stream."""
    r_u, r_a, r_r = rng.spawn(3)
    lu, gu = unlearn_loss(params, forget_batch.x0, forget_batch.c, forget_batch.c_s, sched, r_u)
    la, ga = align_loss(params, super_batch.x0, super_batch.c_s, sched, r_a)
    lr_, gr = reg_loss(params, teacher, super_batch.x0, super_batch.c_s, sched, r_r)
    total = lu + weights.alpha * la + weights.beta * lr_
    grad = gu + weights.alpha * ga + weights.beta * gr
    return total, grad, LossTerms(lu, la, lr_, total)


@dataclass
class TraceRow:
    step: int
    L_unlearn: float
    L_align: float
    L_reg: float
    L_total: float
    tau: float
    mask_changes: int


@dataclass
class TaskResult:
    task: ForgetTask
    trace: list[TraceRow]
    mask_tracker: MaskTracker | None
    params_before: DenoiserParams
    update_steps: list[int] = field(default_factory=list)


@dataclass
class TrainerState:
    params: DenoiserParams
    registry: ConceptRegistry
    sched: NoiseSchedule
    seed: int = 0
    teacher: TeacherSnapshot | None = None
    teachers: list[TeacherSnapshot] = field(default_factory=list)
    forgotten: list[int] = field(default_factory=list)
    history: list[TaskResult] = field(default_factory=list)
    super_sets: list[SuperSet] = field(default_factory=list)


def task_rng(seed: int, task_index: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x0F2E, task_index, purpose]))


def _minibatch(rows, size: int, rng: np.random.Generator):
    idx = rng.integers(0, len(rows), size=min(size, len(rows)))
    if isinstance(rows, ForgetSet):
        return ForgetSet(rows.x0[idx], rows.c[idx], rows.c_s[idx])
    return SuperSet(rows.x0[idx], rows.c_s[idx])


def _merge(sets: list[SuperSet]) -> SuperSet:
    return SuperSet(np.concatenate([s.x0 for s in sets]), np.concatenate([s.c_s for s in sets]))


def unlearn_concept(state: TrainerState, task: ForgetTask, cfg: UnlearnConfig) -> TrainerState:
    """Forget one concept: build data, warm up the mask, then masked fine-tuning."""
    reg, sched = state.registry, state.sched
    if reg.superclass_of(task.concept_id) != task.super_id:
        raise ValueError(f"{task.super_id} is not the superclass of {task.concept_id}")
    if state.teacher is None:
        state.teacher = TeacherSnapshot(state.params, provenance=0)
        state.teachers.append(state.teacher)
    k = len(state.history)
    before = state.params.copy()
    result = TaskResult(task, [], None, before)
    state.history.append(result)
    state.forgotten.append(task.concept_id)
    if cfg.T_end == 0:
        return state

    forget_set = build_forget_set(state.params, task, cfg.n_forget, sched, task_rng(state.seed, k, 0))
    exclude = state.forgotten if cfg.exclude_forgotten_from_super else ()
    super_set = build_super_set(state.params, task, cfg.n_super, sched, task_rng(state.seed, k, 1),
                                reg=reg, exclude=exclude)
    previous = list(state.super_sets)
    state.super_sets.append(super_set)
    if cfg.reg_scope == "current":
        reg_set = super_set
    elif cfg.reg_scope == "current+previous":
        reg_set = _merge(previous + [super_set])
    elif cfg.reg_scope == "previous":
        reg_set = _merge(previous) if previous else None
    else:
        raise ValueError(f"unknown reg_scope {cfg.reg_scope!r}")

    weights = cfg.weights
    batch_rng = task_rng(state.seed, k, 2)
    loss_rng = task_rng(state.seed, k, 3)
    params = state.params

    def step_loss():
        fb = _minibatch(forget_set, cfg.batch, batch_rng)
        sb = _minibatch(super_set, cfg.batch, batch_rng)
        if reg_set is super_set:
            return total_loss(params, fb, sb, state.teacher, weights, sched, loss_rng)
        r_u, r_a, r_r = loss_rng.spawn(3)
        lu, gu = unlearn_loss(params, fb.x0, fb.c, fb.c_s, sched, r_u)
        la, ga = align_loss(params, sb.x0, sb.c_s, sched, r_a)
        if reg_set is None:
            lr_, gr = 0.0, np.zeros_like(gu)
        else:
            rb = _minibatch(reg_set, cfg.batch, batch_rng)
            lr_, gr = reg_loss(params, state.teacher, rb.x0, rb.c_s, sched, r_r)
        total = lu + weights.alpha * la + weights.beta * lr_
        return total, gu + weights.alpha * ga + weights.beta * gr, LossTerms(lu, la, lr_, total)

    def guard(loss: float, step: int):
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"task {k} (concept {task.concept_id}) diverged at step {step}: loss={loss}")

    scope = MaskScope.for_arch(params.arch, cfg.scope)
    acc = GradAccumulator.zeros(params.arch.n_params)
    for w in range(cfg.warmup_steps):
        loss, grad, _ = step_loss()
        guard(loss, -w)
        acc = accumulate(acc, grad)
    mask: DynamicMask = init_mask(acc, cfg.masked_fraction, scope)
    acc = reset(acc)
    tracker = MaskTracker(mask)
    result.mask_tracker = tracker

    opt = AdamState.zeros(params.arch.n_params)
    for t in range(1, cfg.T_end + 1):
        loss, grad, terms = step_loss()
        guard(loss, t)
        acc = accumulate(acc, grad)
        flat, opt = apply_masked_update(params.flat, grad, mask, opt, cfg.lr)
        params.flat[...] = flat
        tau, changes = 0.0, 0
        if t % cfg.delta_T == 0:
            tau = cosine_ratio(t, cfg.r_m, cfg.T_end)
            mask, upd = update_mask(mask, acc, tau)
            acc = reset(acc)
            tracker.record(t, tau, mask, upd)
            result.update_steps.append(t)
            changes = len(upd.dropped) + len(upd.added)
        result.trace.append(TraceRow(t, terms.unlearn, terms.align, terms.reg, terms.total, tau, changes))
    log.info("task %d concept %d: final L_total %.4g", k, task.concept_id, result.trace[-1].L_total)
    return state


@dataclass
class MetricsRow:
    task_index: int
    concept_id: int
    report: EvalReport


def unlearn_sequence(state: TrainerState, tasks: list[ForgetTask], cfg: UnlearnConfig,
                     n_eval: int = 200) -> tuple[TrainerState, list[MetricsRow]]:
    """Forget ``tasks`` in order; the teacher for task k+1 is the model after task k.

    On divergence the exception carries the metrics gathered so far as ``.metrics``.
    """
    if not tasks:
        raise ValueError("task list must be non-empty")
    if len({t.concept_id for t in tasks}) != len(tasks):
        raise ValueError("tasks must target distinct concepts")
    metrics: list[MetricsRow] = []
    for k, task in enumerate(tasks):
        if k > 0:
            state.teacher = TeacherSnapshot(state.params, provenance=k)
            state.teachers.append(state.teacher)
        try:
            unlearn_concept(state, task, cfg)
        except DivergenceError as err:
            err.metrics = metrics
            err.state = state
            raise
        report = evaluate(state.params, state.registry, state.forgotten, state.sched, n_eval, seed=state.seed)
        metrics.append(MetricsRow(k, task.concept_id, report))
        log.info("after task %d: forget %s others %.3f align %s", k, report.per_concept_forget_rate,
                 report.others_acc, report.super_align)
    return state, metrics


def write_trace(rows: list[TraceRow], path, header_comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([r.step, repr(r.L_unlearn), repr(r.L_align), repr(r.L_reg), repr(r.L_total),
                        repr(r.tau), r.mask_changes])
