"""Dynamic gradient mask: accumulate gradients, pick the most influential
positions, periodically swap low-|A| active positions for high-|A| inactive
ones under a cosine-decayed ratio, and apply Adam only where the mask is on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Architecture, condition_coupling_indices

SCOPE_VARIANTS = ("all_params", "condition_coupling")


@dataclass(frozen=True)
class MaskScope:
    variant: str
    indices: np.ndarray
    n_params: int

    @classmethod
    def for_arch(cls, arch: Architecture, variant: str = "condition_coupling") -> MaskScope:
        if variant == "all_params":
            idx = np.arange(arch.n_params)
        elif variant == "condition_coupling":
            idx = np.sort(condition_coupling_indices(arch))
        else:
            raise ValueError(f"unknown mask scope {variant!r}; expected one of {SCOPE_VARIANTS}")
        return cls(variant, idx, arch.n_params)

    def __len__(self):
        return len(self.indices)


@dataclass
class DynamicMask:
    active: np.ndarray  # bool, shape (N,)
    sparsity: float
    scope: MaskScope

    @property
    def active_count(self) -> int:
        return int(self.active.sum())

    def as_float(self) -> np.ndarray:
        return self.active.astype(np.float64)


@dataclass
class GradAccumulator:
    A: np.ndarray
    steps_accumulated: int = 0

    @classmethod
    def zeros(cls, n: int) -> GradAccumulator:
        return cls(np.zeros(n))


@dataclass(frozen=True)
class MaskSchedule:
    r_m: float = 0.3
    T_end: int = 800
    delta_T: int = 100
    warmup_steps: int = 50

    def __post_init__(self):
        if not 0.0 < self.r_m <= 1.0:
            raise ValueError("r_m must lie in (0, 1]")
        if self.delta_T < 1 or self.warmup_steps < 1 or self.T_end < 0:
            raise ValueError("delta_T and warmup_steps must be >= 1, T_end >= 0")


def accumulate(acc: GradAccumulator, g) -> GradAccumulator:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != acc.A.shape:
        raise ValueError(f"gradient length {g.shape} != accumulator length {acc.A.shape}")
    return GradAccumulator(acc.A + g, acc.steps_accumulated + 1)


def reset(acc: GradAccumulator) -> GradAccumulator:
    return GradAccumulator.zeros(acc.A.size)


def active_count_for(sparsity: float, scope_size: int) -> int:
    return int(math.floor((1.0 - sparsity) * scope_size + 0.5))


def _top_k(positions: np.ndarray, score: np.ndarray, k: int, largest: bool) -> np.ndarray:
    """k positions with largest (or smallest) score; ties resolved toward the lowest position."""
    order = np.lexsort((positions, -score if largest else score))
    return positions[order[:k]]


def init_mask(acc: GradAccumulator, s: float, scope: MaskScope) -> DynamicMask:
    if acc.steps_accumulated < 1:
        raise ValueError("mask initialisation needs at least one accumulated gradient")
    if not 0.0 < s < 1.0:
        raise ValueError("sparsity must lie in (0, 1)")
    k = active_count_for(s, len(scope))
    if k == 0:
        raise ValueError(f"sparsity {s} leaves no active positions in a scope of {len(scope)}")
    chosen = _top_k(scope.indices, np.abs(acc.A[scope.indices]), k, largest=True)
    active = np.zeros(scope.n_params, dtype=bool)
    active[chosen] = True
    return DynamicMask(active, s, scope)


def cosine_ratio(t: int, r_m: float, T_end: int) -> float:
    if T_end < 1 or not 0 <= t <= T_end:
        raise ValueError(f"need 0 <= t <= T_end and T_end >= 1, got t={t}, T_end={T_end}")
    return r_m / 2.0 * (1.0 + math.cos(t * math.pi / T_end))


@dataclass(frozen=True)
class MaskUpdate:
    dropped: np.ndarray
    added: np.ndarray


def update_mask(mask: DynamicMask, acc: GradAccumulator, tau: float) -> tuple[DynamicMask, MaskUpdate]:
    """Swap the ``floor(tau * active_count)`` weakest active positions for the strongest inactive ones."""
    if acc.steps_accumulated < 1:
        raise ValueError("mask update needs at least one accumulated gradient")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    empty = np.array([], dtype=np.int64)
    in_scope = mask.scope.indices
    on = in_scope[mask.active[in_scope]]
    off = in_scope[~mask.active[in_scope]]
    m = min(int(math.floor(tau * len(on))), len(off))
    if m == 0:
        return mask, MaskUpdate(empty, empty)
    mag = np.abs(acc.A)
    dropped = _top_k(on, mag[on], m, largest=False)
    added = _top_k(off, mag[off], m, largest=True)
    active = mask.active.copy()
    active[dropped] = False
    active[added] = True
    return DynamicMask(active, mask.sparsity, mask.scope), MaskUpdate(np.sort(dropped), np.sort(added))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), **kw)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, g: np.ndarray, opt: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    """Plain Adam update on every coordinate."""
    return apply_masked_update(params, g, None, opt, lr)


def apply_masked_update(params: np.ndarray, g, mask: DynamicMask | None, opt: AdamState,
                        lr: float) -> tuple[np.ndarray, AdamState]:
    """Adam step on the masked gradient; masked-out positions keep params and moments untouched.

    ``mask=None`` means every position is active. Returns new arrays; inputs are not modified.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != params.shape or opt.m.shape != params.shape:
        raise ValueError("parameter, gradient and optimizer lengths must match")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient; update aborted")
    idx = np.flatnonzero(mask.active) if mask is not None else slice(None)
    out = opt.copy()
    out.step += 1
    gi = g[idx]
    out.m[idx] = opt.beta1 * opt.m[idx] + (1.0 - opt.beta1) * gi
    out.v[idx] = opt.beta2 * opt.v[idx] + (1.0 - opt.beta2) * gi * gi
    m_hat = out.m[idx] / (1.0 - opt.beta1 ** out.step)
    v_hat = out.v[idx] / (1.0 - opt.beta2 ** out.step)
    new = params.copy()
    new[idx] = params[idx] - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return new, out


@dataclass
class MaskStatsRow:
    step: int
    tau: float
    dropped: int
    added: int
    active_count: int
    overlap_with_initial_mask: float


@dataclass
class MaskTracker:
    """Records mask events relative to the mask produced at warmup."""

    initial: DynamicMask
    rows: list[MaskStatsRow] = field(default_factory=list)
    ever_active: np.ndarray = None

    def __post_init__(self):
        if self.ever_active is None:
            self.ever_active = self.initial.active.copy()
        self.rows.append(MaskStatsRow(0, 0.0, 0, 0, self.initial.active_count, 1.0))

    def record(self, step: int, tau: float, mask: DynamicMask, upd: MaskUpdate) -> None:
        self.ever_active |= mask.active
        overlap = (mask.active & self.initial.active).sum() / max(self.initial.active_count, 1)
        self.rows.append(MaskStatsRow(step, tau, len(upd.dropped), len(upd.added),
                                      mask.active_count, float(overlap)))


MASK_STATS_COLUMNS = ("step", "tau", "dropped", "added", "active_count", "overlap_with_initial_mask")


def write_mask_stats(rows: list[MaskStatsRow], path, header_comment: str | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(MASK_STATS_COLUMNS)
        for r in rows:
            w.writerow([r.step, repr(r.tau), r.dropped, r.added, r.active_count, repr(r.overlap_with_initial_mask)])
