"""End-to-end runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .concepts import ConceptRegistry
from .diffusion import NoiseSchedule, diffusion_loss_and_grad
from .masking import AdamState, adam_step
from .nn import Architecture, DenoiserParams, init_params
from .unlearning import ForgetTask, MetricsRow, TrainerState, UnlearnConfig, unlearn_sequence

log = logging.getLogger(__name__)

# probability of conditioning a pretraining example on its subconcept / superclass / null token
COND_MIX = (0.5, 0.3, 0.2)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 8000
    batch: int = 256
    lr: float = 3e-3
    lr_final: float = 1e-4

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.lr_final <= 0:
            raise ValueError(f"invalid pretraining config {self}")


def draw_pretrain_batch(reg: ConceptRegistry, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Mixture draws paired with a subconcept, superclass or null condition token."""
    prior = np.array([c.prior for c in reg.subconcepts])
    comp = rng.choice(len(reg.subconcepts), size=n, p=prior)
    means = reg.means[comp]
    sd = np.array([c.stddev for c in reg.subconcepts])[comp]
    x0 = means + sd[:, None] * rng.standard_normal((n, reg.data_dim))
    sub_tok = reg.sub_ids[comp]
    super_tok = np.array([c.superclass_id for c in reg.subconcepts])[comp]
    which = rng.choice(3, size=n, p=COND_MIX)
    cond = np.where(which == 0, sub_tok, np.where(which == 1, super_tok, reg.null_token))
    return x0, cond


def pretrain(arch: Architecture, reg: ConceptRegistry, sched: NoiseSchedule, cfg: PretrainConfig,
             seed: int, log_every: int = 0) -> tuple[DenoiserParams, list[float]]:
    """Train the base denoiser on the registry mixture with plain Adam and cosine-decayed lr."""
    if arch.cond_vocab != reg.cond_vocab or arch.data_dim != reg.data_dim:
        raise ValueError("architecture does not match the registry")
    params = init_params(arch, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    opt = AdamState.zeros(arch.n_params)
    losses = []
    for step in range(cfg.steps):
        frac = step / max(cfg.steps - 1, 1)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
        x0, cond = draw_pretrain_batch(reg, cfg.batch, rng)
        loss, grad = diffusion_loss_and_grad(params, x0, cond, sched, rng)
        params.flat[...], opt = adam_step(params.flat, grad, opt, lr)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, np.mean(losses[-log_every:]))
    return params, losses


def resolve_tasks(reg: ConceptRegistry, names) -> list[ForgetTask]:
    return [ForgetTask.for_concept(reg, reg.token(name)) for name in names]


def run_unlearning(base: DenoiserParams, reg: ConceptRegistry, sched: NoiseSchedule, tasks: list[ForgetTask],
                   cfg: UnlearnConfig, seed: int, n_eval: int = 200) -> tuple[TrainerState, list[MetricsRow]]:
    state = TrainerState(base.copy(), reg, sched, seed=seed)
    return unlearn_sequence(state, tasks, cfg, n_eval=n_eval)


def relapse(metrics: list[MetricsRow]) -> float:
    """Forget rate of the first task's concept measured after the last task."""
    return metrics[-1].report.per_concept_forget_rate[metrics[0].concept_id]
