"""Forgetting metrics scored by the Bayes oracle on generated samples."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .concepts import ConceptRegistry, classify, classify_super
from .diffusion import NoiseSchedule, sample
from .nn import DenoiserParams

DEFAULT_N_EVAL = 200
REPORT_COLUMNS = ("metric", "concept", "value", "n", "seed")


def concept_rng(seed: int, concept_id: int, purpose: int = 0) -> np.random.Generator:
    """Independent evaluation stream per (seed, concept) so metrics do not depend on call order."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1, purpose, concept_id]))


def rates_from_samples(reg: ConceptRegistry, concept_id: int, x) -> tuple[float, float]:
    """(forget_rate, super_alignment) for samples generated under ``concept_id``."""
    sub = classify(reg, x)
    sup = classify_super(reg, x)
    hit = sub == concept_id
    aligned = (sup == reg.superclass_of(concept_id)) & ~hit
    return float(hit.mean()), float(aligned.mean())


def forget_rate(params: DenoiserParams, reg: ConceptRegistry, concept_id: int, n: int,
                sched: NoiseSchedule, rng: np.random.Generator) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = sample(params, reg.concept(concept_id).id, sched, rng, n)
    return rates_from_samples(reg, concept_id, x)[0]


def super_alignment(params: DenoiserParams, reg: ConceptRegistry, concept_id: int, n: int,
                    sched: NoiseSchedule, rng: np.random.Generator) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = sample(params, reg.concept(concept_id).id, sched, rng, n)
    return rates_from_samples(reg, concept_id, x)[1]


def others_accuracy(params: DenoiserParams, reg: ConceptRegistry, forgotten, n_per: int,
                    sched: NoiseSchedule, rng: np.random.Generator) -> float:
    forgotten = set(int(c) for c in forgotten)
    retained = [c.id for c in reg.subconcepts if c.id not in forgotten]
    if not forgotten <= set(int(c) for c in reg.sub_ids):
        raise ValueError("forgotten set must contain subconcepts only")
    if not retained:
        raise ValueError("cannot score retained accuracy with every concept forgotten")
    return float(np.mean([forget_rate(params, reg, c, n_per, sched, rng) for c in retained]))


@dataclass
class EvalReport:
    per_concept_forget_rate: dict[int, float]
    others_acc: float
    super_align: dict[int, float]
    n_eval: int
    seed: int
    per_concept_acc: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_eval < 1:
            raise ValueError("n_eval must be >= 1")
        values = [*self.per_concept_forget_rate.values(), self.others_acc, *self.super_align.values(),
                  *self.per_concept_acc.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("all rates must lie in [0, 1]")

    @property
    def mean_forget_rate(self) -> float:
        return float(np.mean(list(self.per_concept_forget_rate.values())))

    def rows(self) -> list[tuple[str, str, float, int, int]]:
        out = [("forget_rate", str(c), v, self.n_eval, self.seed) for c, v in self.per_concept_forget_rate.items()]
        out += [("super_alignment", str(c), v, self.n_eval, self.seed) for c, v in self.super_align.items()]
        out += [("concept_accuracy", str(c), v, self.n_eval, self.seed) for c, v in self.per_concept_acc.items()]
        out.append(("others_acc", "", self.others_acc, self.n_eval, self.seed))
        return out

    def to_json(self) -> dict:
        doc = asdict(self)
        for key in ("per_concept_forget_rate", "super_align", "per_concept_acc"):
            doc[key] = {str(k): v for k, v in doc[key].items()}
        return doc


def evaluate(params: DenoiserParams, reg: ConceptRegistry, forgotten, sched: NoiseSchedule,
             n_eval: int = DEFAULT_N_EVAL, seed: int = 0) -> EvalReport:
    """Sample every subconcept once and score all metrics from the shared sample set."""
    forgotten = [int(c) for c in forgotten]
    acc, fr, sa = {}, {}, {}
    for c in reg.subconcepts:
        x = sample(params, c.id, sched, concept_rng(seed, c.id), n_eval)
        hit, aligned = rates_from_samples(reg, c.id, x)
        acc[c.id] = hit
        if c.id in forgotten:
            fr[c.id], sa[c.id] = hit, aligned
    retained = [c for c in acc if c not in forgotten]
    if not retained:
        raise ValueError("cannot score retained accuracy with every concept forgotten")
    others = float(np.mean([acc[c] for c in retained]))
    return EvalReport({c: fr[c] for c in forgotten}, others, {c: sa[c] for c in forgotten},
                      n_eval, seed, acc)


def write_report(report: EvalReport, path, header_comment: str | None = None) -> None:
    """Write the report as CSV, replacing any existing file atomically."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for metric, concept, value, n, seed in report.rows():
                w.writerow([metric, concept, repr(float(value)), n, seed])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["value"] = float(r["value"])
        r["n"] = int(r["n"])
        r["seed"] = int(r["seed"])
    return rows


def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2))
