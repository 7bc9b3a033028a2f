"""Hierarchical Gaussian concept universe and its closed-form Bayes classifier.

Each subconcept is an isotropic Gaussian component; superclasses group
subconcepts. Token ids are dense: subconcepts first, then superclasses, then
the null token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class ConceptSpec:
    id: int
    name: str
    superclass_id: int
    mean: tuple[float, ...]
    stddev: float
    prior: float


@dataclass(frozen=True)
class Superclass:
    id: int
    name: str
    members: tuple[int, ...]


@dataclass(frozen=True)
class ConceptRegistry:
    subconcepts: tuple[ConceptSpec, ...]
    superclasses: tuple[Superclass, ...]
    null_token: int

    def __post_init__(self):
        sub_ids = [c.id for c in self.subconcepts]
        super_ids = [s.id for s in self.superclasses]
        all_ids = sorted(sub_ids + super_ids + [self.null_token])
        if all_ids != list(range(len(all_ids))):
            raise ValueError("token ids must be unique and dense in [0, cond_vocab)")
        if len({len(c.mean) for c in self.subconcepts}) != 1:
            raise ValueError("all subconcept means must share one dimension")
        for c in self.subconcepts:
            if not c.stddev > 0.0 or not 0.0 < c.prior < 1.0:
                raise ValueError(f"bad stddev/prior for {c.name}")
            if c.superclass_id not in super_ids:
                raise ValueError(f"{c.name}: unknown superclass {c.superclass_id}")
        if abs(sum(c.prior for c in self.subconcepts) - 1.0) > 1e-12:
            raise ValueError("subconcept priors must sum to 1")
        for s in self.superclasses:
            if len(s.members) < 2:
                raise ValueError(f"superclass {s.name} needs >= 2 members")
            if sorted(s.members) != sorted(c.id for c in self.subconcepts if c.superclass_id == s.id):
                raise ValueError(f"superclass {s.name} member list disagrees with subconcepts")

    @property
    def data_dim(self) -> int:
        return len(self.subconcepts[0].mean)

    @property
    def cond_vocab(self) -> int:
        return len(self.subconcepts) + len(self.superclasses) + 1

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.subconcepts], dtype=np.float64)

    @property
    def sub_ids(self) -> np.ndarray:
        return np.array([c.id for c in self.subconcepts])

    def concept(self, token: int) -> ConceptSpec:
        for c in self.subconcepts:
            if c.id == token:
                return c
        raise ValueError(f"token {token} is not a subconcept")

    def superclass(self, token: int) -> Superclass:
        for s in self.superclasses:
            if s.id == token:
                return s
        raise ValueError(f"token {token} is not a superclass")

    def superclass_of(self, concept_id: int) -> int:
        return self.concept(concept_id).superclass_id

    def is_subconcept(self, token: int) -> bool:
        return any(c.id == token for c in self.subconcepts)

    def token(self, name_or_id) -> int:
        """Resolve a token name (or numeric id / numeric string) to its id."""
        if isinstance(name_or_id, (int, np.integer)) or str(name_or_id).isdigit():
            tok = int(name_or_id)
            if not 0 <= tok < self.cond_vocab:
                raise ValueError(f"unknown token id {tok}")
            return tok
        for item in (*self.subconcepts, *self.superclasses):
            if item.name == name_or_id:
                return item.id
        if name_or_id == "null":
            return self.null_token
        raise ValueError(f"unknown token name {name_or_id!r}")

    def name(self, token: int) -> str:
        for item in (*self.subconcepts, *self.superclasses):
            if item.id == token:
                return item.name
        return "null"

    def to_json(self) -> dict:
        return {
            "subconcepts": [asdict(c) for c in self.subconcepts],
            "superclasses": [asdict(s) for s in self.superclasses],
            "null_token": self.null_token,
        }

    @classmethod
    def from_json(cls, doc: dict) -> ConceptRegistry:
        subs = tuple(ConceptSpec(int(c["id"]), c["name"], int(c["superclass_id"]),
                                 tuple(float(v) for v in c["mean"]), float(c["stddev"]),
                                 float(c["prior"])) for c in doc["subconcepts"])
        sups = tuple(Superclass(int(s["id"]), s["name"], tuple(int(m) for m in s["members"]))
                     for s in doc["superclasses"])
        return cls(subs, sups, int(doc["null_token"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> ConceptRegistry:
        return cls.from_json(json.loads(Path(path).read_text()))


_DEFAULT_LAYOUT = [
    ("fish", (-4.0, -4.0), ("tench", "goldfish")),
    ("dog", (4.0, -4.0), ("springer", "beagle")),
    ("vehicle", (-4.0, 4.0), ("garbage_truck", "fire_engine")),
    ("instrument", (4.0, 4.0), ("french_horn", "trumpet")),
]


def default_registry() -> ConceptRegistry:
    """4 superclasses at (+-4, +-4), two members each at +-1.2 along x, stddev 0.4."""
    n_sub = sum(len(members) for _, _, members in _DEFAULT_LAYOUT)
    subs, sups = [], []
    for k, (super_name, (cx, cy), members) in enumerate(_DEFAULT_LAYOUT):
        super_id = n_sub + k
        ids = []
        for j, name in enumerate(members):
            cid = len(subs)
            dx = -1.2 if j == 0 else 1.2
            subs.append(ConceptSpec(cid, name, super_id, (cx + dx, cy), 0.4, 1.0 / n_sub))
            ids.append(cid)
        sups.append(Superclass(super_id, super_name, tuple(ids)))
    return ConceptRegistry(tuple(subs), tuple(sups), n_sub + len(sups))


def sample_concept(reg: ConceptRegistry, concept_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
    spec = reg.concept(concept_id)
    mean = np.asarray(spec.mean)
    return mean + spec.stddev * rng.standard_normal((n, mean.size))


def log_joint(reg: ConceptRegistry, x) -> np.ndarray:
    """log(prior_k * N(x; mean_k, s_k^2 I)) for each subconcept; ``x`` is ``(d,)`` or ``(n, d)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = reg.data_dim
    sd = np.array([c.stddev for c in reg.subconcepts])
    prior = np.array([c.prior for c in reg.subconcepts])
    sq = ((x[:, None, :] - reg.means[None, :, :]) ** 2).sum(axis=-1)
    return np.log(prior) - 0.5 * sq / sd ** 2 - d * np.log(sd) - 0.5 * d * np.log(2 * np.pi)


def bayes_posterior(reg: ConceptRegistry, x) -> np.ndarray:
    """Posterior over subconcepts, ordered as ``reg.subconcepts``; shape follows ``x``."""
    lj = log_joint(reg, x)
    post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return post[0] if np.ndim(x) == 1 else post


def classify(reg: ConceptRegistry, x):
    """Bayes argmax subconcept id; ties go to the lowest token id."""
    ids = reg.sub_ids
    order = np.argsort(ids, kind="stable")
    lj = log_joint(reg, x)[:, order]
    out = ids[order][np.argmax(lj, axis=1)]
    return int(out[0]) if np.ndim(x) == 1 else out


def classify_super(reg: ConceptRegistry, x):
    """Superclass with the largest summed member posterior; ties go to the lowest token id."""
    post = np.atleast_2d(bayes_posterior(reg, x))
    col = {c.id: k for k, c in enumerate(reg.subconcepts)}
    sups = sorted(reg.superclasses, key=lambda s: s.id)
    mass = np.stack([post[:, [col[m] for m in s.members]].sum(axis=1) for s in sups], axis=1)
    out = np.array([s.id for s in sups])[np.argmax(mass, axis=1)]
    return int(out[0]) if np.ndim(x) == 1 else out
