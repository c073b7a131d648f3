"""Nuisance fitting for the one-step estimators.

For an estimand the pipeline needs some subset of: the propensity score
pi(X) = P(R=1|X), the sequential binary regressions g_k = P(R=1|M_1..k, X),
the outcome regressions mu_k fit in the stratum R = r0 and evaluated on all
rows, and the pseudo-outcome regressions B_k (mu_k regressed on the previous
blocks within R = r_k) and C (regressed on X alone within R = r1). Fits are
optionally cross-fit over V folds stratified by R, and all probability-type
predictions are truncated into [delta, 1 - delta].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import AnalysisFrame
from .learners import LearnerSpec, SuperLearnerConfig, fit_two_part, stratified_folds, train

DEFAULT_DELTA = 0.01

ESTIMAND_KINDS = ("dis", "adv", "direct", "mediator", "sequential")


class NuisanceError(ValueError):
    """A nuisance regression could not be fit as requested."""


@dataclass(frozen=True)
class EstimandId:
    """Identifies a counterfactual-mean estimand and its implied arm vector.

    ``kind`` is one of dis/adv/direct/mediator/sequential; ``k`` indexes the
    mediator block for the last two kinds.
    """

    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ESTIMAND_KINDS:
            raise NuisanceError(f"unknown estimand kind {self.kind!r}")
        if self.kind in ("mediator", "sequential"):
            if self.k is None or self.k < 1:
                raise NuisanceError(f"estimand {self.kind} needs a block index k >= 1")
        elif self.k is not None:
            raise NuisanceError(f"estimand {self.kind} takes no block index")

    @staticmethod
    def dis() -> "EstimandId":
        return EstimandId("dis")

    @staticmethod
    def adv() -> "EstimandId":
        return EstimandId("adv")

    @staticmethod
    def direct() -> "EstimandId":
        return EstimandId("direct")

    @staticmethod
    def mediator(k: int) -> "EstimandId":
        return EstimandId("mediator", k)

    @staticmethod
    def sequential(k: int) -> "EstimandId":
        return EstimandId("sequential", k)

    def validate(self, n_blocks: int) -> None:
        if self.k is not None and self.k > n_blocks:
            raise NuisanceError(f"estimand block index {self.k} exceeds K={n_blocks}")

    @property
    def r0(self) -> int:
        """Arm of the outcome law."""
        return {"dis": 0, "adv": 1, "direct": 1, "mediator": 0, "sequential": 1}[self.kind]

    def mediator_arms(self, n_blocks: int) -> tuple[int, ...]:
        """Arm of each mediator block's conditional law."""
        if self.kind == "dis":
            return (0,) * n_blocks
        if self.kind == "adv":
            return (1,) * n_blocks
        if self.kind == "direct":
            return (0,) * n_blocks
        if self.kind == "mediator":
            return tuple(1 if j == self.k else 0 for j in range(1, n_blocks + 1))
        # sequential: first k blocks at 0, the rest at 1
        return tuple(0 if j <= self.k else 1 for j in range(1, n_blocks + 1))

    @property
    def c_stratum(self) -> int | None:
        """Group in which the final covariate-only regression is fit."""
        if self.kind in ("dis", "adv"):
            return None
        if self.kind == "mediator":
            return 1 if self.k == 1 else 0
        return 0  # direct and sequential center in the R=0 stratum

    @property
    def label(self) -> str:
        if self.kind in ("mediator", "sequential"):
            return f"gamma_{self.kind}_{self.k}"
        return f"gamma_{self.kind}"


@dataclass(frozen=True)
class NuisanceLearners:
    """Learner choices for binary (pi, g, zero-part) and continuous regressions."""

    binary: LearnerSpec | SuperLearnerConfig = field(default_factory=lambda: LearnerSpec("logistic"))
    continuous: LearnerSpec | SuperLearnerConfig = field(default_factory=lambda: LearnerSpec("linear"))


@dataclass
class NuisanceSet:
    """Per-observation nuisance predictions needed by one estimand."""

    estimand: EstimandId
    pi: np.ndarray
    g: dict[int, np.ndarray] = field(default_factory=dict)
    mu: dict[int, np.ndarray] = field(default_factory=dict)
    B: dict[int, np.ndarray] = field(default_factory=dict)
    C_B: dict[int, np.ndarray] = field(default_factory=dict)
    C_mu: np.ndarray | None = None
    delta: float = DEFAULT_DELTA
    fold_assignment: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def validate(self) -> None:
        n = self.pi.shape[0]
        vectors = [("pi", self.pi)]
        vectors += [(f"g[{k}]", v) for k, v in self.g.items()]
        vectors += [(f"mu[{k}]", v) for k, v in self.mu.items()]
        vectors += [(f"B[{k}]", v) for k, v in self.B.items()]
        vectors += [(f"C_B[{k}]", v) for k, v in self.C_B.items()]
        if self.C_mu is not None:
            vectors.append(("C_mu", self.C_mu))
        for name, vec in vectors:
            if vec.shape != (n,):
                raise NuisanceError(f"nuisance {name} has wrong length")
            if not np.isfinite(vec).all():
                raise NuisanceError(f"nuisance {name} contains non-finite values")
        lo, hi = self.delta, 1.0 - self.delta
        for name, vec in [("pi", self.pi)] + [(f"g[{k}]", v) for k, v in self.g.items()]:
            if vec.min() < lo - 1e-12 or vec.max() > hi + 1e-12:
                raise NuisanceError(f"nuisance {name} escapes truncation bounds [{lo}, {hi}]")


def _seed_from(seed: int, key: tuple) -> int:
    digest = hashlib.blake2s(f"{seed}|{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2**63)


class NuisanceCache:
    """Memoized nuisance fits shared across the estimands of one analysis run.

    ``route`` optionally maps nuisance names ("pi", "g" or "g3", "mu", "B",
    "C_B", "C_mu") to "false", replacing the covariate matrix with ``x_alt``
    for that regression; used by the misspecification grid.
    """

    def __init__(
        self,
        frame: AnalysisFrame,
        learners: NuisanceLearners | None = None,
        delta: float = DEFAULT_DELTA,
        folds: int | None = None,
        seed: int = 0,
        x_alt: np.ndarray | None = None,
        route: Mapping[str, str] | None = None,
    ):
        if not (0 <= delta < 0.5):
            raise NuisanceError("delta must lie in [0, 0.5)")
        self.frame = frame
        self.learners = learners or NuisanceLearners()
        self.delta = float(delta)
        self.seed = int(seed)
        self.x_alt = x_alt
        self.route = dict(route or {})
        if self.route and x_alt is None:
            raise NuisanceError("feature routing requires an alternative covariate matrix")
        n = frame.n
        self.n_folds = int(folds) if folds else 1
        if self.n_folds < 1:
            raise NuisanceError("folds must be >= 1")
        if self.n_folds > 1:
            self.fold_labels = stratified_folds(n, self.n_folds, seed, strata=frame.r)
        else:
            self.fold_labels = np.zeros(n, dtype=np.int64)
        self._store: dict = {}
        self.truncation_counts: dict[str, int] = {}

    # -- plumbing ----------------------------------------------------------

    def _splits(self):
        n = self.frame.n
        if self.n_folds == 1:
            every = np.ones(n, dtype=bool)
            return [(every, every)]
        return [(self.fold_labels != v, self.fold_labels == v) for v in range(self.n_folds)]

    def _variant(self, name: str) -> str:
        base = name.rstrip("0123456789")
        return self.route.get(name) or self.route.get(base) or "correct"

    def _covariates(self, name: str) -> np.ndarray:
        if self._variant(name) == "false":
            return self.x_alt
        return self.frame.x

    def _seed(self, key: tuple) -> int:
        return _seed_from(self.seed, key)

    def _clip(self, name: str, vec: np.ndarray) -> np.ndarray:
        lo, hi = self.delta, 1.0 - self.delta
        hit = int(((vec < lo) | (vec > hi)).sum())
        self.truncation_counts[name] = self.truncation_counts.get(name, 0) + hit
        return np.clip(vec, lo, hi)

    # -- fits ---------------------------------------------------------------

    def pi(self) -> np.ndarray:
        key = ("pi", self._variant("pi"))
        if key not in self._store:
            feats = self._covariates("pi")
            resp = self.frame.r.astype(float)
            oof = np.empty(self.frame.n)
            for train_mask, test_mask in self._splits():
                if resp[train_mask].min() == resp[train_mask].max():
                    raise NuisanceError("a training split contains a single group level")
                model = train(
                    self.learners.binary, feats[train_mask], resp[train_mask],
                    "probability", self._seed(key), strata=resp[train_mask],
                )
                oof[test_mask] = model.predict(feats[test_mask])
            self._store[key] = self._clip("pi", oof)
        return self._store[key]

    def g(self, k: int) -> np.ndarray:
        name = f"g{k}"
        key = ("g", k, self._variant(name))
        if key not in self._store:
            feats = np.hstack([self.frame.m_upto(k), self._covariates(name)])
            resp = self.frame.r.astype(float)
            oof = np.empty(self.frame.n)
            for train_mask, test_mask in self._splits():
                model = train(
                    self.learners.binary, feats[train_mask], resp[train_mask],
                    "probability", self._seed(key), strata=resp[train_mask],
                )
                oof[test_mask] = model.predict(feats[test_mask])
            self._store[key] = self._clip(name, oof)
        return self._store[key]

    def _outcome_model(self, feats: np.ndarray, resp: np.ndarray, seed: int):
        scale = self.frame.scale_applied
        if scale == "log_positive":
            return fit_two_part(feats, resp, self.learners.binary, self.learners.continuous, seed)
        if scale == "positive_indicator":
            return train(self.learners.binary, feats, resp, "probability", seed, strata=resp)
        return train(self.learners.continuous, feats, resp, "continuous", seed)

    def _regress(self, key, feats, pseudo_per_fold, stratum, outcome_model=False):
        """Fold-wise stratum regression of a (possibly fold-specific) pseudo-outcome.

        Returns {"oof": out-of-fold predictions on all rows,
                 "train": per-fold predictions on that fold's training rows}.
        """
        n = self.frame.n
        r = self.frame.r
        oof = np.empty(n)
        per_train: list[np.ndarray] = []
        for idx, (train_mask, test_mask) in enumerate(self._splits()):
            pseudo = pseudo_per_fold[idx]
            rows = train_mask & (r == stratum)
            if not rows.any():
                raise NuisanceError(f"empty stratum R={stratum} in a training split")
            seed = self._seed(key + (idx,))
            if outcome_model:
                model = self._outcome_model(feats[rows], pseudo[rows], seed)
            else:
                model = train(self.learners.continuous, feats[rows], pseudo[rows], "continuous", seed)
            oof[test_mask] = model.predict(feats[test_mask])
            per_train.append(model.predict(feats[train_mask]))
        return {"oof": oof, "train": per_train}

    def mu(self, k: int, r0: int) -> np.ndarray:
        return self._mu_entry(k, r0)["oof"]

    def _mu_entry(self, k: int, r0: int) -> dict:
        name = f"mu{k}"
        key = ("mu", k, r0, self._variant(name))
        if key not in self._store:
            feats = np.hstack([self.frame.m_upto(k), self._covariates(name)])
            y = self.frame.y
            pseudo_per_fold = [y for _ in range(self.n_folds)]
            self._store[key] = self._regress(key, feats, pseudo_per_fold, r0, outcome_model=True)
        return self._store[key]

    def B(self, k: int, r0: int, rk: int) -> np.ndarray:
        return self._B_entry(k, r0, rk)["oof"]

    def _B_entry(self, k: int, r0: int, rk: int) -> dict:
        name = f"B{k}"
        key = ("B", k, r0, rk, self._variant(f"mu{k}"), self._variant(name))
        if key not in self._store:
            mu_entry = self._mu_entry(k, r0)
            feats = np.hstack([self.frame.m_upto(k - 1), self._covariates(name)])
            pseudo_per_fold = []
            for idx, (train_mask, _) in enumerate(self._splits()):
                pseudo = np.zeros(self.frame.n)
                pseudo[train_mask] = mu_entry["train"][idx]
                pseudo_per_fold.append(pseudo)
            self._store[key] = self._regress(key, feats, pseudo_per_fold, rk)
        return self._store[key]

    def C_B(self, k: int, r0: int, rk: int, r1: int) -> np.ndarray:
        name = f"C_B{k}"
        key = ("C_B", k, r0, rk, r1, self._variant(f"mu{k}"), self._variant(f"B{k}"), self._variant(name))
        if key not in self._store:
            b_entry = self._B_entry(k, r0, rk)
            feats = self._covariates(name)
            pseudo_per_fold = []
            for idx, (train_mask, _) in enumerate(self._splits()):
                pseudo = np.zeros(self.frame.n)
                pseudo[train_mask] = b_entry["train"][idx]
                pseudo_per_fold.append(pseudo)
            self._store[key] = self._regress(key, feats, pseudo_per_fold, r1)["oof"]
        return self._store[key]

    def C_mu(self, k: int, r0: int, r1: int) -> np.ndarray:
        name = f"C_mu{k}"
        key = ("C_mu", k, r0, r1, self._variant(f"mu{k}"), self._variant(name))
        if key not in self._store:
            mu_entry = self._mu_entry(k, r0)
            feats = self._covariates(name)
            pseudo_per_fold = []
            for idx, (train_mask, _) in enumerate(self._splits()):
                pseudo = np.zeros(self.frame.n)
                pseudo[train_mask] = mu_entry["train"][idx]
                pseudo_per_fold.append(pseudo)
            self._store[key] = self._regress(key, feats, pseudo_per_fold, r1)["oof"]
        return self._store[key]

    def diagnostics(self) -> dict:
        out = {"truncation_counts": dict(self.truncation_counts), "delta": self.delta}
        pi_key = ("pi", self._variant("pi"))
        if pi_key in self._store:
            pi = self._store[pi_key]
            out["pi_range"] = [float(pi.min()), float(pi.max())]
        g_ranges = {}
        for key, value in self._store.items():
            if key[0] == "g":
                g_ranges[f"g{key[1]}"] = [float(value.min()), float(value.max())]
        if g_ranges:
            out["g_ranges"] = g_ranges
        return out


def fit_all(
    frame: AnalysisFrame,
    estimand: EstimandId,
    learners: NuisanceLearners | None = None,
    delta: float = DEFAULT_DELTA,
    folds: int | None = None,
    seed: int = 0,
    cache: NuisanceCache | None = None,
) -> NuisanceSet:
    """Fit every nuisance the estimand needs; reuses ``cache`` when given.

    Structural identities are built in: g_0 is never fit (the propensity
    score plays its role) and for k = 1 the C regression is the B regression.
    """
    if cache is None:
        cache = NuisanceCache(frame, learners, delta, folds, seed)
    K = frame.n_blocks
    estimand.validate(K)

    q = NuisanceSet(
        estimand=estimand,
        pi=cache.pi(),
        delta=cache.delta,
        fold_assignment=cache.fold_labels if cache.n_folds > 1 else None,
    )
    kind = estimand.kind
    if kind in ("dis", "adv"):
        q.mu[0] = cache.mu(0, estimand.r0)
    elif kind == "direct":
        q.g[K] = cache.g(K)
        q.mu[K] = cache.mu(K, 1)
        q.C_mu = cache.C_mu(K, 1, 0)
    elif kind == "sequential":
        k = estimand.k
        q.g[k] = cache.g(k)
        q.mu[k] = cache.mu(k, 1)
        q.C_mu = cache.C_mu(k, 1, 0)
    elif kind == "mediator":
        k = estimand.k
        q.g[k] = cache.g(k)
        if k >= 2:
            q.g[k - 1] = cache.g(k - 1)
        q.mu[k] = cache.mu(k, 0)
        q.B[k] = cache.B(k, 0, 1)
        q.C_B[k] = q.B[k] if k == 1 else cache.C_B(k, 0, 1, estimand.c_stratum)
    q.diagnostics = cache.diagnostics()
    q.validate()
    return q


# Thin operation wrappers over the cache, for direct use and tests.

def fit_propensity(frame, learner=None, delta=DEFAULT_DELTA, folds=None, seed=0) -> np.ndarray:
    cache = NuisanceCache(frame, NuisanceLearners(binary=learner or LearnerSpec("logistic")), delta, folds, seed)
    return cache.pi()


def fit_g(frame, k, learner=None, delta=DEFAULT_DELTA, folds=None, seed=0) -> np.ndarray:
    cache = NuisanceCache(frame, NuisanceLearners(binary=learner or LearnerSpec("logistic")), delta, folds, seed)
    return cache.g(k)


def fit_mu(frame, k, learners=None, r0=0, folds=None, seed=0) -> np.ndarray:
    cache = NuisanceCache(frame, learners, DEFAULT_DELTA, folds, seed)
    return cache.mu(k, r0)


def fit_B(frame, k, learners=None, r0=0, rk=1, folds=None, seed=0) -> np.ndarray:
    cache = NuisanceCache(frame, learners, DEFAULT_DELTA, folds, seed)
    return cache.B(k, r0, rk)


def fit_C(frame, k, learners=None, r0=0, rk=1, r1=0, against_mu=False, folds=None, seed=0) -> np.ndarray:
    cache = NuisanceCache(frame, learners, DEFAULT_DELTA, folds, seed)
    if against_mu:
        return cache.C_mu(k, r0, r1)
    return cache.C_B(k, r0, rk, r1)
