"""Exact enumeration oracle over fully discrete data-generating processes.

A :class:`DiscreteDgp` stores finite probability tables for X, R, the ordered
mediator blocks, and Y. Everything the estimators target can then be computed
without sampling: the counterfactual means by direct summation of the
identification functionals, the population value of the one-step summand
under exact nuisances (which must coincide with the enumerated mean), and the
exact nuisance functions themselves, usable as drop-in predictions.

Axis convention for tables: ``mediators[k].table`` has shape
``(sx, 2, s_1, ..., s_{k-1}, s_k)`` (covariate state, arm of R, earlier
mediator categories, own category); ``p_y`` ends with the outcome category.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import AnalysisFrame
from .nuisance import EstimandId, NuisanceSet

MAX_STATES = 10**7
TABLE_TOL = 1e-12


class OracleError(ValueError):
    """Invalid probability tables or an enumeration request beyond limits."""


@dataclass(frozen=True)
class MediatorTable:
    values: np.ndarray  # numeric value of each category, shape (s_k,)
    table: np.ndarray   # P(M_k = . | earlier, R, X)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))


@dataclass(frozen=True)
class DiscreteDgp:
    x_values: np.ndarray  # (sx, d) numeric covariate rows, one per state
    p_x: np.ndarray       # (sx,)
    p_r1: np.ndarray      # (sx,) P(R=1 | X = state)
    mediators: tuple[MediatorTable, ...]
    y_values: np.ndarray  # (sy,)
    p_y: np.ndarray       # (sx, 2, s_1..s_K, sy)

    def __post_init__(self):
        object.__setattr__(self, "x_values", np.atleast_2d(np.asarray(self.x_values, dtype=float)))
        object.__setattr__(self, "p_x", np.asarray(self.p_x, dtype=float))
        object.__setattr__(self, "p_r1", np.asarray(self.p_r1, dtype=float))
        object.__setattr__(self, "y_values", np.asarray(self.y_values, dtype=float))
        object.__setattr__(self, "p_y", np.asarray(self.p_y, dtype=float))
        object.__setattr__(self, "mediators", tuple(self.mediators))
        self.validate()

    # -- shape helpers -------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self.mediators)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(m.values.shape[0] for m in self.mediators)

    @property
    def sx(self) -> int:
        return self.p_x.shape[0]

    def validate(self) -> None:
        sx, sizes, sy = self.sx, self.sizes, self.y_values.shape[0]
        n_states = sx * 2 * int(np.prod(sizes)) * sy
        if n_states > MAX_STATES:
            raise OracleError(f"state space has {n_states} > {MAX_STATES} configurations")
        if self.x_values.shape[0] != sx:
            raise OracleError("x_values and p_x disagree on the number of states")
        if abs(self.p_x.sum() - 1.0) > TABLE_TOL or (self.p_x < 0).any():
            raise OracleError("p_x is not a probability vector")
        if self.p_r1.shape != (sx,):
            raise OracleError("p_r1 has the wrong shape")
        for k, med in enumerate(self.mediators, start=1):
            expected = (sx, 2) + sizes[: k - 1] + (sizes[k - 1],)
            if med.table.shape != expected:
                raise OracleError(f"mediator {k} table has shape {med.table.shape}, expected {expected}")
            if (med.table < -TABLE_TOL).any():
                raise OracleError(f"mediator {k} table has negative entries")
            sums = med.table.sum(axis=-1)
            if np.abs(sums - 1.0).max() > 1e-9:
                raise OracleError(f"mediator {k} table rows do not sum to 1")
        expected_y = (sx, 2) + sizes + (sy,)
        if self.p_y.shape != expected_y:
            raise OracleError(f"p_y has shape {self.p_y.shape}, expected {expected_y}")
        if (self.p_y < -TABLE_TOL).any():
            raise OracleError("p_y has negative entries")
        if np.abs(self.p_y.sum(axis=-1) - 1.0).max() > 1e-9:
            raise OracleError("p_y rows do not sum to 1")
        self._check_positivity()

    def _check_positivity(self) -> None:
        """Both arms must put positive mass wherever the observed law does."""
        live = self.p_x > 0
        if ((self.p_r1[live] <= 0) | (self.p_r1[live] >= 1)).any():
            raise OracleError("positivity violated: P(R=1|X) not in (0,1) on the X support")
        joint0 = self._grid_weight([0] * self.n_blocks)
        joint1 = self._grid_weight([1] * self.n_blocks)
        mask = live.reshape((-1,) + (1,) * self.n_blocks)
        support = ((joint0 > 0) | (joint1 > 0)) & mask
        if ((joint0[support] <= 0) | (joint1[support] <= 0)).any():
            raise OracleError("positivity violated: a mediator history is reachable under one arm only")

    # -- core grids ----------------------------------------------------------

    def _grid_weight(self, arms) -> np.ndarray:
        """prod_k P(m_k | earlier, arm_k, x) over the full mediator grid: (sx, s_1..s_K)."""
        K = self.n_blocks
        w = np.ones((self.sx,) + self.sizes)
        for k, med in enumerate(self.mediators):
            t = med.table[:, arms[k]]  # (sx, s_1..s_{k-1}, s_k)
            w = w * t.reshape(t.shape + (1,) * (K - k - 1))
        return w

    def ey_grid(self, r0: int) -> np.ndarray:
        """E[Y | m_1..K, R=r0, x] over the grid: (sx, s_1..s_K)."""
        return self.p_y[:, r0] @ self.y_values

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "x_values": self.x_values.tolist(),
            "p_x": self.p_x.tolist(),
            "p_r1": self.p_r1.tolist(),
            "mediators": [{"values": m.values.tolist(), "table": m.table.tolist()} for m in self.mediators],
            "y_values": self.y_values.tolist(),
            "p_y": self.p_y.tolist(),
        }

    @staticmethod
    def from_dict(payload: dict) -> "DiscreteDgp":
        return DiscreteDgp(
            x_values=np.asarray(payload["x_values"], dtype=float),
            p_x=np.asarray(payload["p_x"], dtype=float),
            p_r1=np.asarray(payload["p_r1"], dtype=float),
            mediators=tuple(
                MediatorTable(np.asarray(m["values"], dtype=float), np.asarray(m["table"], dtype=float))
                for m in payload["mediators"]
            ),
            y_values=np.asarray(payload["y_values"], dtype=float),
            p_y=np.asarray(payload["p_y"], dtype=float),
        )

    @staticmethod
    def from_json(path: str) -> "DiscreteDgp":
        with open(path, encoding="utf-8") as handle:
            return DiscreteDgp.from_dict(json.load(handle))

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=1, sort_keys=True)


def enumerate_gamma(dgp: DiscreteDgp, estimand: EstimandId, traversal: str = "forward") -> float:
    """Exact value of the identification functional by nested summation.

    ``traversal`` chooses the axis order of the reduction ("forward" or
    "reverse"); the result is identical up to float associativity, which the
    test suite uses as a summation-order invariance check.
    """
    estimand.validate(dgp.n_blocks)
    arms = estimand.mediator_arms(dgp.n_blocks)
    agg = dgp._grid_weight(arms) * dgp.ey_grid(estimand.r0)
    if traversal == "forward":
        for ax in range(agg.ndim - 1, 0, -1):  # innermost mediator first
            agg = agg.sum(axis=ax)
    elif traversal == "reverse":
        for _ in range(agg.ndim - 1):  # outermost mediator first
            agg = agg.sum(axis=1)
    else:
        raise OracleError(f"unknown traversal {traversal!r}")
    return float(agg @ dgp.p_x)


class ExactNuisances:
    """Closed-form nuisance tables for a discrete DGP.

    Tables are indexed by (x state, mediator categories); row-level lookups
    build drop-in :class:`NuisanceSet` objects for sampled data.
    """

    def __init__(self, dgp: DiscreteDgp):
        self.dgp = dgp

    def pi_table(self) -> np.ndarray:
        return self.dgp.p_r1.copy()

    def _joint_upto(self, k: int, arm: int) -> np.ndarray:
        """prod_{j<=k} P(m_j | earlier, arm, x): shape (sx, s_1..s_k)."""
        w = np.ones((self.dgp.sx,) + self.dgp.sizes[:k])
        for j in range(k):
            t = self.dgp.mediators[j].table[:, arm]
            w = w * t.reshape(t.shape + (1,) * (k - j - 1))
        return w

    def g_table(self, k: int) -> np.ndarray:
        """P(R=1 | m_1..k, x): shape (sx, s_1..s_k); NaN off the support."""
        pi = self.dgp.p_r1.reshape((-1,) + (1,) * k)
        a1 = pi * self._joint_upto(k, 1)
        a0 = (1.0 - pi) * self._joint_upto(k, 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(a1 + a0 > 0, a1 / (a1 + a0), np.nan)

    def density_ratio_table(self, k: int) -> np.ndarray:
        """p(m_k | earlier, R=1, x) / p(m_k | earlier, R=0, x) on the grid."""
        t1 = self.dgp.mediators[k - 1].table[:, 1]
        t0 = self.dgp.mediators[k - 1].table[:, 0]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(t0 > 0, t1 / t0, np.nan)

    def mu_table(self, k: int, r0: int) -> np.ndarray:
        """E[Y | m_1..k, R=r0, x] integrating trailing blocks at arm r0."""
        K = self.dgp.n_blocks
        agg = self.dgp.ey_grid(r0)
        for j in range(K, k, -1):
            t = self.dgp.mediators[j - 1].table[:, r0]
            t = t.reshape(t.shape + (1,) * (agg.ndim - t.ndim))
            agg = (agg * t).sum(axis=j)
        return agg

    def B_table(self, k: int, r0: int, rk: int) -> np.ndarray:
        """Integral of mu_k over m_k at arm rk: shape (sx, s_1..s_{k-1})."""
        mu = self.mu_table(k, r0)
        t = self.dgp.mediators[k - 1].table[:, rk]
        return (mu * t).sum(axis=k)

    def C_B_table(self, k: int, r0: int, rk: int, r1: int) -> np.ndarray:
        """Integral of B_k over m_1..k-1 at arm r1: shape (sx,)."""
        agg = self.B_table(k, r0, rk)
        for j in range(k - 1, 0, -1):
            t = self.dgp.mediators[j - 1].table[:, r1]
            agg = (agg * t).sum(axis=j)
        return agg

    def C_mu_table(self, k: int, r0: int, r1: int) -> np.ndarray:
        """Integral of mu_k over m_1..k at arm r1: shape (sx,)."""
        agg = self.mu_table(k, r0)
        for j in range(k, 0, -1):
            t = self.dgp.mediators[j - 1].table[:, r1]
            agg = (agg * t).sum(axis=j)
        return agg

    def nuisance_set(self, states: "SampledStates", estimand: EstimandId) -> NuisanceSet:
        """Exact nuisance predictions for sampled rows, as the estimators expect them."""
        dgp = self.dgp
        estimand.validate(dgp.n_blocks)
        xi = states.x_idx
        mi = states.m_idx
        K = dgp.n_blocks

        def lookup(table, depth):
            return table[(xi,) + tuple(mi[j] for j in range(depth))]

        q = NuisanceSet(estimand=estimand, pi=dgp.p_r1[xi], delta=0.0)
        kind = estimand.kind
        if kind in ("dis", "adv"):
            q.mu[0] = self.C_mu_table(K, estimand.r0, estimand.r0)[xi]
        elif kind in ("direct", "sequential"):
            k = estimand.k if kind == "sequential" else K
            q.g[k] = lookup(self.g_table(k), k)
            q.mu[k] = lookup(self.mu_table(k, 1), k)
            q.C_mu = self.C_mu_table(k, 1, 0)[xi]
        else:
            k = estimand.k
            q.g[k] = lookup(self.g_table(k), k)
            if k >= 2:
                q.g[k - 1] = lookup(self.g_table(k - 1), k - 1)
            q.mu[k] = lookup(self.mu_table(k, 0), k)
            q.B[k] = lookup(self.B_table(k, 0, 1), k - 1)
            q.C_B[k] = q.B[k] if k == 1 else self.C_B_table(k, 0, 1, estimand.c_stratum)[xi]
        return q


def exact_nuisances(dgp: DiscreteDgp) -> ExactNuisances:
    return ExactNuisances(dgp)


def one_step_population_value(dgp: DiscreteDgp, estimand: EstimandId) -> float:
    """Population expectation of the one-step summand at exact nuisances.

    Enumerates every observed-data configuration (x, r, mediators, y), weights
    the production summand kernel by its exact probability, and sums. By the
    mean-zero property of the influence function this equals
    :func:`enumerate_gamma` identically.
    """
    from .estimators import gamma_summands

    estimand.validate(dgp.n_blocks)
    sizes = dgp.sizes
    sy = dgp.y_values.shape[0]
    shape = (dgp.sx, 2) + sizes + (sy,)
    grids = np.indices(shape)
    flat = [g.ravel() for g in grids]
    x_idx, r_idx = flat[0], flat[1]
    m_idx = flat[2 : 2 + dgp.n_blocks]
    y_idx = flat[-1]

    prob = dgp.p_x[x_idx] * np.where(r_idx == 1, dgp.p_r1[x_idx], 1.0 - dgp.p_r1[x_idx])
    for k, med in enumerate(dgp.mediators, start=1):
        idx = (x_idx, r_idx) + tuple(m_idx[j] for j in range(k))
        prob = prob * med.table[idx]
    prob = prob * dgp.p_y[(x_idx, r_idx) + tuple(m_idx) + (y_idx,)]

    live = prob > 0
    states = SampledStates(x_idx=x_idx[live], m_idx=[m[live] for m in m_idx], y_idx=y_idx[live])
    q = exact_nuisances(dgp).nuisance_set(states, estimand)
    h = gamma_summands(estimand, dgp.y_values[y_idx[live]], r_idx[live].astype(float), q)
    return float(np.sum(prob[live] * h))


@dataclass
class SampledStates:
    """Category indices of sampled rows (needed for exact-nuisance lookup)."""

    x_idx: np.ndarray
    m_idx: list[np.ndarray]
    y_idx: np.ndarray


def _draw_categorical(prob_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(prob_rows, axis=1)
    u = rng.random(prob_rows.shape[0])
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, prob_rows.shape[1] - 1)


def sample(dgp: DiscreteDgp, n: int, seed: int = 0) -> tuple[AnalysisFrame, SampledStates]:
    """Draw n observations from the observed-data law of the DGP."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    x_idx = _draw_categorical(np.tile(dgp.p_x, (n, 1)), rng)
    pi = dgp.p_r1[x_idx]
    r = (rng.random(n) < pi).astype(np.int8)
    m_idx: list[np.ndarray] = []
    for k, med in enumerate(dgp.mediators, start=1):
        rows = med.table[(x_idx, r) + tuple(m_idx)]
        m_idx.append(_draw_categorical(rows, rng))
    y_rows = dgp.p_y[(x_idx, r) + tuple(m_idx)]
    y_idx = _draw_categorical(y_rows, rng)

    frame = AnalysisFrame(
        x=dgp.x_values[x_idx],
        r=r,
        m_blocks=tuple(med.values[idx][:, None] for med, idx in zip(dgp.mediators, m_idx)),
        y=dgp.y_values[y_idx],
        covariate_names=tuple(f"x{j+1}" for j in range(dgp.x_values.shape[1])),
        block_names=tuple((f"m{k+1}",) for k in range(dgp.n_blocks)),
    )
    return frame, SampledStates(x_idx=x_idx, m_idx=m_idx, y_idx=y_idx)


def population_frame(dgp: DiscreteDgp, scale: int) -> tuple[AnalysisFrame, SampledStates]:
    """Expand the joint law into a finite frame with integer row multiplicities.

    Requires every configuration probability times ``scale`` to be an integer
    (e.g. dyadic tables); on such a frame empirical conditional means equal
    the population tables exactly.
    """
    sizes = dgp.sizes
    sy = dgp.y_values.shape[0]
    shape = (dgp.sx, 2) + sizes + (sy,)
    grids = np.indices(shape)
    flat = [g.ravel() for g in grids]
    x_idx, r_idx = flat[0], flat[1]
    m_idx = flat[2 : 2 + dgp.n_blocks]
    y_idx = flat[-1]
    prob = dgp.p_x[x_idx] * np.where(r_idx == 1, dgp.p_r1[x_idx], 1.0 - dgp.p_r1[x_idx])
    for k, med in enumerate(dgp.mediators, start=1):
        prob = prob * med.table[(x_idx, r_idx) + tuple(m_idx[j] for j in range(k))]
    prob = prob * dgp.p_y[(x_idx, r_idx) + tuple(m_idx) + (y_idx,)]
    counts = prob * scale
    rounded = np.rint(counts)
    if np.abs(counts - rounded).max() > 1e-9:
        raise OracleError("scale does not make every configuration count integral")
    reps = rounded.astype(np.int64)
    keep = np.repeat(np.arange(prob.size), reps)
    states = SampledStates(
        x_idx=x_idx[keep], m_idx=[m[keep] for m in m_idx], y_idx=y_idx[keep]
    )
    frame = AnalysisFrame(
        x=dgp.x_values[states.x_idx],
        r=r_idx[keep].astype(np.int8),
        m_blocks=tuple(med.values[idx][:, None] for med, idx in zip(dgp.mediators, states.m_idx)),
        y=dgp.y_values[states.y_idx],
        covariate_names=tuple(f"x{j+1}" for j in range(dgp.x_values.shape[1])),
        block_names=tuple((f"m{k+1}",) for k in range(dgp.n_blocks)),
    )
    return frame, states


def cascade_mc(dgp: DiscreteDgp, estimand: EstimandId, n_draws: int, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo mean of the counterfactual cascade; returns (mean, se).

    An oracle independent of :func:`enumerate_gamma`: mediators are drawn at
    the estimand's arms and the outcome at r0, then averaged.
    """
    estimand.validate(dgp.n_blocks)
    arms = estimand.mediator_arms(dgp.n_blocks)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2718, n_draws]))
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = min(n_draws, 1_000_000)
    while done < n_draws:
        m = min(chunk, n_draws - done)
        x_idx = _draw_categorical(np.tile(dgp.p_x, (m, 1)), rng)
        m_idx: list[np.ndarray] = []
        for k, med in enumerate(dgp.mediators, start=1):
            arm = np.full(m, arms[k - 1])
            rows = med.table[(x_idx, arm) + tuple(m_idx)]
            m_idx.append(_draw_categorical(rows, rng))
        r0 = np.full(m, estimand.r0)
        y_rows = dgp.p_y[(x_idx, r0) + tuple(m_idx)]
        y = dgp.y_values[_draw_categorical(y_rows, rng)]
        total += float(y.sum())
        total_sq += float((y**2).sum())
        done += m
    mean = total / n_draws
    var = max(total_sq / n_draws - mean**2, 0.0)
    return mean, float(np.sqrt(var / n_draws))
