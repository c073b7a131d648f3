"""Simulation DGPs, counterfactual truths, and the replication-grid harness.

Two synthetic generators are built in, plus discrete-table DGPs handled by
the enumeration oracle:

* ``sim1_meps_like`` - three covariates, four ordered mediator blocks (three
  of them bivariate with correlated latent normals), and a zero-inflated
  outcome whose positive part is lognormal; analyzed on the composite
  indicator-times-log scale.
* ``sim2_misspec`` - four uniform covariates, four univariate normal
  mediators, normal outcome; every nuisance is exactly a main-effects GLM, so
  misspecification can be injected by swapping in the transformed covariates
  x_false = (x1^2, e^x2, x3^0.3, (x4 + x3^0.3)/(e^x2 + x1^2)).

``run_grid`` replicates estimation over (estimand x n x method) cells with
per-replicate seeds ``base_seed + rep`` and aggregates bias/SD/MSE/coverage
and the root-n-scaled diagnostics. For sim2 the generating model is linear-
Gaussian, so exact nuisance functions and exact counterfactual means are
available in closed form; the grid can use the exact influence function as a
control variate to measure small biases precisely (``oracle_centering``).
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .data import AnalysisFrame
from .estimators import estimate, gamma_summands
from .nuisance import EstimandId, NuisanceCache, NuisanceLearners, NuisanceSet, fit_all
from .learners import default_binary_sl, default_continuous_sl
from . import oracle as oracle_mod

DGP_KINDS = ("sim1_meps_like", "sim2_misspec", "discrete_toy")

SIM2_COEFFS = {
    "V_R": np.array([-0.10, 1.00, 0.20, -0.40, 0.80]),
    "V_M1": np.array([-0.13, 0.23, -0.18, 0.15, -0.16, 0.13]),
    "V_M2": np.array([-0.11, -0.06, 0.20, 0.25, 0.02, -0.12, 0.16]),
    "V_M3": np.array([-0.24, -0.08, -0.15, 0.03, 0.14, 0.06, -0.14, 0.09]),
    "V_M4": np.array([-0.13, -0.09, -0.04, 0.10, -0.25, -0.05, -0.08, 0.19, -0.20]),
    "V_Y": np.array([0.43, 0.29, 0.28, -0.26, -0.38, 0.18, 0.39, -0.22, -0.13, 0.28]),
}

SIM1_COEFFS = {
    "V_R": np.array([-0.34, 0.38, -0.24, 0.31, -0.44]),
    "V_M11": np.array([-0.09, 0.56, 0.26, 0.23, -0.28]),
    "V_M12": np.array([-0.43, 0.44, 0.17, 0.33, -0.33]),
    "V_M2": np.array([-0.15, 0.80, 0.36, 0.16, 0.48, -0.23, 0.39]),
    "V_M31": np.array([-0.23, 0.61, 0.23, 0.35, 0.48, -0.24, 0.24, 0.34]),
    "V_M32": np.array([-0.46, 0.57, 0.33, 0.21, 0.23, 0.13, -0.16, -0.12]),
    "V_M41": np.array([-0.50, 0.31, 0.48, 0.17, 0.40, 0.18, 0.37, 0.39, -0.38]),
    "V_M42": np.array([-0.47, 0.45, 0.31, 0.43, 0.14, 0.39, 0.44, -0.36, -0.49]),
    "V_Y": np.array([0.61, 0.57, 0.53, 0.45, 0.81, 0.87, 0.92, 0.23, 0.37, 0.69, 0.95, -0.47, 0.14, -0.64]),
}

_LATENT_CHOL = np.linalg.cholesky(np.array([[1.0, 0.5], [0.5, 1.0]]))


class SimulationError(ValueError):
    """Invalid DGP specification or grid request."""


@dataclass(frozen=True)
class DgpSpec:
    kind: str
    coeffs: dict = field(default_factory=dict)
    seed: int = 0
    tables: "oracle_mod.DiscreteDgp | None" = None

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise SimulationError(f"unknown DGP kind {self.kind!r}")
        if self.kind == "discrete_toy":
            if self.tables is None:
                raise SimulationError("discrete_toy needs probability tables")
            return
        defaults = SIM1_COEFFS if self.kind == "sim1_meps_like" else SIM2_COEFFS
        merged = {}
        for name, default in defaults.items():
            value = np.asarray(self.coeffs.get(name, default), dtype=float)
            if value.shape != default.shape:
                raise SimulationError(f"{name} must have length {default.shape[0]}")
            merged[name] = value
        object.__setattr__(self, "coeffs", merged)

    @property
    def n_blocks(self) -> int:
        if self.kind == "discrete_toy":
            return self.tables.n_blocks
        return 4


def _rng(seed: int, stream: int, chunk: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(chunk)]))


# ---------------------------------------------------------------------------
# sim2: four uniform covariates, normal mediators and outcome
# ---------------------------------------------------------------------------

def _sim2_columns(spec: DgpSpec, n: int, seed: int, chunk: int = 0, arms: tuple | None = None, r0: int | None = None):
    """Draw the sim2 cascade; with ``arms`` set, draws the counterfactual one."""
    c = spec.coeffs
    x = _rng(seed, 0, chunk).random((n, 4))
    if arms is None:
        r = (_rng(seed, 1, chunk).random(n) < expit(np.column_stack([np.ones(n), x]) @ c["V_R"])).astype(float)
        r_for = [r] * 4
        r_y = r
    else:
        r_for = [np.full(n, float(a)) for a in arms]
        r_y = np.full(n, float(r0))
    ms = []
    for k in range(1, 5):
        design = np.column_stack([np.ones(n), x, r_for[k - 1]] + ms)
        mean = design @ c[f"V_M{k}"]
        ms.append(mean + _rng(seed, 1 + k, chunk).standard_normal(n))
    design_y = np.column_stack([np.ones(n), x, r_y] + ms)
    ey = design_y @ c["V_Y"]
    return x, r_for, ms, ey


def _generate_sim2(spec: DgpSpec, n: int, seed: int) -> AnalysisFrame:
    x, r_for, ms, ey = _sim2_columns(spec, n, seed)
    r = r_for[0]
    y = ey + _rng(seed, 6).standard_normal(n)
    return AnalysisFrame(
        x=x,
        r=r.astype(np.int8),
        m_blocks=tuple(m[:, None] for m in ms),
        y=y,
        scale_applied="raw",
        covariate_names=("x1", "x2", "x3", "x4"),
        block_names=(("m1",), ("m2",), ("m3",), ("m4",)),
    )


class Sim2Exact:
    """Closed-form conditional means and probabilities of the sim2 cascade.

    Linear forms live on the basis [1, x1..x4, r, m1..m4]; conditioning on a
    group arm or integrating a mediator out at an arm folds coefficients into
    the remaining ones.
    """

    R_POS = 5

    def __init__(self, spec: DgpSpec):
        if spec.kind != "sim2_misspec":
            raise SimulationError("closed-form nuisances exist for sim2 only")
        self.c = spec.coeffs
        self.m_forms = []
        for k in range(1, 5):
            form = np.zeros(10)
            form[: 5 + k] = self.c[f"V_M{k}"]
            self.m_forms.append(form)
        self.y_form = self.c["V_Y"].copy()

    def _fold_r(self, form: np.ndarray, arm: int) -> np.ndarray:
        out = form.copy()
        out[0] += out[self.R_POS] * arm
        out[self.R_POS] = 0.0
        return out

    def _fold_m(self, form: np.ndarray, j: int, arm: int) -> np.ndarray:
        """Replace m_j by its conditional mean at the given arm."""
        pos = self.R_POS + j
        coef = form[pos]
        out = form.copy()
        out[pos] = 0.0
        return out + coef * self._fold_r(self.m_forms[j - 1], arm)

    def mu_form(self, k: int, r0: int) -> np.ndarray:
        form = self._fold_r(self.y_form, r0)
        for j in range(4, k, -1):
            form = self._fold_m(form, j, r0)
        return form

    def b_form(self, k: int, r0: int, rk: int) -> np.ndarray:
        return self._fold_m(self.mu_form(k, r0), k, rk)

    def c_form(self, k: int, r0: int, rk: int, r1: int) -> np.ndarray:
        form = self.b_form(k, r0, rk)
        for j in range(k - 1, 0, -1):
            form = self._fold_m(form, j, r1)
        return form

    def c_mu_form(self, k: int, r0: int, r1: int) -> np.ndarray:
        form = self.mu_form(k, r0)
        for j in range(k, 0, -1):
            form = self._fold_m(form, j, r1)
        return form

    def gamma(self, estimand: EstimandId) -> float:
        arms = estimand.mediator_arms(4)
        form = self._fold_r(self.y_form, estimand.r0)
        for j in range(4, 0, -1):
            form = self._fold_m(form, j, arms[j - 1])
        return float(form[0] + 0.5 * form[1:5].sum())

    def _basis(self, frame: AnalysisFrame) -> np.ndarray:
        n = frame.n
        return np.column_stack([np.ones(n), frame.x, np.zeros(n), frame.m_upto(4)])

    def pi_vec(self, frame: AnalysisFrame) -> np.ndarray:
        return expit(np.column_stack([np.ones(frame.n), frame.x]) @ self.c["V_R"])

    def g_vec(self, frame: AnalysisFrame, k: int) -> np.ndarray:
        """P(R=1 | m_1..k, x): the Gaussian likelihood ratio telescopes to a
        logistic-linear form in (x, m_1..k)."""
        basis = self._basis(frame)
        lo = logit(self.pi_vec(frame))
        m = frame.m_upto(4)
        for j in range(1, k + 1):
            a0 = basis @ self._fold_r(self.m_forms[j - 1], 0)
            a1 = basis @ self._fold_r(self.m_forms[j - 1], 1)
            lo = lo + (a1 - a0) * m[:, j - 1] - (a1**2 - a0**2) / 2.0
        return expit(lo)

    def nuisance_set(self, frame: AnalysisFrame, estimand: EstimandId) -> NuisanceSet:
        basis = self._basis(frame)
        q = NuisanceSet(estimand=estimand, pi=self.pi_vec(frame), delta=0.0)
        kind = estimand.kind
        if kind in ("dis", "adv"):
            q.mu[0] = basis @ self.c_mu_form(4, estimand.r0, estimand.r0)
        elif kind in ("direct", "sequential"):
            k = estimand.k if kind == "sequential" else 4
            q.g[k] = self.g_vec(frame, k)
            q.mu[k] = basis @ self.mu_form(k, 1)
            q.C_mu = basis @ self.c_mu_form(k, 1, 0)
        else:
            k = estimand.k
            q.g[k] = self.g_vec(frame, k)
            if k >= 2:
                q.g[k - 1] = self.g_vec(frame, k - 1)
            q.mu[k] = basis @ self.mu_form(k, 0)
            q.B[k] = basis @ self.b_form(k, 0, 1)
            q.C_B[k] = q.B[k] if k == 1 else basis @ self.c_form(k, 0, 1, estimand.c_stratum)
        return q


# ---------------------------------------------------------------------------
# sim1: MEPS-like zero-inflated cascade
# ---------------------------------------------------------------------------

def _sim1_cascade(spec: DgpSpec, n: int, seed: int, chunk: int = 0, arms: tuple | None = None, r0: int | None = None):
    """Draw the sim1 cascade; returns (x_cols, r, blocks, y_star, extras).

    With ``arms`` given, the cascade is counterfactual: each mediator block
    uses its own arm wherever R enters its equation, and the outcome linear
    predictor uses r0.
    """
    c = spec.coeffs
    u = _rng(seed, 0, chunk).random((n, 3))
    x1, x2 = 2.0 * u[:, 0], 2.0 * u[:, 1]
    x3 = (u[:, 2] < 0.5).astype(float)

    if arms is None:
        feats_r = np.column_stack([
            np.ones(n), np.sqrt(x1), np.sqrt(x1) * x2**1.5 * x3, x2**2, x2 / (1.0 + x1 + x3),
        ])
        r = (_rng(seed, 1, chunk).random(n) < expit(feats_r @ c["V_R"])).astype(float)
        r_for = [r] * 4
        r_y = r
    else:
        r = None
        r_for = [np.full(n, float(a)) for a in arms]
        r_y = np.full(n, float(r0))

    # block 1: bivariate latent normal, continuous M11 and binary M12
    r1 = r_for[0]
    mean11 = np.column_stack([np.ones(n), r1, x1 * x2, np.sqrt(x2) * x3, r1 * x3]) @ c["V_M11"]
    mean12 = np.column_stack([np.ones(n), r1, x1**2, x2, x3]) @ c["V_M12"]
    z1 = _rng(seed, 2, chunk).standard_normal((n, 2)) @ _LATENT_CHOL.T
    m11 = mean11 + z1[:, 0]
    m12 = (_rng(seed, 3, chunk).random(n) < expit(mean12 + z1[:, 1])).astype(float)

    r2 = r_for[1]
    feats2 = np.column_stack([np.ones(n), r2, r2 * x3, r2 * m11, m12 * x2, x1, m11 / (1.0 + x2)])
    m2 = (_rng(seed, 4, chunk).random(n) < expit(feats2 @ c["V_M2"])).astype(float)

    r3 = r_for[2]
    mean31 = np.column_stack([np.ones(n), r3, r3 * m11, m12, r3 * m2, x1, x2, r3 * x3]) @ c["V_M31"]
    mean32 = np.column_stack([np.ones(n), r3, m11, m12, r3 * m2, np.sqrt(x1), x2, x3]) @ c["V_M32"]
    z3 = _rng(seed, 5, chunk).standard_normal((n, 2)) @ _LATENT_CHOL.T
    u3 = _rng(seed, 6, chunk).random((n, 2))
    m31 = (u3[:, 0] < expit(mean31 + z3[:, 0])).astype(float)
    m32 = (u3[:, 1] < expit(mean32 + z3[:, 1])).astype(float)

    r4 = r_for[3]
    mean41 = np.column_stack([np.ones(n), r4, m11, m12, m2, m31 * m32, r4 * x1, x2, x2 * x3]) @ c["V_M41"]
    mean42 = np.column_stack([np.ones(n), r4, m11, m12, m2, m31 * m32, x1, x2, x3]) @ c["V_M42"]
    z4 = _rng(seed, 7, chunk).standard_normal((n, 2)) @ _LATENT_CHOL.T
    m41 = mean41 + z4[:, 0]
    m42 = (_rng(seed, 8, chunk).random(n) < expit(mean42 + z4[:, 1])).astype(float)

    feats_y = np.column_stack([
        np.ones(n), r_y, m11 * np.sqrt(x1), m12 * x2**2, m2 * x1**3 * np.sqrt(x2),
        m31 * np.exp(x1**0.1), r_y * m32, m41, m42, m41 * x1, r_y * m2 * x2,
        np.cos(x1 * x2), x3, np.sqrt(x1 + x2),
    ])
    y_star = feats_y @ c["V_Y"]
    x_cols = np.column_stack([x1, x2, x3])
    blocks = (
        np.column_stack([m11, m12]),
        m2[:, None],
        np.column_stack([m31, m32]),
        np.column_stack([m41, m42]),
    )
    return x_cols, r, blocks, y_star


def _generate_sim1(spec: DgpSpec, n: int, seed: int, return_latents: bool = False):
    x_cols, r, blocks, y_star = _sim1_cascade(spec, n, seed)
    positive = (_rng(seed, 9).random(n) < expit(y_star)).astype(float)
    # positive part is LogNormal(log-mean 0.4 y*, log-sd 0): exactly exp(0.4 y*)
    y_composite = positive * 0.4 * y_star
    frame = AnalysisFrame(
        x=x_cols,
        r=r.astype(np.int8),
        m_blocks=blocks,
        y=y_composite,
        scale_applied="log_positive",
        covariate_names=("x1", "x2", "x3"),
        block_names=(("m11", "m12"), ("m2",), ("m31", "m32"), ("m41", "m42")),
    )
    if return_latents:
        return frame, {"y_star": y_star, "positive": positive, "y_raw": positive * np.exp(0.4 * y_star)}
    return frame


def generate(spec: DgpSpec, n: int, seed: int | None = None, return_latents: bool = False):
    """Draw an analysis-ready frame from the DGP; deterministic given the seed.

    Sampling streams are per variable, so for a fixed seed the n-row draw is
    a prefix of any larger draw (handy for comparing sample sizes).
    """
    if n < 1:
        raise SimulationError("n must be >= 1")
    seed = spec.seed if seed is None else seed
    if spec.kind == "sim2_misspec":
        frame = _generate_sim2(spec, n, seed)
        return (frame, {}) if return_latents else frame
    if spec.kind == "sim1_meps_like":
        return _generate_sim1(spec, n, seed, return_latents)
    frame, states = oracle_mod.sample(spec.tables, n, seed)
    return (frame, {"states": states}) if return_latents else frame


def misspecified_matrix(frame: AnalysisFrame) -> np.ndarray:
    """The nonlinear covariate transform used to misspecify nuisance models."""
    x = frame.x
    if x.shape[1] < 4:
        raise SimulationError("covariate misspecification needs at least 4 covariates")
    x1, x2, x3, x4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    x3t = x3**0.3
    out = x.copy()
    out[:, 0] = x1**2
    out[:, 1] = np.exp(x2)
    out[:, 2] = x3t
    out[:, 3] = (x4 + x3t) / (np.exp(x2) + x1**2)
    return out


def misspecify_covariates(frame: AnalysisFrame) -> AnalysisFrame:
    names = tuple(f"{c}_false" for c in frame.covariate_names)
    return frame.with_covariates(misspecified_matrix(frame), names)


@dataclass(frozen=True)
class TruthValue:
    value: float
    se: float
    n_draws: int


@dataclass(frozen=True)
class RhoSpec:
    """A disparity component: the difference of two counterfactual means.

    Grid cells for a RhoSpec replicate the contrast with its EIF-difference
    confidence interval, as reported for the disparity components.
    """

    minuend: EstimandId
    subtrahend: EstimandId

    @property
    def label(self) -> str:
        return f"rho[{self.minuend.label}-{self.subtrahend.label}]"

    def validate(self, n_blocks: int) -> None:
        self.minuend.validate(n_blocks)
        self.subtrahend.validate(n_blocks)

    @staticmethod
    def mediator(k: int) -> "RhoSpec":
        return RhoSpec(EstimandId.mediator(k), EstimandId.dis())

    @staticmethod
    def direct() -> "RhoSpec":
        return RhoSpec(EstimandId.direct(), EstimandId.dis())

    @staticmethod
    def total() -> "RhoSpec":
        return RhoSpec(EstimandId.adv(), EstimandId.dis())


def _cascade_values(spec: DgpSpec, r0: int, arms: tuple, m: int, seed: int, chunk_id: int) -> np.ndarray:
    """Expected outcome given one counterfactual cascade draw, per row.

    The random streams consumed do not depend on the arms, so two calls with
    the same (seed, chunk) but different arms are coupled draw by draw.
    """
    if spec.kind == "sim2_misspec":
        _, _, _, ey = _sim2_columns(spec, m, seed, chunk_id, arms=arms, r0=r0)
        return ey
    _, _, _, y_star = _sim1_cascade(spec, m, seed, chunk_id, arms=arms, r0=r0)
    return expit(y_star) * 0.4 * y_star


def _enumerated_truth(tables, r0: int, arms: tuple) -> TruthValue:
    agg = tables._grid_weight(arms) * tables.ey_grid(int(r0))
    for ax in range(agg.ndim - 1, 0, -1):
        agg = agg.sum(axis=ax)
    return TruthValue(float(agg @ tables.p_x), 0.0, 0)


def counterfactual_truth(
    spec: DgpSpec,
    r0: int,
    r_vector: tuple[int, ...],
    n_draws: int = 2_000_000,
    seed: int = 977,
) -> TruthValue:
    """Ground-truth counterfactual mean by simulating the structural cascade.

    For continuous DGPs the outcome's conditional mean given the cascade is
    averaged (same estimand, smaller Monte-Carlo error); sim1 truths are on
    the composite indicator-times-log scale the estimators target. Discrete
    DGPs are enumerated exactly instead.
    """
    if len(r_vector) != spec.n_blocks:
        raise SimulationError("r_vector length must match the number of blocks")
    if spec.kind == "discrete_toy":
        return _enumerated_truth(spec.tables, int(r0), tuple(int(a) for a in r_vector))

    total = 0.0
    total_sq = 0.0
    done = 0
    chunk_id = 0
    while done < n_draws:
        m = min(1_000_000, n_draws - done)
        vals = _cascade_values(spec, r0, tuple(r_vector), m, seed, chunk_id)
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
        done += m
        chunk_id += 1
    mean = total / n_draws
    var = max(total_sq / n_draws - mean**2, 0.0)
    return TruthValue(mean, float(np.sqrt(var / n_draws)), n_draws)


def counterfactual_truth_contrast(
    spec: DgpSpec,
    a: "tuple[int, tuple[int, ...]]",
    b: "tuple[int, tuple[int, ...]]",
    n_draws: int = 2_000_000,
    seed: int = 977,
) -> TruthValue:
    """Truth of a difference of counterfactual means with coupled cascades.

    Sharing the random streams between the two arm settings makes the
    difference's Monte-Carlo error far smaller than for independent draws.
    """
    if spec.kind == "discrete_toy":
        va = _enumerated_truth(spec.tables, a[0], tuple(a[1]))
        vb = _enumerated_truth(spec.tables, b[0], tuple(b[1]))
        return TruthValue(va.value - vb.value, 0.0, 0)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk_id = 0
    while done < n_draws:
        m = min(1_000_000, n_draws - done)
        diff = _cascade_values(spec, a[0], tuple(a[1]), m, seed, chunk_id) - _cascade_values(
            spec, b[0], tuple(b[1]), m, seed, chunk_id
        )
        total += float(diff.sum())
        total_sq += float((diff**2).sum())
        done += m
        chunk_id += 1
    mean = total / n_draws
    var = max(total_sq / n_draws - mean**2, 0.0)
    return TruthValue(mean, float(np.sqrt(var / n_draws)), n_draws)


def truth_for(spec: DgpSpec, estimand: "EstimandId | RhoSpec", n_draws: int = 2_000_000, seed: int = 977) -> TruthValue:
    K = spec.n_blocks
    estimand.validate(K)
    if isinstance(estimand, RhoSpec):
        return counterfactual_truth_contrast(
            spec,
            (estimand.minuend.r0, estimand.minuend.mediator_arms(K)),
            (estimand.subtrahend.r0, estimand.subtrahend.mediator_arms(K)),
            n_draws,
            seed,
        )
    return counterfactual_truth(spec, estimand.r0, estimand.mediator_arms(K), n_draws, seed)


# ---------------------------------------------------------------------------
# replication grid
# ---------------------------------------------------------------------------

ALL_FALSE_ROUTE = (("pi", "false"), ("g", "false"), ("mu", "false"), ("B", "false"), ("C_B", "false"), ("C_mu", "false"))


@dataclass(frozen=True)
class MethodSpec:
    """A nuisance-estimation recipe for one grid cell."""

    name: str
    learners: NuisanceLearners = field(default_factory=NuisanceLearners)
    route: tuple[tuple[str, str], ...] = ()
    delta: float = 0.01
    folds: int | None = None


def glm_method(name: str = "glm_correct", route: tuple = (), folds: int | None = None) -> MethodSpec:
    return MethodSpec(name=name, learners=NuisanceLearners(), route=route, folds=folds)


def glm_false_method() -> MethodSpec:
    return glm_method("glm_false", ALL_FALSE_ROUTE)


def sl_method(name: str = "sl") -> MethodSpec:
    return MethodSpec(name=name, learners=NuisanceLearners(binary=default_binary_sl(), continuous=default_continuous_sl()))


def robustness_conditions(estimand: EstimandId) -> tuple[MethodSpec, ...]:
    """The estimand's multiply-robust conditions: in each, only the listed
    nuisances keep the correct covariates and all others use x_false."""
    if not isinstance(estimand, EstimandId):
        raise SimulationError("the misspecification grid applies to counterfactual means, not contrasts")

    def cond(tag: str, false_names: tuple[str, ...]) -> MethodSpec:
        return glm_method(f"robust_{tag}", tuple((nm, "false") for nm in false_names))

    if estimand.kind == "direct":
        return (
            cond("c1_pi_g", ("mu", "C_mu")),
            cond("c2_pi_mu", ("g", "C_mu")),
            cond("c3_cmu_mu", ("pi", "g")),
        )
    if estimand.kind == "mediator" and estimand.k == 1:
        return (
            cond("c1_pi_g", ("mu", "B")),
            cond("c2_pi_mu", ("g", "B")),
            cond("c3_b_mu", ("pi", "g")),
        )
    if estimand.kind == "mediator":
        k = estimand.k
        return (
            cond("c1_pi_gg", ("mu", "B", "C_B")),
            cond("c2_pi_gprev_mu", (f"g{k}", "B", "C_B")),
            cond("c3_pi_b_mu", (f"g{k}", f"g{k-1}", "C_B")),
            cond("c4_cb_b_mu", ("pi", f"g{k}", f"g{k-1}")),
        )
    raise SimulationError(f"no misspecification grid is defined for {estimand.label}")


@dataclass(frozen=True)
class CellResult:
    estimand: str
    n: int
    method: str
    reps: int
    truth: float
    truth_se: float
    bias: float
    sd: float
    mse: float
    coverage: float
    ci_width: float
    sqrt_n_bias: float
    n_var: float
    bias_centered: float | None
    failures: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SimReport:
    cells: tuple[CellResult, ...]
    meta: dict

    def cell(self, estimand: str, n: int, method: str) -> CellResult:
        for c in self.cells:
            if (c.estimand, c.n, c.method) == (estimand, n, method):
                return c
        raise KeyError((estimand, n, method))

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "cells": [c.to_dict() for c in self.cells]}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SimReport":
        payload = json.loads(text)
        return SimReport(tuple(CellResult(**c) for c in payload["cells"]), payload["meta"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = list(CellResult.__dataclass_fields__)
        writer = csv.writer(buf)
        writer.writerow(fields)
        for c in self.cells:
            writer.writerow([getattr(c, f) for f in fields])
        return buf.getvalue()

    def curve_files(self, directory: str, prefix: str = "curves") -> list[str]:
        """Plain-text (gnuplot-ready) root-n-bias and n-variance curves."""
        os.makedirs(directory, exist_ok=True)
        written = []
        pairs = sorted({(c.estimand, c.method) for c in self.cells})
        for est, method in pairs:
            rows = sorted((c.n, c) for c in self.cells if (c.estimand, c.method) == (est, method))
            path = os.path.join(directory, f"{prefix}_{est}_{method}.dat")
            with open(path, "w", encoding="utf-8") as handle:
                handle.write("# n sqrt_n_abs_bias n_var sqrt_n_abs_bias_centered\n")
                for n, c in rows:
                    centered = abs(c.bias_centered) * np.sqrt(n) if c.bias_centered is not None else float("nan")
                    handle.write(f"{n} {abs(c.sqrt_n_bias):.10g} {c.n_var:.10g} {centered:.10g}\n")
            written.append(path)
        return written


def _run_one_rep(args):
    """One replicate: generate data once and estimate every requested target
    from a shared nuisance cache (propensity and g fits are common).

    Targets may be counterfactual means (EstimandId) or disparity contrasts
    (RhoSpec); the latter get EIF-difference confidence intervals.
    """
    spec, targets, n, method, seed, centering, alpha = args
    from scipy.stats import norm

    try:
        frame = generate(spec, n, seed=seed)
        x_alt = None
        if any(v == "false" for _, v in method.route):
            x_alt = misspecified_matrix(frame)
        cache = NuisanceCache(
            frame, method.learners, method.delta, method.folds, seed, x_alt=x_alt, route=dict(method.route)
        )
        exact = Sim2Exact(spec) if centering else None
        z = norm.ppf(1 - alpha / 2)

        def gamma_est(estimand):
            est = estimate(frame, fit_all(frame, estimand, cache=cache))
            hbar = None
            if exact is not None:
                q_true = exact.nuisance_set(frame, estimand)
                hbar = float(np.mean(gamma_summands(estimand, frame.y, frame.r, q_true)))
            return est, hbar

        out = {}
        for target in targets:
            if isinstance(target, RhoSpec):
                a, hbar_a = gamma_est(target.minuend)
                b, hbar_b = gamma_est(target.subtrahend)
                point = a.point - b.point
                se = float(np.sqrt(np.mean((a.eif - b.eif) ** 2) / frame.n))
                hbar = None if hbar_a is None else hbar_a - hbar_b
                out[target.label] = (point, point - z * se, point + z * se, hbar)
            else:
                est, hbar = gamma_est(target)
                lo, hi = est.ci(alpha)
                out[target.label] = (est.point, lo, hi, hbar)
        return ("ok", out)
    except Exception as err:  # noqa: BLE001 - a failed replicate must not kill the grid
        return ("error", repr(err))


def run_grid(
    spec: DgpSpec,
    estimands: tuple[EstimandId, ...],
    n_list: tuple[int, ...],
    reps: int,
    methods: "tuple[MethodSpec, ...] | dict[str, tuple[MethodSpec, ...]]",
    base_seed: int = 0,
    truths: dict[str, TruthValue] | None = None,
    truth_draws: int = 2_000_000,
    truth_seed: int = 977,
    alpha: float = 0.05,
    n_jobs: int = 1,
    oracle_centering: bool = False,
) -> SimReport:
    """Replicate estimation over every (estimand, n, method) cell.

    ``methods`` is either one tuple applied to all estimands or a mapping
    from estimand label to its own tuple (as the robustness grid needs).
    Replicate seeds are ``base_seed + rep``; failures are recorded per cell
    and the run continues. ``oracle_centering`` (sim2 only) additionally
    reports bias measured against the exact-influence-function control
    variate, which strips the leading Monte-Carlo noise from the bias
    estimate without changing its expectation.
    """
    if reps < 1:
        raise SimulationError("reps must be >= 1")
    if oracle_centering and spec.kind != "sim2_misspec":
        raise SimulationError("oracle centering requires the sim2 DGP")
    truths = dict(truths or {})
    for estimand in estimands:
        if estimand.label not in truths:
            truths[estimand.label] = truth_for(spec, estimand, truth_draws, truth_seed)

    gamma_exact = {}
    if oracle_centering:
        exact = Sim2Exact(spec)
        for e in estimands:
            if isinstance(e, RhoSpec):
                gamma_exact[e.label] = exact.gamma(e.minuend) - exact.gamma(e.subtrahend)
            else:
                gamma_exact[e.label] = exact.gamma(e)

    # with a shared method list, all estimands run on the same replicate data;
    # a per-estimand method mapping (robustness grid) runs cells separately
    if isinstance(methods, dict):
        cell_specs = [
            ((estimand,), n, method)
            for estimand in estimands
            for n in n_list
            for method in methods[estimand.label]
        ]
    else:
        cell_specs = [(tuple(estimands), n, method) for n in n_list for method in methods]

    cells: list[CellResult] = []
    executor = ProcessPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    try:
        for cell_estimands, n, method in cell_specs:
            tasks = [
                (spec, cell_estimands, n, method, base_seed + rep, oracle_centering, alpha)
                for rep in range(reps)
            ]
            if executor is not None:
                results = list(executor.map(_run_one_rep, tasks, chunksize=max(1, reps // (4 * n_jobs))))
            else:
                results = [_run_one_rep(t) for t in tasks]
            for estimand in cell_estimands:
                cells.append(
                    _aggregate_cell(
                        estimand, n, method, results, truths[estimand.label], gamma_exact.get(estimand.label)
                    )
                )
    finally:
        if executor is not None:
            executor.shutdown()

    meta = {
        "dgp": spec.kind,
        "base_seed": base_seed,
        "reps": reps,
        "alpha": alpha,
        "truth_draws": truth_draws,
        "truth_seed": truth_seed,
        "truths": {k: [v.value, v.se] for k, v in truths.items()},
        "oracle_centering": oracle_centering,
    }
    return SimReport(tuple(cells), meta)


def _aggregate_cell(estimand, n, method, results, truth: TruthValue, gamma_exact: float | None) -> CellResult:
    ok = [r[1][estimand.label] for r in results if r[0] == "ok"]
    failures = len(results) - len(ok)
    if not ok:
        nan = float("nan")
        return CellResult(
            estimand.label, n, method.name, 0, truth.value, truth.se,
            nan, nan, nan, nan, nan, nan, nan, None, failures,
        )
    points = np.array([r[0] for r in ok])
    lo = np.array([r[1] for r in ok])
    hi = np.array([r[2] for r in ok])
    reps = points.size
    bias = float(points.mean() - truth.value)
    sd = float(points.std(ddof=1)) if reps > 1 else 0.0
    mse = float(np.mean((points - truth.value) ** 2))
    coverage = float(np.mean((lo <= truth.value) & (truth.value <= hi)))
    width = float(np.mean(hi - lo))
    bias_centered = None
    if gamma_exact is not None and ok[0][3] is not None:
        hbar = np.array([r[3] for r in ok])
        bias_centered = float(np.mean(points - hbar) + gamma_exact - truth.value)
    return CellResult(
        estimand=estimand.label,
        n=n,
        method=method.name,
        reps=reps,
        truth=truth.value,
        truth_se=truth.se,
        bias=bias,
        sd=sd,
        mse=mse,
        coverage=coverage,
        ci_width=width,
        sqrt_n_bias=float(np.sqrt(n) * bias),
        n_var=float(n * points.var(ddof=1)) if reps > 1 else 0.0,
        bias_centered=bias_centered,
        failures=failures,
    )
