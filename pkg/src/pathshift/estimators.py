"""One-step corrected estimators of the counterfactual means, with EIF-based SEs.

Each estimator averages a per-observation summand h(O_i) built from the
fitted nuisances; the centered summand is the estimated influence function,
whose empirical second moment yields the analytic variance. The summands:

  dis/adv   1(R=r)/P(R=r|X) * (Y - m_r(X)) + m_r(X)
  direct    R/(1-pi) * (1-g_K)/g_K * (Y - mu_K) + (1-R)/(1-pi) * (mu_K - C) + C
  mediator  (1-R)/(1-pi) * g_k/(1-g_k) * (1-g_{k-1})/g_{k-1} * (Y - mu_k)
              + R/(1-pi) * (1-g_{k-1})/g_{k-1} * (mu_k - B_k)
              + (1-R)/(1-pi) * (B_k - C) + C
  (k = 1 uses the reduced form with pi in the denominators and C == B_1)

The sequential (cumulative) counterfactual mean for block k telescopes to the
direct form computed on the first k blocks only, so it shares that code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AnalysisFrame
from .nuisance import EstimandId, NuisanceSet

K1_EQUIVALENCE_TOL = 1e-12


class EstimationError(ValueError):
    """The nuisance set is incomplete or numerically unusable."""


@dataclass(frozen=True)
class GammaEstimate:
    """Point estimate with its estimated influence-function values."""

    estimand: EstimandId
    point: float
    eif: np.ndarray  # centered: mean is 0 by construction
    n: int

    @property
    def se(self) -> float:
        return float(np.sqrt(np.mean(self.eif**2) / self.n))

    def ci(self, alpha: float = 0.05) -> tuple[float, float]:
        from scipy.stats import norm

        z = norm.ppf(1 - alpha / 2)
        return (self.point - z * self.se, self.point + z * self.se)


def _require(condition: bool, what: str) -> None:
    if not condition:
        raise EstimationError(f"nuisance set is missing {what}")


def _check_finite(weights: np.ndarray) -> None:
    if not np.isfinite(weights).all():
        raise EstimationError(
            "non-finite inverse-probability weight; check the truncation level delta"
        )


def gamma_terms(estimand: EstimandId, y: np.ndarray, r: np.ndarray, q: NuisanceSet) -> dict[str, np.ndarray]:
    """Per-observation pieces of the one-step summand, keyed by role.

    The full summand is the elementwise sum of the returned vectors; exposing
    the pieces lets tests assert the plug-in + correction decomposition.
    """
    r = np.asarray(r, dtype=float)
    y = np.asarray(y, dtype=float)
    pi = q.pi
    kind = estimand.kind

    if kind in ("dis", "adv"):
        _require(0 in q.mu, "the covariate-only outcome regression mu[0]")
        m = q.mu[0]
        arm = 1.0 if kind == "adv" else 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            w = (r == arm) / (pi if arm == 1.0 else 1.0 - pi)
        _check_finite(w)
        return {"residual": w * (y - m), "c": m}

    if kind in ("direct", "sequential"):
        _require(bool(q.mu), "the outcome regression mu")
        k = estimand.k if kind == "sequential" else max(q.mu)
        _require(k in q.g and k in q.mu and q.C_mu is not None, f"g[{k}], mu[{k}] and C_mu")
        g = q.g[k]
        mu = q.mu[k]
        c = q.C_mu
        with np.errstate(divide="ignore", invalid="ignore"):
            w_res = r / (1.0 - pi) * (1.0 - g) / g
            w_aug = (1.0 - r) / (1.0 - pi)
        _check_finite(w_res)
        _check_finite(w_aug)
        return {"residual": w_res * (y - mu), "augmentation": w_aug * (mu - c), "c": c}

    if kind == "mediator":
        k = estimand.k
        _require(k in q.g and k in q.mu and k in q.B and k in q.C_B, f"g[{k}], mu[{k}], B[{k}], C_B[{k}]")
        g_k = q.g[k]
        mu = q.mu[k]
        b = q.B[k]
        c = q.C_B[k]
        if k == 1:
            # reduced form: g_0 == pi cancels one (1 - pi) factor
            with np.errstate(divide="ignore", invalid="ignore"):
                w_res = (1.0 - r) / pi * g_k / (1.0 - g_k)
                w_aug = r / pi
            _check_finite(w_res)
            _check_finite(w_aug)
            return {"residual": w_res * (y - mu), "augmentation": w_aug * (mu - b), "c": b}
        g_prev = q.g[k - 1]
        return _mediator_general_terms(y, r, pi, g_prev, g_k, mu, b, c)

    raise EstimationError(f"unknown estimand kind {kind!r}")


def _mediator_general_terms(y, r, pi, g_prev, g_k, mu, b, c) -> dict[str, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_k = g_k / (1.0 - g_k)
        ratio_prev = (1.0 - g_prev) / g_prev
        w_res = (1.0 - r) / (1.0 - pi) * ratio_k * ratio_prev
        w_aug1 = r / (1.0 - pi) * ratio_prev
        w_aug2 = (1.0 - r) / (1.0 - pi)
    _check_finite(w_res)
    _check_finite(w_aug1)
    _check_finite(w_aug2)
    return {
        "residual": w_res * (y - mu),
        "augmentation": w_aug1 * (mu - b),
        "centering_augmentation": w_aug2 * (b - c),
        "c": c,
    }


def gamma_summands(estimand: EstimandId, y: np.ndarray, r: np.ndarray, q: NuisanceSet) -> np.ndarray:
    """Uncentered one-step summand h(O_i); its mean is the point estimate."""
    terms = gamma_terms(estimand, y, r, q)
    total = np.zeros_like(np.asarray(y, dtype=float))
    for vec in terms.values():
        total = total + vec
    if estimand.kind == "mediator" and estimand.k == 1:
        # the reduced k=1 form must agree with the general formula under the
        # structural identities g_0 == pi and C_B1 == B_1
        general = _mediator_general_terms(
            np.asarray(y, float), np.asarray(r, float), q.pi, q.pi, q.g[1], q.mu[1], q.B[1], q.C_B[1]
        )
        total_general = sum(general.values())
        scale = max(1.0, float(np.max(np.abs(total))))
        if not np.allclose(total, total_general, rtol=K1_EQUIVALENCE_TOL, atol=K1_EQUIVALENCE_TOL * scale):
            raise EstimationError("k=1 specialized and general influence formulas disagree")
    return total


def _estimate(frame: AnalysisFrame, q: NuisanceSet, estimand: EstimandId) -> GammaEstimate:
    if q.pi.shape[0] != frame.n:
        raise EstimationError("nuisance predictions do not match the frame")
    h = gamma_summands(estimand, frame.y, frame.r, q)
    point = float(np.mean(h))
    return GammaEstimate(estimand=estimand, point=point, eif=h - point, n=frame.n)


def estimate_gamma_dis(frame: AnalysisFrame, q: NuisanceSet) -> GammaEstimate:
    """AIPW mean of the reference (R=0) group standardized over pooled X."""
    return _estimate(frame, q, EstimandId.dis())


def estimate_gamma_adv(frame: AnalysisFrame, q: NuisanceSet) -> GammaEstimate:
    return _estimate(frame, q, EstimandId.adv())


def estimate_gamma_direct(frame: AnalysisFrame, q: NuisanceSet) -> GammaEstimate:
    return _estimate(frame, q, EstimandId.direct())


def estimate_gamma_mediator(frame: AnalysisFrame, q: NuisanceSet, k: int) -> GammaEstimate:
    return _estimate(frame, q, EstimandId.mediator(k))


def estimate_gamma_sequential(frame: AnalysisFrame, q: NuisanceSet, k: int) -> GammaEstimate:
    """Cumulative counterfactual mean: blocks 1..k at the reference arm.

    For k = K this is definitionally the direct-effect estimand and the
    computation is the identical code path (hence bitwise-equal results).
    """
    return _estimate(frame, q, EstimandId.sequential(k))


def estimate(frame: AnalysisFrame, q: NuisanceSet) -> GammaEstimate:
    """Estimate the estimand recorded in the nuisance set."""
    return _estimate(frame, q, q.estimand)
