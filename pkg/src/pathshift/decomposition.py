"""Disparity components assembled from counterfactual-mean estimates.

The natural (reference-zero) report shifts one mediator block at a time
against the all-reference baseline; those components intentionally carry no
aggregate sum, since they are not additive. The sequential report deactivates
blocks cumulatively and telescopes exactly to the total. Results can be
expressed on the difference scale, on the geometric-mean-ratio scale (exp of
log-scale differences, delta-method SEs), or as probability differences when
the pipeline ran on the positive-part indicator outcome.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .data import AnalysisFrame
from .estimators import GammaEstimate, estimate
from .nuisance import EstimandId, NuisanceCache, NuisanceLearners, fit_all

SCALES = ("difference", "geometric_ratio", "probability_difference")
SEQUENTIAL_ADDITIVITY_TOL = 1e-12


class DecompositionError(ValueError):
    """Inconsistent decomposition request."""


@dataclass(frozen=True)
class DisparityComponent:
    label: str
    point: float
    se: float
    ci: tuple[float, float]
    p_value: float
    scale: str = "difference"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise DecompositionError(f"unknown component scale {self.scale!r}")
        if not (self.ci[0] <= self.point <= self.ci[1]):
            raise DecompositionError(f"component {self.label}: CI does not contain the point estimate")
        if not (0.0 <= self.p_value <= 1.0):
            raise DecompositionError(f"component {self.label}: p-value outside [0, 1]")


@dataclass(frozen=True)
class DecompositionReport:
    components: tuple[DisparityComponent, ...]
    estimand_meta: dict
    diagnostics: dict

    def component(self, label: str) -> DisparityComponent:
        for comp in self.components:
            if comp.label == label:
                return comp
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "components": [
                {
                    "label": c.label,
                    "point": c.point,
                    "se": c.se,
                    "ci": list(c.ci),
                    "p_value": c.p_value,
                    "scale": c.scale,
                }
                for c in self.components
            ],
            "estimand_meta": self.estimand_meta,
            "diagnostics": self.diagnostics,
        }

    @staticmethod
    def from_dict(payload: dict) -> "DecompositionReport":
        comps = tuple(
            DisparityComponent(
                label=c["label"],
                point=c["point"],
                se=c["se"],
                ci=(c["ci"][0], c["ci"][1]),
                p_value=c["p_value"],
                scale=c["scale"],
            )
            for c in payload["components"]
        )
        return DecompositionReport(comps, payload["estimand_meta"], payload["diagnostics"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DecompositionReport":
        return DecompositionReport.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["label", "value", "ci_lo", "ci_hi", "p"])
        for c in self.components:
            writer.writerow([c.label, repr(c.point), repr(c.ci[0]), repr(c.ci[1]), repr(c.p_value)])
        return buf.getvalue()


def contrast(a: GammaEstimate, b: GammaEstimate, label: str = "contrast", alpha: float = 0.05) -> DisparityComponent:
    """Difference a - b with SE from the rowwise EIF difference and a Wald CI."""
    if a.n != b.n:
        raise DecompositionError("contrast requires estimates computed on the same rows")
    point = a.point - b.point
    eif = a.eif - b.eif
    se = float(np.sqrt(np.mean(eif**2) / a.n))
    z = norm.ppf(1 - alpha / 2)
    ci = (point - z * se, point + z * se)
    if se > 0:
        p_value = float(2.0 * norm.sf(abs(point) / se))
    else:
        p_value = 1.0 if point == 0 else 0.0
    return DisparityComponent(label=label, point=point, se=se, ci=ci, p_value=p_value)


def to_geometric_scale(c: DisparityComponent) -> DisparityComponent:
    """Map a log-scale difference to a geometric-mean ratio via the delta method.

    The p-value is untouched: testing ratio = 1 is the same test as
    difference = 0.
    """
    if c.scale != "difference":
        raise DecompositionError("geometric scale applies to difference-scale components")
    point = float(np.exp(c.point))
    return DisparityComponent(
        label=c.label,
        point=point,
        se=point * c.se,
        ci=(float(np.exp(c.ci[0])), float(np.exp(c.ci[1]))),
        p_value=c.p_value,
        scale="geometric_ratio",
    )


def smearing_adjust(log_scale_diff: float, residuals: np.ndarray, normal: bool = False) -> float:
    """Retransformation toward the arithmetic scale: exp(diff) times a smearing factor.

    The empirical factor is mean(exp(residuals)); with ``normal=True`` the
    lognormal-moment variant exp(var/2) is used instead.
    """
    residuals = np.asarray(residuals, dtype=float)
    if not np.isfinite(residuals).all():
        raise DecompositionError("smearing residuals must be finite")
    if normal:
        factor = float(np.exp(np.var(residuals) / 2.0))
    else:
        factor = float(np.mean(np.exp(residuals)))
    return float(np.exp(log_scale_diff)) * factor


@dataclass(frozen=True)
class DecompositionConfig:
    learners: NuisanceLearners = field(default_factory=NuisanceLearners)
    delta: float = 0.01
    crossfit_folds: int | None = None
    alpha: float = 0.05
    scale: str = "difference"
    seed: int = 0

    def __post_init__(self):
        if self.scale not in ("difference", "geometric", "probability"):
            raise DecompositionError(f"unknown reporting scale {self.scale!r}")


def _component_scale(config: DecompositionConfig, frame: AnalysisFrame) -> str:
    if config.scale == "geometric":
        if frame.scale_applied != "log_positive":
            raise DecompositionError("geometric scale requires the log_positive outcome transform")
        return "geometric_ratio"
    if config.scale == "probability":
        if frame.scale_applied != "positive_indicator":
            raise DecompositionError("probability scale requires the positive_indicator outcome transform")
        return "probability_difference"
    return "difference"


def _finalize(components: list[DisparityComponent], scale: str) -> tuple[DisparityComponent, ...]:
    if scale == "geometric_ratio":
        return tuple(to_geometric_scale(c) for c in components)
    if scale == "probability_difference":
        return tuple(replace(c, scale="probability_difference") for c in components)
    return tuple(components)


def _meta(frame: AnalysisFrame, config: DecompositionConfig, kind: str) -> dict:
    return {
        "decomposition": kind,
        "reference_level": frame.group_labels[0],
        "comparison_level": frame.group_labels[1],
        "n": int(frame.n),
        "n_reference": int((frame.r == 0).sum()),
        "n_comparison": int((frame.r == 1).sum()),
        "n_blocks": frame.n_blocks,
        "scale": config.scale,
        "outcome_scale": frame.scale_applied,
        "alpha": config.alpha,
    }


def decompose_natural(frame: AnalysisFrame, config: DecompositionConfig | None = None) -> DecompositionReport:
    """Reference-zero decomposition: total, per-block shifts, outcome-attributed,
    and the residuals of each against the total."""
    config = config or DecompositionConfig()
    out_scale = _component_scale(config, frame)
    cache = NuisanceCache(frame, config.learners, config.delta, config.crossfit_folds, config.seed)
    K = frame.n_blocks

    def gamma(estimand: EstimandId) -> GammaEstimate:
        return estimate(frame, fit_all(frame, estimand, cache=cache))

    g_dis = gamma(EstimandId.dis())
    g_adv = gamma(EstimandId.adv())
    g_direct = gamma(EstimandId.direct())
    g_med = {k: gamma(EstimandId.mediator(k)) for k in range(1, K + 1)}

    a = config.alpha
    components = [contrast(g_adv, g_dis, "total", a)]
    components += [contrast(g_med[k], g_dis, f"mediator_{k}", a) for k in range(1, K + 1)]
    components.append(contrast(g_direct, g_dis, "outcome_attributed", a))
    components += [contrast(g_adv, g_med[k], f"residual_mediator_{k}", a) for k in range(1, K + 1)]
    components.append(contrast(g_adv, g_direct, "residual_outcome", a))

    return DecompositionReport(
        components=_finalize(components, out_scale),
        estimand_meta=_meta(frame, config, "natural"),
        diagnostics=cache.diagnostics(),
    )


def decompose_sequential(frame: AnalysisFrame, config: DecompositionConfig | None = None) -> DecompositionReport:
    """Cumulative decomposition whose components telescope to the total."""
    config = config or DecompositionConfig()
    out_scale = _component_scale(config, frame)
    cache = NuisanceCache(frame, config.learners, config.delta, config.crossfit_folds, config.seed)
    K = frame.n_blocks

    def gamma(estimand: EstimandId) -> GammaEstimate:
        return estimate(frame, fit_all(frame, estimand, cache=cache))

    g_dis = gamma(EstimandId.dis())
    g_adv = gamma(EstimandId.adv())
    g_star = {k: gamma(EstimandId.sequential(k)) for k in range(1, K + 1)}

    a = config.alpha
    components = [contrast(g_adv, g_dis, "total", a)]
    chain = [g_adv] + [g_star[k] for k in range(1, K + 1)] + [g_dis]
    for k in range(1, K + 1):
        components.append(contrast(chain[k - 1], chain[k], f"sequential_{k}", a))
    components.append(contrast(g_star[K], g_dis, "sequential_outcome", a))

    total = components[0].point
    parts = sum(c.point for c in components[1:])
    if abs(parts - total) > SEQUENTIAL_ADDITIVITY_TOL * max(1.0, abs(total)):
        raise DecompositionError("sequential components failed to telescope to the total")

    return DecompositionReport(
        components=_finalize(components, out_scale),
        estimand_meta=_meta(frame, config, "sequential"),
        diagnostics=cache.diagnostics(),
    )


def decompose(frame: AnalysisFrame, config: DecompositionConfig | None = None, kind: str = "natural"):
    if kind == "natural":
        return decompose_natural(frame, config)
    if kind == "sequential":
        return decompose_sequential(frame, config)
    raise DecompositionError(f"unknown decomposition kind {kind!r}")
