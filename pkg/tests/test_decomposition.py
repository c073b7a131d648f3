import numpy as np
import pytest

from pathshift.data import AnalysisFrame
from pathshift.decomposition import (
    DecompositionConfig,
    DecompositionError,
    DecompositionReport,
    DisparityComponent,
    contrast,
    decompose,
    decompose_natural,
    decompose_sequential,
    smearing_adjust,
    to_geometric_scale,
)
from pathshift.estimators import estimate
from pathshift.learners import LearnerSpec
from pathshift.nuisance import EstimandId, NuisanceCache, NuisanceLearners, fit_all
from pathshift.oracle import enumerate_gamma, population_frame
from pathshift.simulation import DgpSpec, generate
from pathshift.toys import toy_dyadic_k2

SATURATED = NuisanceLearners(binary=LearnerSpec("saturated"), continuous=LearnerSpec("saturated"))


def test_contrast_of_identical_estimates_is_null():
    frame = generate(DgpSpec("sim2_misspec"), 500, seed=1)
    est = estimate(frame, fit_all(frame, EstimandId.dis(), seed=0))
    c = contrast(est, est)
    assert c.point == 0.0
    assert c.p_value == 1.0
    assert c.ci[0] <= 0.0 <= c.ci[1]


def test_contrast_requires_matching_rows():
    f1 = generate(DgpSpec("sim2_misspec"), 400, seed=2)
    f2 = generate(DgpSpec("sim2_misspec"), 500, seed=2)
    a = estimate(f1, fit_all(f1, EstimandId.dis(), seed=0))
    b = estimate(f2, fit_all(f2, EstimandId.dis(), seed=0))
    with pytest.raises(DecompositionError, match="same rows"):
        contrast(a, b)


def test_total_contrast_matches_enumeration_on_population():
    dgp = toy_dyadic_k2()
    frame, _ = population_frame(dgp, 2 * 4 * 8 * 8 * 8)
    cache = NuisanceCache(frame, SATURATED, delta=0.0, seed=0)
    adv = estimate(frame, fit_all(frame, EstimandId.adv(), cache=cache))
    dis = estimate(frame, fit_all(frame, EstimandId.dis(), cache=cache))
    rho_total = contrast(adv, dis, "total")
    truth = enumerate_gamma(dgp, EstimandId.adv()) - enumerate_gamma(dgp, EstimandId.dis())
    assert rho_total.point == pytest.approx(truth, abs=1e-10)


# -- scales --------------------------------------------------------------------

def test_geometric_scale_identity_and_delta_method():
    base = DisparityComponent("total", 0.0, 0.05, (-0.098, 0.098), 1.0, "difference")
    geo = to_geometric_scale(base)
    assert geo.point == 1.0
    c = DisparityComponent("total", float(np.log(2.0)), 0.1, (np.log(2) - 0.196, np.log(2) + 0.196), 0.02, "difference")
    geo2 = to_geometric_scale(c)
    assert geo2.point == pytest.approx(2.0, abs=1e-12)
    assert geo2.se == pytest.approx(0.2, abs=1e-12)
    assert geo2.ci[0] == pytest.approx(np.exp(c.ci[0]), abs=1e-12)
    assert geo2.p_value == c.p_value
    with pytest.raises(DecompositionError, match="difference-scale"):
        to_geometric_scale(geo2)


def test_smearing_adjustments():
    assert smearing_adjust(0.3, np.zeros(100)) == pytest.approx(np.exp(0.3), abs=1e-12)
    rng = np.random.default_rng(3)
    resid = rng.normal(0.0, 0.7, 200_000)
    assert smearing_adjust(0.0, resid) == pytest.approx(np.exp(0.49 / 2), rel=0.01)
    # normal-error variant with sd 0.5: multiplier exp(0.125)
    resid_half = np.array([-0.5, 0.5])
    assert smearing_adjust(0.0, resid_half, normal=True) == pytest.approx(np.exp(0.125), abs=1e-12)
    with pytest.raises(DecompositionError, match="finite"):
        smearing_adjust(0.0, np.array([np.nan]))


# -- full decompositions ----------------------------------------------------------

def _global_null_frame(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    r = (rng.random(n) < 0.5).astype(np.int8)
    m1 = 0.6 * x + rng.standard_normal((n, 1))
    m2 = 0.3 * m1 + rng.standard_normal((n, 1))
    y = 0.5 + x[:, 0] + 0.4 * m1[:, 0] + 0.4 * m2[:, 0] + rng.standard_normal(n)
    return AnalysisFrame(x=x, r=r, m_blocks=(m1, m2), y=y)


def test_global_null_components_near_zero():
    frame = _global_null_frame(6000, seed=4)
    report = decompose_natural(frame)
    for comp in report.components:
        assert abs(comp.point) <= 3 * comp.se, comp.label


def test_natural_report_structure_and_no_sum_field():
    frame = generate(DgpSpec("sim2_misspec"), 1200, seed=5)
    report = decompose_natural(frame)
    labels = [c.label for c in report.components]
    assert labels == [
        "total",
        "mediator_1", "mediator_2", "mediator_3", "mediator_4",
        "outcome_attributed",
        "residual_mediator_1", "residual_mediator_2", "residual_mediator_3", "residual_mediator_4",
        "residual_outcome",
    ]
    payload = report.to_dict()
    flat = str(payload).lower()
    assert "sum_of_components" not in flat and "component_sum" not in flat
    assert set(payload) == {"components", "estimand_meta", "diagnostics"}


def test_residuals_complement_their_components():
    frame = generate(DgpSpec("sim2_misspec"), 1500, seed=6)
    report = decompose_natural(frame)
    total = report.component("total").point
    for k in range(1, 5):
        med = report.component(f"mediator_{k}").point
        res = report.component(f"residual_mediator_{k}").point
        assert med + res == pytest.approx(total, abs=1e-12)
    assert report.component("outcome_attributed").point + report.component("residual_outcome").point == pytest.approx(total, abs=1e-12)


def test_sequential_additivity_and_shared_direct_path():
    frame = generate(DgpSpec("sim2_misspec"), 1500, seed=7)
    report = decompose_sequential(frame)
    total = report.component("total").point
    parts = sum(c.point for c in report.components if c.label != "total")
    assert parts == pytest.approx(total, abs=1e-12)


def test_sequential_multiplicativity_on_ratio_scale():
    rng = np.random.default_rng(8)
    raw = generate(DgpSpec("sim2_misspec"), 1500, seed=8)
    frame = AnalysisFrame(
        x=raw.x, r=raw.r, m_blocks=raw.m_blocks, y=raw.y, scale_applied="log_positive",
        covariate_names=raw.covariate_names, block_names=raw.block_names,
    )
    report = decompose_sequential(frame, DecompositionConfig(scale="geometric"))
    total = report.component("total").point
    product = np.prod([c.point for c in report.components if c.label != "total"])
    assert product == pytest.approx(total, rel=1e-12)
    assert all(c.scale == "geometric_ratio" for c in report.components)


def test_relabeling_groups_flips_total_sign():
    frame = generate(DgpSpec("sim2_misspec"), 2000, seed=9)
    flipped = AnalysisFrame(
        x=frame.x, r=1 - frame.r, m_blocks=frame.m_blocks, y=frame.y,
        scale_applied=frame.scale_applied, covariate_names=frame.covariate_names,
        block_names=frame.block_names,
    )
    a = decompose_natural(frame).component("total").point
    b = decompose_natural(flipped).component("total").point
    assert a == pytest.approx(-b, abs=1e-12)


def test_probability_scale_requires_indicator_outcome():
    frame = generate(DgpSpec("sim2_misspec"), 800, seed=10)
    with pytest.raises(DecompositionError, match="positive_indicator"):
        decompose_natural(frame, DecompositionConfig(scale="probability"))
    indicator = AnalysisFrame(
        x=frame.x, r=frame.r, m_blocks=frame.m_blocks, y=(frame.y > 0).astype(float),
        scale_applied="positive_indicator",
    )
    report = decompose_natural(indicator, DecompositionConfig(scale="probability"))
    assert all(c.scale == "probability_difference" for c in report.components)


def test_geometric_scale_requires_log_positive_frame():
    frame = generate(DgpSpec("sim2_misspec"), 800, seed=11)
    with pytest.raises(DecompositionError, match="log_positive"):
        decompose_natural(frame, DecompositionConfig(scale="geometric"))


def test_sim1_geometric_decomposition_runs():
    frame = generate(DgpSpec("sim1_meps_like"), 1500, seed=12)
    report = decompose_natural(frame, DecompositionConfig(scale="geometric"))
    assert report.component("total").point > 0
    assert report.estimand_meta["outcome_scale"] == "log_positive"
    assert report.estimand_meta["n_blocks"] == 4


def test_report_serialization_roundtrip_and_csv():
    frame = generate(DgpSpec("sim2_misspec"), 900, seed=13)
    report = decompose_sequential(frame)
    assert DecompositionReport.from_json(report.to_json()) == report
    csv_text = report.to_csv()
    lines = csv_text.strip().splitlines()
    assert lines[0] == "label,value,ci_lo,ci_hi,p"
    assert len(lines) == 1 + len(report.components)


def test_decompose_dispatch():
    frame = generate(DgpSpec("sim2_misspec"), 700, seed=14)
    assert decompose(frame, kind="natural").estimand_meta["decomposition"] == "natural"
    assert decompose(frame, kind="sequential").estimand_meta["decomposition"] == "sequential"
    with pytest.raises(DecompositionError, match="unknown decomposition"):
        decompose(frame, kind="upside_down")


def test_component_invariants_enforced():
    with pytest.raises(DecompositionError, match="CI does not contain"):
        DisparityComponent("total", 1.0, 0.1, (2.0, 3.0), 0.5)
    with pytest.raises(DecompositionError, match="p-value"):
        DisparityComponent("total", 1.0, 0.1, (0.5, 1.5), 1.5)
    with pytest.raises(DecompositionError, match="scale"):
        DisparityComponent("total", 1.0, 0.1, (0.5, 1.5), 0.5, "odd_scale")


def test_decompose_with_no_covariates_uses_intercept_models():
    rng = np.random.default_rng(15)
    n = 2000
    r = (rng.random(n) < 0.5).astype(np.int8)
    m = (0.5 * r + rng.standard_normal(n))[:, None]
    y = 1.0 + 0.8 * m[:, 0] + 0.5 * r + rng.standard_normal(n)
    frame = AnalysisFrame(x=np.empty((n, 0)), r=r, m_blocks=(m,), y=y)
    report = decompose_natural(frame)
    assert np.isfinite(report.component("total").point)
    assert report.component("total").point > 0
