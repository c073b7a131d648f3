import json
import os

import numpy as np
import pytest

from pathshift.cli import main
from pathshift.simulation import DgpSpec, generate
from pathshift.toys import fixture_path, toy_k1


@pytest.fixture
def meps_like_csv(tmp_path):
    """A small two-group dataset in the CSV-plus-config shape the CLI expects."""
    frame, latents = generate(DgpSpec("sim1_meps_like"), 900, seed=77, return_latents=True)
    header = ["x1", "x2", "x3", "race", "m11", "m12", "m2", "m31", "m32", "m41", "m42", "expenditure"]
    m = frame.m_upto(4)
    rows = np.column_stack([frame.x, frame.r + 1.0, m, latents["y_raw"]])
    path = tmp_path / "study.csv"
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(",".join(header) + "\n")
        for row in rows:
            handle.write(",".join(f"{v:.10g}" for v in row) + "\n")
    config = {
        "data": str(path),
        "covariates": ["x1", "x2", "x3"],
        "group": {"name": "race", "reference": 1, "comparison": 2},
        "mediators": [["m11", "m12"], ["m2"], ["m31", "m32"], ["m41", "m42"]],
        "outcome": {"name": "expenditure", "scale": "log_positive"},
        "learner": "glm",
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config), encoding="utf-8")
    return str(path), str(cfg_path)


def test_decompose_writes_reports_and_table(meps_like_csv, tmp_path, capsys):
    _, cfg = meps_like_csv
    out = tmp_path / "out"
    code = main(["decompose", "--config", cfg, "--out", str(out), "--seed", "3", "--scale", "geometric"])
    assert code == 0
    printed = capsys.readouterr().out
    data_rows = [ln for ln in printed.splitlines() if ln.startswith(("mediator_", "outcome_attributed", "total"))]
    assert len(data_rows) == 6  # four mediators + outcome-attributed + total
    payload = json.loads((out / "decomposition.json").read_text())
    assert payload["seed"] == 3
    labels = {c["label"] for c in payload["reports"][0]["components"]}
    assert {"total", "mediator_1", "mediator_4", "outcome_attributed", "residual_outcome"} <= labels
    assert (out / "decomposition.csv").read_text().startswith("label,value")


def test_decompose_both_kinds(meps_like_csv, tmp_path):
    _, cfg = meps_like_csv
    out = tmp_path / "both"
    code = main(["decompose", "--config", cfg, "--out", str(out), "--seed", "1", "--decomposition", "both"])
    assert code == 0
    payload = json.loads((out / "decomposition.json").read_text())
    kinds = [rep["estimand_meta"]["decomposition"] for rep in payload["reports"]]
    assert kinds == ["natural", "sequential"]


def test_decompose_probability_scale_uses_indicator(meps_like_csv, tmp_path):
    _, cfg = meps_like_csv
    out = tmp_path / "prob"
    code = main(["decompose", "--config", cfg, "--out", str(out), "--seed", "1", "--scale", "probability"])
    assert code == 0
    payload = json.loads((out / "decomposition.json").read_text())
    meta = payload["reports"][0]["estimand_meta"]
    assert meta["outcome_scale"] == "positive_indicator"
    assert all(c["scale"] == "probability_difference" for c in payload["reports"][0]["components"])


def test_decompose_seed_reproducible_bytes(meps_like_csv, tmp_path):
    _, cfg = meps_like_csv
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["decompose", "--config", cfg, "--out", str(out1), "--seed", "9"]) == 0
    assert main(["decompose", "--config", cfg, "--out", str(out2), "--seed", "9"]) == 0
    assert (out1 / "decomposition.json").read_bytes() == (out2 / "decomposition.json").read_bytes()


def test_decompose_env_seed_fallback(meps_like_csv, tmp_path, monkeypatch):
    _, cfg = meps_like_csv
    out = tmp_path / "env"
    monkeypatch.setenv("PATHSHIFT_SEED", "123")
    assert main(["decompose", "--config", cfg, "--out", str(out)]) == 0
    payload = json.loads((out / "decomposition.json").read_text())
    assert payload["seed"] == 123


def test_decompose_missing_data_errors(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"group": {"name": "g"}, "mediators": [["m"]], "outcome": {"name": "y"}}))
    assert main(["decompose", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_decompose_group_pairs(meps_like_csv, tmp_path):
    path, cfg_path = meps_like_csv
    cfg = json.loads(open(cfg_path).read())
    cfg["group"]["pairs"] = [
        {"reference": 1, "comparison": 2},
        {"reference": 2, "comparison": 1},
    ]
    del cfg["group"]["reference"], cfg["group"]["comparison"]
    new_cfg = tmp_path / "pairs.json"
    new_cfg.write_text(json.dumps(cfg))
    out = tmp_path / "pairs_out"
    assert main(["decompose", "--config", str(new_cfg), "--out", str(out), "--seed", "2"]) == 0
    payload = json.loads((out / "decomposition.json").read_text())
    assert len(payload["reports"]) == 2
    a, b = (rep["components"][0]["point"] for rep in payload["reports"])
    assert a == pytest.approx(-b, abs=1e-12)  # swapped roles flip the total


def test_simulate_smoke_and_determinism(tmp_path):
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    args = [
        "simulate", "--dgp", "sim2", "--estimands", "direct,mediator1", "--n", "400",
        "--reps", "3", "--conditions", "correct", "--truth-draws", "100000",
        "--seed", "5", "--threads", "1",
    ]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert (out1 / "simreport.json").read_bytes() == (out2 / "simreport.json").read_bytes()
    assert (out1 / "simreport.csv").exists()
    curves = [p for p in os.listdir(out1) if p.startswith("curves_")]
    assert len(curves) == 2


def test_simulate_sim1_single_rep_smoke(tmp_path):
    args = [
        "simulate", "--dgp", "sim1", "--estimands", "mediator1", "--n", "300",
        "--reps", "1", "--conditions", "correct", "--truth-draws", "50000",
        "--seed", "1", "--threads", "1", "--out", str(tmp_path),
    ]
    assert main(args) == 0


def test_oracle_check_shipped_fixture_passes(capsys):
    code = main(["oracle-check", "--fixture", fixture_path("toy_k1"), "--mc-draws", "300000", "--seed", "0"])
    assert code == 0
    out = capsys.readouterr().out
    assert "gamma_mediator_1" in out and "FAIL" not in out


def test_oracle_check_k4_fixture_passes():
    assert main(["oracle-check", "--fixture", fixture_path("toy_k4"), "--mc-draws", "100000", "--seed", "0"]) == 0


def test_oracle_check_corrupted_fixture_fails(tmp_path, capsys):
    payload = toy_k1().to_dict()
    payload["p_y"][0][0][0] = [0.45, 0.45]  # row sum 0.9
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(payload))
    assert main(["oracle-check", "--fixture", str(bad)]) == 1
    assert "invalid fixture" in capsys.readouterr().err


def test_decompose_incomplete_config_messages(meps_like_csv, tmp_path, capsys):
    path, _ = meps_like_csv
    cfg = tmp_path / "incomplete.json"
    cfg.write_text(json.dumps({"data": path, "outcome": {"name": "expenditure"}, "group": {"name": "race"}}))
    assert main(["decompose", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "missing 'mediators'" in capsys.readouterr().err
    cfg.write_text(json.dumps({
        "data": path, "outcome": {"name": "expenditure"}, "group": {"name": "race"},
        "mediators": [["m2"]],
    }))
    assert main(["decompose", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "reference" in capsys.readouterr().err


def test_simulate_robustness_alias(tmp_path):
    args = [
        "simulate", "--dgp", "sim2", "--estimands", "mediator1", "--n", "300",
        "--reps", "2", "--conditions", "table1", "--truth-draws", "50000",
        "--seed", "2", "--threads", "1", "--out", str(tmp_path),
    ]
    assert main(args) == 0
    payload = json.loads((tmp_path / "simreport.json").read_text())
    methods = {c["method"] for c in payload["cells"]}
    assert {"robust_c1_pi_g", "robust_c2_pi_mu", "robust_c3_b_mu", "glm_correct", "glm_false"} == methods


def test_simulate_rho_estimand_token(tmp_path):
    args = [
        "simulate", "--dgp", "sim2", "--estimands", "rho_mediator1,rho_direct", "--n", "300",
        "--reps", "2", "--conditions", "correct", "--truth-draws", "50000",
        "--seed", "2", "--threads", "1", "--out", str(tmp_path),
    ]
    assert main(args) == 0
    payload = json.loads((tmp_path / "simreport.json").read_text())
    assert {c["estimand"] for c in payload["cells"]} == {
        "rho[gamma_mediator_1-gamma_dis]", "rho[gamma_direct-gamma_dis]",
    }
