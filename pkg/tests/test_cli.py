import filecmp
import json

import pytest

from skeld.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MISSING, EXIT_NUMERICAL, EXIT_OK, main

HEAT = {"experiment": "solve-skeleton", "T": 0.01, "grid": {"n": 64}, "solver": {"dt": 1e-4},
        "output": {"snapshot_stride": 50}}


def write(tmp_path, doc, name="sc.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(tmp_path, doc, out="out", *extra):
    return main(["run", write(tmp_path, doc), "--out", str(tmp_path / out), *extra])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_heat_run_and_report(tmp_path):
    assert run(tmp_path, HEAT) == EXIT_OK
    out = tmp_path / "out"
    assert (out / "diagnostics.csv").read_text().startswith("t,mass,entropy,dissipation_cum")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == "solve-skeleton" and "final_field.csv" in manifest["files"]
    assert any((out / "fields").iterdir())
    assert main(["report", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["nonnegative"] and summary["entropy_margin_ok"]
    assert abs(summary["mass_drift_relative"]) <= 1e-12


def test_reruns_are_byte_identical(tmp_path):
    doc = {"experiment": "simulate-spde", "T": 0.01, "grid": {"n": 32}, "solver": {"dt": 1e-3}, "seed": 9,
           "noise": {"epsilons": [0.05, 0.02], "replicas": 8}}
    assert run(tmp_path, doc, "a") == EXIT_OK
    assert run(tmp_path, doc, "b", "--workers", "2") == EXIT_OK
    assert same_tree(tmp_path / "a", tmp_path / "b")


def test_negative_profile_is_a_config_error(tmp_path, caplog):
    assert run(tmp_path, {"initial": {"amplitude": 2.0}}) == EXIT_CONFIG
    assert "initial" in caplog.text


def test_unknown_key_and_bad_workers(tmp_path):
    assert run(tmp_path, {"solver": {"dtt": 1.0}}) == EXIT_CONFIG
    assert run(tmp_path, HEAT, "out", "--workers", "0") == EXIT_CONFIG


def test_numerical_failure_writes_failure_json(tmp_path):
    doc = {"T": 0.01, "nonlinearity": {"m": 3.0}, "grid": {"n": 64},
           "solver": {"dt": 1e-2, "newton_max_iter": 1, "newton_tol": 1e-14, "max_halvings": 0}}
    assert run(tmp_path, doc) == EXIT_NUMERICAL
    failure = json.loads((tmp_path / "out" / "failure.json").read_text())
    assert failure["error"] == "NewtonFailure"


def test_mass_mismatch_is_infeasible(tmp_path):
    doc = {"experiment": "minimize-action", "T": 0.02, "grid": {"n": 32}, "solver": {"dt": 1e-3},
           "target": {"kind": "profile", "profile": {"profile": "constant", "value": 2.0}}}
    assert run(tmp_path, doc) == EXIT_INFEASIBLE


def test_report_on_missing_artifacts(tmp_path):
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_MISSING
    assert run(tmp_path, HEAT) == EXIT_OK
    (tmp_path / "out" / "diagnostics.csv").unlink()
    assert main(["report", str(tmp_path / "out")]) == EXIT_MISSING


def test_gamma_sweep_report(tmp_path):
    doc = {"experiment": "gamma-sweep", "T": 0.02, "nonlinearity": {"m": 2.0}, "grid": {"n": 64},
           "solver": {"dt": 5e-4}, "control": {"kind": "random-spectral", "K": 16, "intervals": 4, "amplitude": 0.3}}
    assert run(tmp_path, doc) == EXIT_OK
    assert main(["report", str(tmp_path / "out")]) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["monotone_J"] is True
    assert (tmp_path / "out" / "plot_J.csv").read_text().startswith("K,J_etaK")


def test_check_assumptions_run(tmp_path):
    doc = {"experiment": "check-assumptions", "nonlinearity": {"m": 2.0}, "assumptions": {"sample_count": 1024}}
    assert run(tmp_path, doc) == EXIT_OK
    assert json.loads((tmp_path / "out" / "assumptions.json").read_text())["passed"] is True


def test_ldp_table_has_one_row_per_epsilon(tmp_path):
    doc = {"experiment": "ldp-mc", "T": 0.05, "grid": {"n": 32}, "solver": {"dt": 1e-3},
           "noise": {"K": 4, "eta": 0.1}, "ldp": {"epsilons": [0.008, 0.004], "replicas": 200, "delta": 0.1},
           "optimizer": {"starts": 1, "max_iter": 30}}
    assert run(tmp_path, doc) == EXIT_OK
    assert main(["report", str(tmp_path / "out")]) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert [r["epsilon"] for r in summary["table"]] == [0.004, 0.008]
    lines = (tmp_path / "out" / "ensemble.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 200


def test_criticality_bad_resolution_is_config_error(tmp_path):
    doc = {"experiment": "criticality-scan", "criticality": {"n": 32, "m_list": [1.0], "d_list": [1],
                                                            "pqr": [[2, 2, 1]]}}
    assert run(tmp_path, doc) == EXIT_CONFIG


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        main([])
