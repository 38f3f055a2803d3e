import csv
import json

import numpy as np
import pytest

from linkfit.cli import EXIT_ERROR, EXIT_OK, main


@pytest.fixture
def poisson_csv(tmp_path):
    path = tmp_path / "rep.csv"
    meta = tmp_path / "meta.json"
    assert main(["simulate", "--scenario", "poisson-constant", "--n", "300", "--alpha", "0.1",
                 "--data-out", str(path), "--out", str(meta)]) == EXIT_OK
    return path


def _run(args, tmp_path, name="out.json"):
    out = tmp_path / name
    code = main(args + ["--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def test_simulate_data_out(poisson_csv, tmp_path):
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["command"] == "simulate"
    assert meta["true_beta"] == [0.5, 2.0]
    assert meta["schema_version"] == "1.0"
    with open(poisson_csv) as fh:
        header = next(csv.reader(fh))
    assert "y" in header and "x" in header


def test_fit_poisson(poisson_csv, tmp_path):
    code, doc = _run(["fit", str(poisson_csv), "--family", "poisson", "--outcome", "y",
                      "--covariates", "x", "--intercept", "--marginal", "kde", "--bandwidth", "100",
                      "--posteriors"], tmp_path)
    assert code == EXIT_OK
    names = [p["name"] for p in doc["estimates"]]
    assert names[:2] == ["(Intercept)", "x"]
    slope = doc["estimates"][1]
    assert abs(slope["estimate"] - 2.0) < 0.1
    assert slope["ci_lower"] < slope["estimate"] < slope["ci_upper"]
    assert doc["covariance_method"] == "sandwich"
    assert len(doc["mismatch_posterior"]) == 300
    assert 0 < doc["mismatch_rate"] < 0.3
    assert "package_version" in doc["provenance"]
    assert "timestamp" not in doc["provenance"]


def test_fit_outputs_are_byte_identical(poisson_csv, tmp_path):
    args = ["fit", str(poisson_csv), "--family", "poisson", "--outcome", "y", "--covariates", "x",
            "--intercept"]
    main(args + ["--out", str(tmp_path / "a.json")])
    main(args + ["--out", str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_fit_contingency_fixed_rate(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "tab.csv"
    with open(path, "w") as fh:
        fh.write("a,b\n")
        for _ in range(200):
            a = int(rng.integers(1, 3))
            b = a if rng.random() < 0.8 else 3 - a
            fh.write(f"{a},{b}\n")
    code, doc = _run(["fit", str(path), "--family", "contingency", "--outcome", "b",
                      "--covariates", "a", "--match-design", "fixed:0.1"], tmp_path)
    assert code == EXIT_OK
    pi = np.array(doc["family_parameters"]["pi"])
    assert pi.shape == (2, 2)
    assert pi.sum() == pytest.approx(1.0)
    assert doc["mismatch_rate"] == pytest.approx(0.1)


def test_usage_errors(poisson_csv, tmp_path, capsys):
    assert main(["fit", str(poisson_csv), "--family", "poisson"]) == EXIT_ERROR
    assert "--outcome" in capsys.readouterr().err
    assert main(["fit", str(poisson_csv), "--family", "cox", "--outcome", "y"]) == EXIT_ERROR
    assert main(["fit", str(poisson_csv), "--family", "contingency", "--outcome", "y"]) == EXIT_ERROR
    assert main(["fit", "--family", "poisson", "--outcome", "y"]) == EXIT_ERROR
    assert main(["fit", str(tmp_path / "missing.csv"), "--family", "poisson", "--outcome", "y"]) == EXIT_ERROR
    assert main(["bogus"]) == EXIT_ERROR


def test_config_overrides(poisson_csv, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max-iter": 3}))
    code, doc = _run(["fit", str(poisson_csv), "--family", "poisson", "--outcome", "y",
                      "--covariates", "x", "--intercept", "--config", str(cfg)], tmp_path)
    assert doc["provenance"]["config"]["max_iter"] == 3
    assert code in (0, 2)
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["fit", str(poisson_csv), "--config", str(cfg)]) == EXIT_ERROR


def test_split_test_command(poisson_csv, tmp_path):
    code, doc = _run(["test", str(poisson_csv), "--family", "poisson", "--outcome", "y",
                      "--covariates", "x", "--intercept", "--marginal", "kde", "--split-seed", "3"],
                     tmp_path)
    assert code == EXIT_OK
    t = doc["test"]
    assert t["threshold"] == pytest.approx(np.log(20))
    assert 0 <= t["p_value"] <= 1
    assert t["reject"] == (t["T"] > t["threshold"])


def test_simulate_study(tmp_path):
    out = tmp_path / "study.csv"
    assert main(["simulate", "--n", "200", "--reps", "3", "--workers", "1", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(open(out)))
    assert {r["method"] for r in rows} == {"adjusted", "naive"}
    side = json.loads((tmp_path / "study.json").read_text())
    assert side["summary"]["n_used"] == 3


def test_spline_command(tmp_path):
    draws = tmp_path / "draws.csv"
    code, doc = _run(["spline", "--n", "200", "--iters", "200", "--burn-in", "50", "--thin", "5",
                      "--grid", "11", "--draws", str(draws)], tmp_path)
    assert code == EXIT_OK
    assert doc["summary"]["n_draws"] == 30
    assert len(doc["curve"]["x"]) == 11
    rows = list(csv.reader(open(draws)))
    assert len(rows) == 31 and len(rows[0]) == 3 + 27


def test_spline_from_csv(tmp_path):
    path = tmp_path / "xy.csv"
    x = np.linspace(0, 1, 100)
    with open(path, "w") as fh:
        fh.write("u,v\n" + "".join(f"{a},{np.sin(4 * a)}\n" for a in x))
    code, doc = _run(["spline", str(path), "--x", "u", "--y", "v", "--iters", "60", "--burn-in", "10",
                      "--thin", "5"], tmp_path)
    assert code == EXIT_OK and doc["n"] == 100
    assert main(["spline", str(path), "--x", "nope"]) == EXIT_ERROR
