import csv
import json

import numpy as np
import pytest

from helpers import mixed_spec, random_psi
from lvmi.cli import default_workers, main, parse_grid
from lvmi.io import load_psi, read_dataset, save_psi
from lvmi.model import ModelError

MODEL = {
    "variables": [{"name": "inc", "kind": "continuous"}, {"name": "car", "kind": "binary"},
                  {"name": "trust", "kind": "ordinal", "categories": 3}],
    "K1": 1, "K2": 1, "ignorable": False, "covariates": ["age"], "weight": "w",
}


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    N = 120
    eta = rng.standard_normal(N)
    rows = []
    for i in range(N):
        inc = 1 + eta[i] + 0.5 * rng.standard_normal()
        car = int(rng.random() < 1 / (1 + np.exp(-eta[i])))
        trust = int(np.digitize(eta[i] + rng.logistic(), [-0.5, 0.5]))
        rows.append(["NA" if rng.random() < 0.15 else repr(float(inc)),
                     "NA" if rng.random() < 0.15 else str(car), str(trust),
                     repr(float(rng.normal())), repr(float(rng.uniform(0.5, 2)))])
    data = tmp_path / "data.csv"
    with open(data, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["inc", "car", "trust", "age", "w"])
        w.writerows(rows)
    model = tmp_path / "model.json"
    model.write_text(json.dumps(MODEL))
    return tmp_path, data, model


def test_psi_round_trip_bit_identical(tmp_path, rng):
    psi = random_psi(mixed_spec(), rng)
    save_psi(tmp_path / "psi.json", psi)
    back = load_psi(tmp_path / "psi.json")
    assert back.spec == psi.spec
    assert np.array_equal(back.values, psi.values)


def test_missing_weight_rejected(files):
    tmp, data, _ = files
    text = data.read_text().splitlines()
    cells = text[3].split(",")
    cells[-1] = "NA"
    text[3] = ",".join(cells)
    data.write_text("\n".join(text) + "\n")
    with pytest.raises(ModelError, match="'w' may not be missing"):
        read_dataset(data, MODEL)


def test_header_mismatch_names_column(files):
    _, data, _ = files
    doc = dict(MODEL, variables=MODEL["variables"] + [{"name": "zz", "kind": "binary"}])
    with pytest.raises(ModelError, match="'zz'"):
        read_dataset(data, doc)


def test_undefined_cells_rejected(files):
    _, data, _ = files
    text = data.read_text().replace("NA", "UNDEF", 1)
    data.write_text(text)
    with pytest.raises(ModelError, match="UNDEF"):
        read_dataset(data, MODEL)


def test_grid_parsing():
    assert parse_grid("1x1, 2x1,3X2") == [(1, 1), (2, 1), (3, 2)]
    with pytest.raises(ModelError):
        parse_grid("1-1")


def test_worker_env(monkeypatch):
    monkeypatch.setenv("LVMI_WORKERS", "3")
    assert default_workers() == 3


def test_exit_codes(files, capsys):
    tmp, data, model = files
    assert main(["fit", str(tmp / "nope.csv"), str(model), "--out", str(tmp / "o")]) == 4
    bad = tmp / "bad.json"
    bad.write_text(json.dumps(dict(MODEL, variables=[{"name": "inc", "kind": "binary"}])))
    assert main(["fit", str(data), str(bad), "--out", str(tmp / "o")]) == 2
    assert main(["fit", str(data), str(model), "--iters", "10", "--burnin", "10"]) == 2


def test_fit_impute_analyze_pipeline(files):
    tmp, data, model = files
    common = ["--seed", "3", "--workers", "1"]
    for run in ("a", "b"):
        assert main(["fit", str(data), str(model), "--iters", "40", "--burnin", "20",
                     "--out", str(tmp / run), *common]) == 0
    assert (tmp / "a" / "psi.json").read_bytes() == (tmp / "b" / "psi.json").read_bytes()
    assert (tmp / "a" / "trace.csv").read_bytes() == (tmp / "b" / "trace.csv").read_bytes()
    manifest = json.loads((tmp / "a" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["config"]["T"] == 40

    assert main(["impute", str(data), str(model), str(tmp / "a" / "psi.json"), "--iters", "60",
                 "--burnin", "20", "--thin", "20", "--out", str(tmp / "imp"), *common]) == 0
    assert sorted(p.name for p in (tmp / "imp").glob("imputed_*.csv")) == \
        ["imputed_1.csv", "imputed_2.csv"]

    aux = str(tmp / "imp" / "aux.json")
    assert main(["analyze", aux, "--imputed", str(tmp / "imp" / "imputed_*.csv"),
                 "--out", str(tmp / "an")]) == 0
    table = list(csv.DictReader(open(tmp / "an" / "table.csv")))
    assert [r["estimand"] for r in table] == ["mean[inc]", "mean[car]", "mean[trust]"]
    assert main(["analyze", aux, "--analysis", "ols", "--response", "inc", "--columns", "car",
                 "--covariates", "age", "--weights", "w", "--data", str(data),
                 "--out", str(tmp / "ols")]) == 0
    assert main(["analyze", aux, "--analysis", "condmean", "--given", "car", "--value", "1",
                 "--out", str(tmp / "cm")]) == 0
    assert main(["analyze", aux, "--analysis", "corr", "--columns", "inc", "trust",
                 "--out", str(tmp / "corr")]) == 0
    assert main(["analyze", aux, "--analysis", "condmean", "--given", "inc", "--value", "1",
                 "--out", str(tmp / "bad")]) == 2


def test_select_dim_single_cell(files):
    tmp, data, model = files
    assert main(["select-dim", str(data), str(model), "--grid", "1x1", "--iters", "20",
                 "--burnin", "10", "--draws", "1000", "--workers", "1",
                 "--out", str(tmp / "sel")]) == 0
    rows = list(csv.DictReader(open(tmp / "sel" / "bic.csv")))
    assert len(rows) == 1
    assert list(rows[0])[:6] == ["K1", "K2", "loglik", "se", "nparams", "bic"]


def test_simulate_small(tmp_path):
    args = ["simulate", "--study", "III-K1", "--replicates", "2", "--n", "150", "--iters", "30",
            "--burnin", "10", "--impute-iters", "40", "--impute-burnin", "20", "--thin", "10",
            "--seed", "7"]
    assert main(args + ["--workers", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--workers", "2", "--out", str(tmp_path / "b")]) == 0
    raw_a = (tmp_path / "a" / "raw.csv").read_bytes()
    assert raw_a == (tmp_path / "b" / "raw.csv").read_bytes()
    header = raw_a.decode().splitlines()[0]
    assert header == "replicate,estimand,truth,estimate,se,ci_lo,ci_hi,covered"
    assert (tmp_path / "a" / "summary.csv").exists()
