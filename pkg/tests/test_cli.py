import json

import numpy as np
import pytest

from netcond.cli import main
from netcond.fixtures import make_blobs, save_dataset
from netcond.network import Dense, Network, ReLU, dense_mlp, save_model
from netcond.report import read_report, strip_volatile


@pytest.fixture(scope="module")
def files(tmp_path_factory, small_blob_problem):
    ds, net = small_blob_problem
    d = tmp_path_factory.mktemp("cli")
    save_model(net, d / "model.json")
    save_dataset(ds, d / "data.csv")
    save_model(Network((Dense(np.eye(2)),), (2,)), d / "identity.json")
    return d


def run(argv):
    return main([str(a) for a in argv])


def test_analyze_known_norms(tmp_path, capsys):
    net = dense_mlp([np.diag([2.0, 0.5]), np.diag([3.0, 0.5]), np.diag([5.0, 0.5])], activation="relu")
    save_model(net, tmp_path / "m.json")
    assert run(["analyze", "--model", tmp_path / "m.json", "--out", tmp_path / "a.json"]) == 0
    out = capsys.readouterr().out
    assert "product_bound" in out and "cumulative_bound" in out
    s = read_report(tmp_path / "a.json")["summary"]
    assert s["product_bound"] == pytest.approx(30, rel=1e-9)
    assert s["cumulative_bound"] == pytest.approx(50, rel=1e-9)


def test_analyze_single_layer_bounds_agree(tmp_path):
    save_model(Network((Dense(np.diag([1.0, 7.0])), ReLU()), (2,)), tmp_path / "m.json")
    assert run(["analyze", "--model", tmp_path / "m.json", "--out", tmp_path / "a.json"]) == 0
    s = read_report(tmp_path / "a.json")["summary"]
    assert s["product_bound"] == s["cumulative_bound"] == pytest.approx(7.0, rel=1e-9)


def test_missing_model_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run(["analyze", "--model", missing]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_model_exits_2(tmp_path, capsys):
    (tmp_path / "m.json").write_text("{not json")
    assert run(["analyze", "--model", tmp_path / "m.json"]) == 2
    assert "line 1" in capsys.readouterr().err


def test_data_dimension_mismatch_exits_2(files, capsys):
    save_dataset(make_blobs(3, 3, 5, 0.1, 0), files / "wide.csv")
    assert run(["attack", "--model", files / "model.json", "--data", files / "wide.csv"]) == 2
    assert "model expects 2" in capsys.readouterr().err


def test_attack_report(files):
    out = files / "attack.json"
    assert run(["attack", "--model", files / "model.json", "--data", files / "data.csv",
                "--split", "test", "--out", out]) == 0
    rep = read_report(out)
    assert rep["command"] == "attack"
    assert rep["summary"]["success_rate_on_correct"] >= 0.99
    assert rep["summary"]["median_iterations"] >= 1
    assert len(rep["records"]) == 90


def test_attack_iteration_cap_still_succeeds(files):
    out = files / "attack1.json"
    assert run(["attack", "--model", files / "model.json", "--data", files / "data.csv",
                "--max-iter", "1", "--overshoot", "0", "--out", out]) == 0
    assert all(r["iterations"] <= 1 for r in read_report(out)["records"])


def test_attack_reproducible(files):
    outs = [files / f"rep{i}.json" for i in range(2)]
    for o, w in zip(outs, (1, 4)):
        run(["attack", "--model", files / "model.json", "--data", files / "data.csv",
             "--workers", w, "--out", o])
    a, b = (strip_volatile(read_report(o)) for o in outs)
    assert a == b


def _kappa(files, name, *extra):
    out = files / name
    code = run(["kappa", "--model", files / "model.json", "--data", files / "data.csv",
                "--split", "test", "--out", out, *extra])
    return code, read_report(out) if code == 0 else None


def test_kappa_random_below_deepfool(files):
    _, df = _kappa(files, "k_df.json")
    _, rnd = _kappa(files, "k_rnd.json", "--source", "random", "--trials", "3")
    assert rnd["summary"]["precision"]["mean"]["kappa"] < df["summary"]["precision"]["mean"]["kappa"]
    assert rnd["summary"]["sample_count"] == 3 * rnd["summary"]["kept"]


def test_kappa_file_replay_is_identical(files):
    _, rnd = _kappa(files, "k_src.json", "--source", "random", "--trials", "4", "--seed", "9")
    _, rep = _kappa(files, "k_rep.json", "--source", "file", "--perturbations", files / "k_src.json")
    assert [r["kappa"] for r in rep["records"]] == [r["kappa"] for r in rnd["records"]]
    # replay of a DeepFool attack report
    run(["attack", "--model", files / "model.json", "--data", files / "data.csv",
         "--split", "test", "--out", files / "att.json"])
    _, df = _kappa(files, "k_df2.json")
    _, rep2 = _kappa(files, "k_rep2.json", "--source", "file", "--perturbations", files / "att.json")
    assert [r["kappa"] for r in rep2["records"]] == [r["kappa"] for r in df["records"]]


def test_kappa_file_source_needs_path(files):
    assert _kappa(files, "k_x.json", "--source", "file")[0] == 2


def test_kappa_identity_model(files, tmp_path):
    save_dataset(make_blobs(20, 2, 2, 0.5, seed=3), tmp_path / "d.csv")
    out = tmp_path / "k.json"
    assert run(["kappa", "--model", files / "identity.json", "--data", tmp_path / "d.csv",
                "--out", out]) == 0
    rep = read_report(out)
    assert all(r["kappa"] == 1.0 for r in rep["records"])
    for stat in ("mean", "max", "min"):
        assert rep["summary"]["precision"][stat]["minimum_digits"] == 0.0
        assert rep["summary"]["precision"][stat]["minimum_bits"] == 1


def test_kappa_all_degenerate_exits_1(tmp_path, capsys):
    save_model(Network((Dense(np.zeros((2, 2))),), (2,)), tmp_path / "zero.json")
    save_dataset(make_blobs(5, 2, 2, 0.5, seed=0), tmp_path / "d.csv")
    code = run(["kappa", "--model", tmp_path / "zero.json", "--data", tmp_path / "d.csv",
                "--out", tmp_path / "k.json"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_quantize_sweep(files):
    out = files / "q.json"
    assert run(["quantize-sweep", "--model", files / "model.json", "--data", files / "data.csv",
                "--bits", "2,4,8,16", "--kappa", "5", "--out", out]) == 0
    rep = read_report(out)
    assert [r["bits"] for r in rep["records"]] == [2, 4, 8, 16]
    assert rep["summary"]["chain_violations"] == 0
    errs = [r["mean_rel_input_error"] for r in rep["records"]]
    assert errs == sorted(errs, reverse=True)


def test_quantize_sweep_with_kappa_report(files):
    _kappa(files, "k_for_q.json")
    out = files / "q2.json"
    assert run(["quantize-sweep", "--model", files / "model.json", "--data", files / "data.csv",
                "--split", "test", "--bits", "3", "--kappa-report", files / "k_for_q.json",
                "--out", out]) == 0
    assert read_report(out)["records"][0]["evaluated"] == 90


def test_gen_data_and_train_fixture(tmp_path):
    data, model = tmp_path / "d.csv", tmp_path / "m.json"
    assert run(["gen-data", "--kind", "blobs", "--n", "30", "--spread", "0.2", "--out", data]) == 0
    assert run(["train-fixture", "--data", data, "--hidden", "8", "--epochs", "50",
                "--out", model]) == 0
    assert run(["analyze", "--model", model]) == 0
    assert run(["gen-data", "--kind", "spirals", "--n", "40", "--out", tmp_path / "s.csv"]) == 0
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 41


def test_table_format(files, capsys):
    assert run(["attack", "--model", files / "model.json", "--data", files / "data.csv",
                "--split", "test", "--format", "table"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("# tool_version:")
    header = next(l for l in lines if not l.startswith("#"))
    assert header.split(",")[0] == "input_id"


def test_options_echo_excludes_workers(files):
    _, rep = _kappa(files, "k_opts.json", "--workers", "2")
    assert "workers" not in rep["options"] and "out" not in rep["options"]
    assert rep["options"]["source"] == "deepfool"
    json.dumps(rep)
