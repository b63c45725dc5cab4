import csv
import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from dmseg import distance
from dmseg.cli import main
from dmseg.volume import Volume, read_rvol, write_rvol

TINY = ["--count", "8", "--shape", "12,12,12", "--lesions", "1,2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--seed", "3", *TINY]) == 0
    return out


@pytest.fixture(scope="module")
def lrnet_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("lr")
    assert main(["pretrain-lrnet", "--data", str(dataset), "--out", str(out),
                 "--epochs", "2", "--width", "4", "--split", "0.6,0.2,0.2"]) == 0
    return out


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_gen_data_writes_cases_and_manifest(dataset):
    meta = json.loads((dataset / "dataset.json").read_text())
    assert len(meta["cases"]) == 8
    m = manifest(dataset)
    assert m["command"] == "gen-data"
    assert m["config"]["phantom_spec"]["shape"] == [12, 12, 12]
    assert "dataset.json" in m["outputs"]
    assert read_rvol(dataset / meta["cases"][0]["image"]).shape == (12, 12, 12)


def test_gen_data_is_reproducible(dataset, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--seed", "3", *TINY]) == 0
    a = json.loads((dataset / "dataset.json").read_text())["sha256"]
    b = json.loads((tmp_path / "dataset.json").read_text())["sha256"]
    assert a == b


def test_gen_data_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"shape": [10, 10, 10], "noise_std": 0.0}))
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--count", "1", "--config", str(cfg), "--shape", "9,9,9"]) == 0
    spec = manifest(out)["config"]["phantom_spec"]
    assert spec["shape"] == [9, 9, 9] and spec["noise_std"] == 0.0


def test_compute_dm_and_figure(tmp_path):
    m = np.zeros((9, 9, 9), np.uint8)
    m[2:7, 2:7, 2:7] = 1
    write_rvol(tmp_path / "m.rvol", Volume(m, (1.0, 1.0, 1.0)))
    out, fig = tmp_path / "dm" / "nidm.rvol", tmp_path / "panel.png"
    assert main(["compute-dm", str(tmp_path / "m.rvol"), str(out), "--figure", str(fig)]) == 0
    dm = read_rvol(out).data
    np.testing.assert_allclose(dm, distance.distance_map(m, 1, "nidm").values)
    assert dm[4, 4, 4] == pytest.approx(0.5) and dm[2, 2, 2] == pytest.approx(1.5)
    assert fig.stat().st_size > 0


def test_pretrain_outputs(lrnet_dir):
    for name in ("lrnet.ckpt", "run_record.json", "losses.csv", "losses.png", "manifest.json"):
        assert (lrnet_dir / name).exists(), name
    rec = json.loads((lrnet_dir / "run_record.json").read_text())
    assert len(rec["history"]) == 2
    m = manifest(lrnet_dir)
    assert m["config"]["epochs"] == 2 and m["config"]["variant"] == "nidm"


def test_train_infer_evaluate(dataset, lrnet_dir, tmp_path):
    run = tmp_path / "run"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"mnet_width": 4, "batch_size": 2, "epochs": 5}))
    assert main(["train", "--data", str(dataset), "--out", str(run), "--lrnet", str(lrnet_dir / "lrnet.ckpt"),
                 "--config", str(cfg), "--epochs", "1", "--alpha", "0.5"]) == 0
    m = manifest(run)
    assert m["config"]["epochs"] == 1 and m["config"]["alpha"] == 0.5 and m["config"]["mnet_width"] == 4
    assert set(m["inputs"]) == {str(lrnet_dir / "lrnet.ckpt")}
    for name in ("mnet.ckpt", "lrnet_final.ckpt", "losses.csv", "losses.png", "test_metrics.csv"):
        assert (run / name).exists(), name
    with open(run / "losses.csv") as fh:
        assert next(csv.reader(fh)) == ["step", "loss_name", "value"]

    meta = json.loads((dataset / "dataset.json").read_text())
    preds = tmp_path / "preds"
    for case in meta["cases"]:
        out = preds / os.path.basename(case["mask"]).replace("mask_", "pred_")
        assert main(["infer", "--model", str(run / "mnet.ckpt"), str(dataset / case["image"]), str(out)]) == 0
    probs = tmp_path / "p.rvol"
    assert main(["infer", "--model", str(run / "mnet.ckpt"), str(dataset / meta["cases"][0]["image"]),
                 str(tmp_path / "one.rvol"), "--probs", str(probs)]) == 0
    p = read_rvol(probs).data
    assert p.min() >= 0 and p.max() <= 1

    refs = tmp_path / "refs"
    refs.mkdir()
    for case in meta["cases"]:
        shutil.copy(dataset / case["mask"], refs / os.path.basename(case["mask"]))
    ev = tmp_path / "ev"
    assert main(["evaluate", "--pred", str(preds), "--ref", str(refs), "--out", str(ev)]) == 0
    report = json.loads((ev / "metrics.json").read_text())
    assert len(report["per_case"]) == 8
    assert 0.0 <= report["aggregate"]["dc_mean"] <= 1.0


def test_train_without_lrnet(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--no-lrnet", "--seg-loss", "dice",
                 "--epochs", "1", "--config", _write(tmp_path / "c.json", {"mnet_width": 4})]) == 0
    assert not (tmp_path / "lrnet_final.ckpt").exists()
    assert manifest(tmp_path)["config"]["use_lrnet"] is False


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def test_evaluate_single_files(tmp_path):
    a = np.zeros((6, 6, 6), np.uint8)
    a[1:4, 1:4, 1:4] = 1
    write_rvol(tmp_path / "a.rvol", Volume(a))
    assert main(["evaluate", "--pred", str(tmp_path / "a.rvol"), "--ref", str(tmp_path / "a.rvol"),
                 "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert rep["aggregate"]["dc_mean"] == 1.0


def test_compare_empty_suite(tmp_path):
    suite = _write(tmp_path / "s.json", [])
    assert main(["compare", "--suite", suite, "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.reader(open(tmp_path / "o" / "comparison.csv")))
    assert rows == [["label", "status", "val_dice", "dc", "dg", "voe", "rvd", "assd", "msd", "rmsd",
                     "checkpoint_id", "error"]]


def test_compare_rows_with_failure(dataset, tmp_path):
    common = {"mnet_width": 4, "batch_size": 2, "epochs": 1}
    suite = _write(tmp_path / "s.json", {"common": common, "rows": [
        {"seg_loss": "dice", "use_lrnet": False},
        {"seg_loss": "tversky", "use_lrnet": False},
        {"seg_loss": "mapdice", "alpha": 0.5},
        # a valid config whose split leaves no training cases fails at run time
        {"seg_loss": "dice", "use_lrnet": False, "split": [0.0, 0.5, 0.5]},
    ]})
    pre = _write(tmp_path / "pre.json", {"epochs": 1, "width": 4})
    out = tmp_path / "o"
    assert main(["compare", "--suite", suite, "--data", str(dataset), "--out", str(out), "--pretrain-config", pre]) == 0
    rows = list(csv.DictReader(open(out / "comparison.csv")))
    assert [r["status"] for r in rows] == ["ok", "ok", "ok", "failed"]
    assert "too few" in rows[3]["error"]
    assert all(0.0 <= float(r["dc"]) <= 1.0 for r in rows[:3])
    assert (out / "comparison.png").exists()


def test_missing_input_exits_1(dataset, tmp_path, capsys):
    assert main(["compute-dm", str(tmp_path / "absent.rvol"), str(tmp_path / "o.rvol")]) == 1
    assert "absent.rvol" in capsys.readouterr().err
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--lrnet",
                 str(tmp_path / "none.ckpt")]) == 1
    assert "none.ckpt" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "o")]) == 1


def test_bad_config_exits_1(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--seg-loss", "hinge"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--out", str(tmp_path / "g"), "--config", str(bad)]) == 1


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["compute-dm"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", "x", "--shape", "1,2"])
    assert exc.value.code == 2


def test_console_script_entry_point():
    exe = shutil.which("dmseg")
    cmd = [exe] if exe else [sys.executable, "-m", "dmseg.cli"]
    res = subprocess.run([*cmd, "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("gen-data", "compute-dm", "pretrain-lrnet", "train", "infer", "evaluate", "compare"):
        assert sub in res.stdout
