import csv
import hashlib
import json
import os

import numpy as np
import pytest

from attr_eval import cli, container, runner
from attr_eval import tensor_core as tc
from attr_eval.config import parse_config, parse_config_text

SMALL = """seed = 3
dataset.n = 260
dataset.shape = 1x6x6
eval.subset_size = 60
train.epochs = 3
method.sg_samples = 2
method.ig_steps = 4
model.standard.layers = conv2d(4,3,1,1), relu, maxpool2d(2), flatten, dense
"""


def write_cfg(tmp_path, extra, name="c.cfg"):
    p = tmp_path / name
    p.write_text(SMALL + extra)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_grid_counting_contract(tmp_path):
    p = write_cfg(tmp_path, "methods = vanilla_gradient, grad_times_image\nmetrics = deletion, insertion, evalattai\n"
                  "models = standard, robust\nmodel.robust.layers = conv2d(4,3,1,1), relu, flatten, dense\n")
    res = runner.run_experiment(parse_config(p), out_dir=str(tmp_path / "out"))
    assert len([c for c in res.raw if c.method != "random"]) == 12
    assert len([c for c in res.raw if c.method == "random"]) == 6
    assert len(res.normalized) == 12
    assert len(res.aucs) == 18
    rows = read_csv(tmp_path / "out" / "curves.csv")
    keys = {(r["metric"], r["method"], r["model"], r["normalized"]) for r in rows}
    assert len(keys) == 12 + 6 + 12
    assert len(read_csv(tmp_path / "out" / "auc.csv")) == 18
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config_hash"] == hashlib.sha256(p.read_bytes()).hexdigest()
    assert manifest["seed"] == 3
    assert set(manifest["timings_seconds"]) == {"data", "train", "evaluate", "report"}
    for rel in manifest["files"]:
        assert (tmp_path / "out" / rel).exists()


def test_ranking_agrees_with_auc_csv(tmp_path):
    p = write_cfg(tmp_path, "methods = vanilla_gradient, gradcam, smoothgrad\nmetrics = deletion, insertion, evalattai\n")
    runner.run_experiment(parse_config(p), out_dir=str(tmp_path / "o"))
    aucs = read_csv(tmp_path / "o" / "auc.csv")
    ranking = read_csv(tmp_path / "o" / "ranking.csv")
    for metric in ("deletion", "insertion", "evalattai"):
        rows = [r for r in aucs if r["metric"] == metric]
        sign = -1 if metric == "insertion" else 1
        expected = [r["method"] for r in sorted(rows, key=lambda r: (sign * float(r["auc"]), r["method"]))]
        got = [r["method"] for r in sorted((r for r in ranking if r["metric"] == metric), key=lambda r: int(r["rank"]))]
        assert got == expected


def test_random_only_normalizes_to_one(tmp_path):
    p = write_cfg(tmp_path, "methods = random\nmetrics = deletion, evalattai\n")
    res = runner.run_experiment(parse_config(p), out_dir=str(tmp_path / "o"))
    assert len(res.normalized) == 2
    for c in res.normalized:
        assert all(pt.accuracy == 1.0 for pt in c.points)
    assert all(a.auc == 1.0 for a in res.aucs)


def test_saved_model_matches_run(tmp_path):
    p = write_cfg(tmp_path, "methods = vanilla_gradient\nmetrics = evalattai\n")
    runner.run_experiment(parse_config(p), out_dir=str(tmp_path / "o"))
    m = container.load_model(tmp_path / "o" / "models" / "standard.evat", input_shape=(1, 6, 6))
    assert m.num_classes == 3


def test_failure_removes_partial_outputs(tmp_path, monkeypatch):
    p = write_cfg(tmp_path, "methods = vanilla_gradient\nmetrics = evalattai\n")

    def boom(*a, **k):
        raise RuntimeError("chart failure")
    monkeypatch.setattr(runner.report, "line_chart", boom)
    with pytest.raises(RuntimeError):
        runner.run_experiment(parse_config(p), out_dir=str(tmp_path / "o"))
    left = [f for _, _, fs in os.walk(tmp_path / "o") for f in fs]
    assert left == []


def test_recompute_and_label_target_run(tmp_path):
    p = write_cfg(tmp_path, "methods = smoothgrad, integrated_gradients\nmetrics = evalattai\n"
                  "evalattai.recompute_attribution = true\neval.target = label\nmethod.ig_baseline = mean\n")
    res = runner.run_experiment(parse_config(p), out_dir=str(tmp_path / "o"))
    assert len(res.aucs) == 3


def test_idx_dataset_run(tmp_path):
    from attr_eval.data import synth_dataset, write_idx
    ds = synth_dataset(120, 2, (1, 6, 6), seed=0)
    write_idx(tmp_path / "d-images-idx4", np.round(ds.images * 255).astype(np.uint8))
    write_idx(tmp_path / "d-labels-idx1", ds.labels.astype(np.uint8))
    cfgtxt = (f"dataset.source = idx\ndataset.path = {tmp_path / 'd-images-idx4'}\neval.subset_size = 40\n"
              "train.epochs = 2\nmethods = vanilla_gradient\nmetrics = deletion\n"
              "model.standard.layers = conv2d(2,3,1,1), relu, flatten, dense\n")
    res = runner.run_experiment(parse_config_text(cfgtxt), out_dir=str(tmp_path / "o"))
    assert res.raw[0].n_images == 40


# ---------------------------------------------------------------- cli


def test_cli_exit_codes(tmp_path, capsys):
    good = write_cfg(tmp_path, "methods = vanilla_gradient\nmetrics = evalattai\n")
    assert cli.main(["run", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    bad = write_cfg(tmp_path, "methods = vanilla_gradient\nmetrics = evalattai\nepsilonn = 1\n", "bad.cfg")
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert "epsilonn" in capsys.readouterr().err
    missing = write_cfg(tmp_path, "dataset.source = idx\ndataset.path = /nonexistent\nmethods = random\n"
                        "metrics = evalattai\n", "missing.cfg")
    assert cli.main(["run", "--config", str(missing), "--out", str(tmp_path / "m")]) == 2
    assert cli.main(["run"]) == 1


def test_cli_jobs_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ATTR_EVAL_JOBS", "2")
    assert cli._jobs(None) == 2
    monkeypatch.setenv("ATTR_EVAL_JOBS", "zero")
    with pytest.raises(Exception):
        cli._jobs(None)
    assert cli._jobs("3") == 3


def test_cli_train_and_gradcheck(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "methods = vanilla_gradient\nmetrics = evalattai\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    model_path = tmp_path / "t" / "models" / "standard.evat"
    assert model_path.exists()
    capsys.readouterr()
    assert cli.main(["gradcheck", "--model", str(model_path), "--input-shape", "1x6x6", "--trials", "5"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--model", str(model_path)]) == 1
    dense_path = tmp_path / "dense.evat"
    container.save_model(tc.init_model([tc.dense(4, 3), tc.relu(), tc.dense(3, 2)], 2, 0), dense_path)
    assert cli.main(["gradcheck", "--model", str(dense_path)]) == 0
    (tmp_path / "junk.evat").write_bytes(b"JUNK")
    assert cli.main(["gradcheck", "--model", str(tmp_path / "junk.evat"), "--input-shape", "4"]) == 1
