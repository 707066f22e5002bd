import hashlib
import json

import numpy as np
import pytest

from affseg.cli import main
from affseg.rng import SplitMix64
from affseg.seed_maps import read_score_stack
from affseg.tensor_io import (
    NEUTRAL,
    LabelMap,
    Tensor,
    read_json,
    read_label_pgm,
    write_json,
    write_label_pgm,
    write_tensor,
)

FAST = ["--steps", "60", "--t", "16"]


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def error_json(stderr: str) -> dict:
    return json.loads(stderr.strip().splitlines()[-1])


@pytest.fixture
def cam_inputs(tmp_path):
    rng = SplitMix64(42)
    write_tensor(Tensor(rng.uniform_array((6, 8, 8)).astype(np.float32)), tmp_path / "features.aft")
    write_tensor(Tensor(rng.normal_array((3, 6)).astype(np.float32)), tmp_path / "head.aft")
    write_json({"class_present": [True, False, True]}, tmp_path / "present.json")
    return tmp_path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["fixture", "--out", str(out), "--count", "2", "--seed", "5"]) == 0
    return out


def cam_args(d, *extra):
    return ["cam", str(d / "features.aft"), str(d / "head.aft"), str(d / "present.json"),
            "--out", str(d / "stack.aft"), *extra]


GOLDEN_CAM_SHA256 = "251c0871cc2a357cc44702829f3c8f6904cd98cc831926da96f4242af3af73fc"


def test_cam_normalized_and_golden(cam_inputs):
    assert main(cam_args(cam_inputs)) == 0
    stack = read_score_stack(cam_inputs / "stack.aft")
    peaks = stack.objects.reshape(3, -1).max(axis=1)
    assert peaks[0] == pytest.approx(1.0) and peaks[1] == 0 and peaks[2] == pytest.approx(1.0)
    assert sha(cam_inputs / "stack.aft") == GOLDEN_CAM_SHA256
    manifest = read_json(cam_inputs / "stack.aft.manifest.json")
    assert manifest["stage"] == "cam" and set(manifest["outputs"]) == {"stack.aft", "stack.aft.json"}


def test_cam_rejects_small_alpha(cam_inputs, capsys):
    code = main(cam_args(cam_inputs, "--alpha", "0.5"))
    err = capsys.readouterr().err
    assert code == 2
    assert error_json(err)["error"] == "AlphaOutOfRange"
    assert any(line.startswith("E:") for line in err.splitlines())
    assert not (cam_inputs / "stack.aft").exists()


def test_cam_cache_hit_and_corruption(cam_inputs, capsys):
    assert main(cam_args(cam_inputs)) == 0
    first = sha(cam_inputs / "stack.aft")
    capsys.readouterr()
    assert main(cam_args(cam_inputs)) == 0
    assert "cache hit: stage cam" in capsys.readouterr().err
    (cam_inputs / "stack.aft").write_bytes(b"AFT1garbage")
    assert main(cam_args(cam_inputs)) == 0
    assert "cache invalid: stage cam" in capsys.readouterr().err
    assert sha(cam_inputs / "stack.aft") == first


def test_missing_input_is_io_error(tmp_path, capsys):
    code = main(["confidence", str(tmp_path / "nope.aft"), "--out", str(tmp_path / "c.pgm")])
    assert code == 3
    assert error_json(capsys.readouterr().err)["exit_code"] == 3


def test_bad_config_is_validation_error(tmp_path, capsys):
    write_json({"beta": 8.0, "bogus": 1}, tmp_path / "cfg.json")
    code = main(["eval", str(tmp_path / "a.pgm"), str(tmp_path / "b.pgm"), "--config", str(tmp_path / "cfg.json")])
    assert code == 2


def test_flag_overrides_config(tmp_path, corpus, capsys):
    write_json({"beta": 3.0}, tmp_path / "cfg.json")
    gt = corpus / "gt_000.pgm"
    main(["eval", str(gt), str(gt), "--config", str(tmp_path / "cfg.json"), "--beta", "5"])
    report = json.loads(capsys.readouterr().out)
    assert report["config"]["beta"] == 5.0 and report["mean_iou"] == 1.0


def test_stage_commands_chain(tmp_path, corpus, capsys):
    index = read_json(corpus / "corpus.json")
    item = index["items"][0]
    seed, img, gt = corpus / item["seed"], corpus / item["image"], corpus / item["gt"]
    conf, pairs, model = tmp_path / "conf.pgm", tmp_path / "pairs.aft", tmp_path / "model"
    rw, labels = tmp_path / "rw.aft", tmp_path / "labels.pgm"

    assert main(["confidence", str(seed), "--out", str(conf)]) == 0
    assert main(["pairs", str(conf), "--out", str(pairs)]) == 0
    write_json([{"image": str(img), "labels": str(conf)}], tmp_path / "list.json")
    assert main(["train-aff", str(tmp_path / "list.json"), "--out", str(model), *FAST]) == 0
    assert (model / "train_log.json").exists()
    assert main(["propagate", str(model), str(img), str(seed), "--out", str(rw), *FAST]) == 0
    assert main(["synthesize", str(rw), "--image", str(img), "--out", str(labels)]) == 0
    assert read_label_pgm(labels).labels.shape == (64, 64)
    capsys.readouterr()
    assert main(["eval", str(labels), str(gt), "--out", str(tmp_path / "ev.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == read_json(tmp_path / "ev.json")
    assert main(["overlay", str(img), str(labels), "--out", str(tmp_path / "ov.ppm")]) == 0
    assert (tmp_path / "ov.ppm").read_bytes().startswith(b"P6")


def test_propagate_squaring_mode(tmp_path, corpus):
    item = read_json(corpus / "corpus.json")["items"][0]
    seed, img = corpus / item["seed"], corpus / item["image"]
    conf, model = tmp_path / "conf.pgm", tmp_path / "model"
    main(["confidence", str(seed), "--out", str(conf)])
    write_json([{"image": str(img), "labels": str(conf)}], tmp_path / "list.json")
    main(["train_aff", str(tmp_path / "list.json"), "--out", str(model), *FAST])
    for mode in ("iterative", "squaring"):
        out = tmp_path / f"{mode}.aft"
        assert main(["propagate", str(model), str(img), str(seed), "--out", str(out), *FAST, "--mode", mode]) == 0
    a = read_score_stack(tmp_path / "iterative.aft").scores
    b = read_score_stack(tmp_path / "squaring.aft").scores
    assert np.abs(a - b).max() <= 1e-5


def test_pairs_all_neutral_is_empty(tmp_path):
    write_label_pgm(LabelMap(np.full((4, 4), NEUTRAL, np.uint8)), tmp_path / "n.pgm")
    assert main(["pairs", str(tmp_path / "n.pgm"), "--out", str(tmp_path / "p.aft")]) == 0


def test_run_then_cache_hits(tmp_path, corpus, capsys):
    work = tmp_path / "work"
    assert main(["run", str(corpus), "--work", str(work), "--overlays", *FAST]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary) == {"miou_cam", "miou_cam_rw", "improvement"}
    assert main(["run", str(corpus), "--work", str(work), *FAST]) == 0
    err = capsys.readouterr().err
    for stage in ("cam", "confidence", "pairs", "train_aff", "propagate", "synthesize"):
        assert f"cache hit: stage {stage}" in err
    assert list(work.glob("synthesize-*/overlays/rw_*.ppm"))


def test_corrupted_intermediate_recomputed(tmp_path, corpus, capsys):
    work = tmp_path / "work"
    main(["run", str(corpus), "--work", str(work), *FAST])
    victim = next(work.glob("propagate-*/rw_*.aft"))
    good = victim.read_bytes()
    victim.write_bytes(good[:-4])
    capsys.readouterr()
    assert main(["run", str(corpus), "--work", str(work), *FAST]) == 0
    assert "cache invalid: stage propagate" in capsys.readouterr().err
    assert victim.read_bytes() == good


def test_single_point_sweep_equals_run(tmp_path, corpus, capsys):
    main(["run", str(corpus), "--work", str(tmp_path / "a"), *FAST])
    ran = json.loads(capsys.readouterr().out)
    assert main(["sweep", str(corpus), "--work", str(tmp_path / "b"), "--grid", "beta", "--values", "8", *FAST]) == 0
    table = read_json(tmp_path / "b" / "sweep_beta.json")
    assert len(table["rows"]) == 1 and table["spread"] == 0
    assert table["rows"][0]["miou_cam_rw"] == ran["miou_cam_rw"]
    assert (tmp_path / "b" / "sweep_beta.csv").read_text().startswith("grid,value,")


def test_sweep_t_of_one(tmp_path, corpus):
    assert main(["sweep", str(corpus), "--work", str(tmp_path), "--grid", "t", "--values", "1", "--steps", "60"]) == 0


def test_sweep_rejects_non_power_of_two(tmp_path, corpus, capsys):
    code = main(["sweep", str(corpus), "--work", str(tmp_path), "--grid", "t", "--values", "3", "--steps", "60"])
    assert code == 2
    assert error_json(capsys.readouterr().err)["error"] in ("NotPowerOfTwo", "ConfigError")


def test_fixture_flags(tmp_path):
    out = tmp_path / "fx"
    assert main(["fixture", "--out", str(out), "--count", "1", "--falloff", "0", "--erosion", "0",
                 "--fp_rate", "0", "--noise_sigma", "0"]) == 0
    spec = read_json(out / "corpus.json")["spec"]
    assert spec["falloff"] == 0 and spec["erosion"] == 0
