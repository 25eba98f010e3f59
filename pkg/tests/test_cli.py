import hashlib
import json

import numpy as np
import pytest

from nextpoint.checkpoint import load_checkpoint
from nextpoint.cli import EXIT_CONFIG, EXIT_IO, ROOT_ENV, main
from nextpoint.policy import init_params
from nextpoint.scene import read_manifest

TINY = {
    "scene": {"width": 16, "height": 16, "count_min": 1, "count_max": 2, "radius_min": 2.0, "radius_max": 3.0,
              "min_sep": 6.0, "margin": 2.0},
    "data": {"n_train": 12, "n_val": 4},
    "model": {"K": 16, "L": 2, "d": 8, "n_layers": 1, "n_heads": 2, "patch": 8, "width": 16, "height": 16, "max_len": 24},
    "decoder": {"grid": 4, "steps": 30, "batch": 4, "min_heldout_iou": 0.0},
    "sft": {"alpha": 0.0, "steps": 6, "batch": 4, "warmup": 2, "eval_every": 3},
    "rft": {"G": 4, "steps": 3, "scenes_per_step": 2, "eval_every": 2},
}


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv(ROOT_ENV, str(tmp_path))
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))

    def call(*args, sets=()):
        argv = [args[0], "--config", str(cfg)]
        for s in sets:
            argv += ["--set", s]
        return main(argv + list(args[1:]))

    call.root = tmp_path
    return call


def digest(directory, pattern="*"):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.glob(pattern)) if p.is_file()}


def test_generate_is_byte_identical_and_refuses_overwrite(run):
    assert run("generate", "--out", "a") == 0
    assert run("generate", "--out", "b") == 0
    a, b = digest(run.root / "a"), digest(run.root / "b")
    assert a == b and len(a) == 12 + 4 + 2  # scenes, manifest, config
    assert run("generate", "--out", "a") == EXIT_IO
    assert run("generate", "--out", "a", "--force") == 0


def test_generate_counts(run):
    assert run("generate", "--out", "d", sets=["data.n_train=100", "data.n_val=20"]) == 0
    files = sorted(p.name for p in (run.root / "d").glob("scene_*.json"))
    assert len(files) == 120
    assert sorted(e["file"] for e in read_manifest(run.root / "d")["scenes"]) == files


def test_zero_step_sft_checkpoint_is_initialization(run):
    assert run("generate") == 0
    assert run("sft", sets=["sft.steps=0"]) == 0
    ck = load_checkpoint(run.root / "runs/default/sft/sft.ckpt")
    init = init_params(ck.params.config, 0)
    assert all(np.array_equal(ck.params[k], init[k]) for k in init.tensors)
    assert (run.root / "runs/default/sft/config.json").exists()


def test_resumed_sft_equals_uninterrupted(run):
    assert run("generate") == 0
    assert run("sft", "--out", "full") == 0
    assert run("sft", "--out", "part", "--stop-after", "4") == 0
    assert run("sft", "--out", "part", "--resume", "part/sft.ckpt") == 0
    full, part = run.root / "full", run.root / "part"
    assert (full / "sft_log.jsonl").read_bytes() == (part / "sft_log.jsonl").read_bytes()
    assert (full / "sft.ckpt").read_bytes() == (part / "sft.ckpt").read_bytes()


def test_sft_with_covt_builds_decoder(run):
    assert run("generate") == 0
    assert run("sft", sets=["sft.alpha=0.1", "sft.steps=2"]) == 0
    assert (run.root / "runs/default/decoder.bin").exists()
    recs = [json.loads(l) for l in (run.root / "runs/default/sft/sft_log.jsonl").read_text().splitlines()]
    assert all(r["covt"] > 0 for r in recs)
    assert "t" not in recs[0] and "wall_s" not in recs[0]


def test_rft_logs_and_gates(run):
    assert run("generate") == 0
    assert run("sft") == 0
    assert run("rft") == 0
    recs = [json.loads(l) for l in (run.root / "runs/default/rft/rft_log.jsonl").read_text().splitlines()]
    steps = [r for r in recs if r["step"] >= 0]
    assert len(steps) == 3
    assert all(r["segmenter_calls"] == 0 for r in steps)
    assert {"mean_reward", "filtered_fraction", "format_failure_rate"} <= set(steps[0])
    assert run("rft", "--out", "huge", sets=["rft.delta=1000"]) == 0
    recs = [json.loads(l) for l in (run.root / "huge/rft_log.jsonl").read_text().splitlines()]
    assert all(r["filtered_fraction"] == 1.0 for r in recs if r["step"] >= 0)
    start = load_checkpoint(run.root / "runs/default/sft/sft.ckpt").params
    end = load_checkpoint(run.root / "huge/rft.ckpt").params
    assert end.version == start.version + 3
    assert all(np.array_equal(start[k], end[k]) for k in start.tensors)


def test_eval_is_repeatable_and_checks_vocab(run):
    assert run("generate") == 0
    assert run("sft") == 0
    ck = "runs/default/sft/sft.ckpt"
    assert run("eval", "--ckpt", ck, "--out", "e1") == 0
    assert run("eval", "--ckpt", ck, "--out", "e2") == 0
    assert digest(run.root / "e1") == digest(run.root / "e2")
    rep = json.loads((run.root / "e1/eval_val.json").read_text())
    names = [e["file"] for e in read_manifest(run.root / "runs/default/data")["scenes"] if e["split"] == "val"]
    assert [r["scene"] for r in rep["records"]] == names
    assert run("eval", "--ckpt", ck, "--out", "e3", sets=["model.K=32"]) == EXIT_IO


def test_report_outputs(run, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["report", "--log", str(empty), "--out", str(tmp_path / "r0")]) == 0
    summary = json.loads((tmp_path / "r0/summary.json").read_text())
    assert summary["logs"]["empty"]["records"] == 0
    for svg in (tmp_path / "r0").glob("*.svg"):
        assert svg.read_text().lstrip().startswith("<?xml")

    log = tmp_path / "train.jsonl"
    log.write_text('{"step": 3, "mean_reward": 0.1}\nnot json\n{"step": 9, "mean_reward": 0.4}\n{"x": 1}\n')
    ev = tmp_path / "eval_val.json"
    ev.write_text(json.dumps({"aggregates": {"f1": 0.73, "pq": 0.5}}))
    assert main(["report", "--log", str(log), "--eval", str(ev), "--out", str(tmp_path / "r1")]) == 0
    summary = json.loads((tmp_path / "r1/summary.json").read_text())
    assert summary["skipped_records"] == 2
    assert summary["logs"]["train"]["plots"]["reward"]["x_range"] == [3, 9]
    assert summary["evals"]["eval_val"]["f1"] == 0.73
    first = (tmp_path / "r1/train_reward.svg").read_bytes()
    assert main(["report", "--log", str(log), "--eval", str(ev), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2/train_reward.svg").read_bytes() == first


def test_exit_codes(run, tmp_path):
    assert run("generate", sets=["rft.G=1"]) == EXIT_CONFIG
    assert run("generate", sets=["nope=1"]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert run("eval", "--ckpt", "missing.ckpt") == EXIT_IO
    assert main(["--threads", "0", "generate", "--config", str(tmp_path / "tiny.json")]) == EXIT_CONFIG
    assert main(["--threads", "1", "generate", "--config", str(tmp_path / "tiny.json")]) == 0
