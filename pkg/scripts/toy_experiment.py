"""Toy end-to-end run: data, SFT, evaluation, then an RFT ablation over seeds.

    python scripts/toy_experiment.py --out runs/toy

Every stage goes through the command-line driver with the default config, so
the artifacts are the same ones a user gets from the individual subcommands.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from nextpoint.cli import main

VARIANTS = {
    "lvgf_fgas": [],
    "plain": ["rft.lvgf=false", "rft.fgas=false"],
}


def _call(*argv: str) -> None:
    code = main(list(argv))
    if code != 0:
        raise RuntimeError(f"nextpoint {' '.join(argv)} exited with {code}")


def _sets(items: list[str]) -> list[str]:
    return [a for s in items for a in ("--set", s)]


def _log(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def _f1(eval_dir: Path) -> float:
    return json.loads((eval_dir / "eval_val.json").read_text())["aggregates"]["f1"]


def run_sft(out: Path, extra: list[str] = ()) -> dict:
    """Generate data, train SFT (building the mask decoder first) and evaluate on val."""
    base = _sets([f"output_dir={out}", *extra])
    t0 = time.perf_counter()
    _call("generate", *base, "--force")
    _call("sft", *base, "--force")
    _call("eval", *base, "--ckpt", str(out / "sft" / "sft.ckpt"), "--out", str(out / "eval_sft"))
    return {"f1": _f1(out / "eval_sft"), "seconds": time.perf_counter() - t0}


def run_rft(out: Path, variant: str, seed: int, window: int, extra: list[str] = ()) -> dict:
    tag = f"rft_{variant}_s{seed}"
    base = _sets([f"output_dir={out}", f"seeds.rft={seed}", *VARIANTS[variant], *extra])
    t0 = time.perf_counter()
    _call("rft", *base, "--out", str(out / tag), "--force")
    _call("eval", *base, "--ckpt", str(out / tag / "rft.ckpt"), "--out", str(out / f"eval_{tag}"))
    rewards = [r["mean_reward"] for r in _log(out / tag / "rft_log.jsonl") if r["step"] >= 0]
    return {
        "variant": variant,
        "seed": seed,
        "f1": _f1(out / f"eval_{tag}"),
        "first_window_reward": float(np.mean(rewards[:window])),
        "final_window_reward": float(np.mean(rewards[-window:])),
        "seconds": time.perf_counter() - t0,
    }


def run_all(out: Path, seeds: list[int], window: int) -> dict:
    out = out.resolve()
    summary = {"sft": run_sft(out), "rft": []}
    for seed in seeds:
        for variant in VARIANTS:
            summary["rft"].append(run_rft(out, variant, seed, window))
    logs = [out / "sft" / "sft_log.jsonl"] + [out / f"rft_{r['variant']}_s{r['seed']}" / "rft_log.jsonl" for r in summary["rft"]]
    evals = [out / "eval_sft" / "eval_val.json"]
    _call("report", *[a for p in logs for a in ("--log", str(p))], *[a for p in evals for a in ("--eval", str(p))],
          "--out", str(out / "report"))
    (out / "toy_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--window", type=int, default=50, help="steps per reward window")
    args = ap.parse_args()
    print(json.dumps(run_all(args.out, args.seeds, args.window), indent=2, sort_keys=True))
