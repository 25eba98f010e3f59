"""Command-line driver: generate, pretrain-decoder, sft, rft, eval, report.

Exit codes: 0 success, 2 configuration error, 3 file or format error, 4 numerical
failure.  Relative output paths are resolved against ``$NEXTPOINT_OUTPUT_ROOT``
(default: the working directory).
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_decoder, save_checkpoint, save_decoder
from .config import ConfigError, ExperimentConfig, dumps_config, load_config
from .decoder import pretrain_decoder
from .metrics import evaluate_split
from .optim import AdamState
from .policy import init_params
from .scene import SceneError, load_split, read_manifest, write_dataset
from .train import train_rft, train_sft

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
ROOT_ENV = "NEXTPOINT_OUTPUT_ROOT"


class OutputExistsError(OSError):
    pass


def resolve(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(os.environ.get(ROOT_ENV, ".")) / p


def run_dir(config: ExperimentConfig) -> Path:
    return resolve(config.output_dir)


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExistsError(f"{out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write_config(out: Path, config: ExperimentConfig) -> None:
    (out / "config.json").write_text(dumps_config(config))


class JsonlLog:
    """Append-only step log; wall time goes to a separate file so the log stays reproducible."""

    def __init__(self, path: Path, timings: Path, append: bool = False):
        mode = "a" if append else "w"
        self.fh = open(path, mode)
        self.th = open(timings, mode)
        self.t0 = time.perf_counter()

    def __call__(self, rec: dict) -> None:
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()
        self.th.write(json.dumps({"step": rec.get("step"), "wall_s": round(time.perf_counter() - self.t0, 3)}) + "\n")
        self.th.flush()

    def close(self) -> None:
        self.fh.close()
        self.th.close()


# ---------------------------------------------------------------- commands

def cmd_generate(config: ExperimentConfig, out_dir: Path, force: bool = False) -> Path:
    _prepare_out(out_dir, force)
    write_dataset(out_dir, config.scene, config.data.n_train, config.data.n_val, config.seeds.data)
    _write_config(out_dir, config)
    return out_dir


def cmd_pretrain_decoder(config: ExperimentConfig, out_path: Path) -> dict:
    """Train, check and freeze the mask decoder; the artifact stores its checksum."""
    d = config.decoder
    frozen, oracle, report = pretrain_decoder(
        config.decoder_config(), config.scene, steps=d.steps, batch=d.batch, lr=d.lr, seed=config.seeds.decoder
    )
    if report["heldout_iou"] < d.min_heldout_iou:
        raise FloatingPointError(f"decoder held-out IoU {report['heldout_iou']:.3f} below {d.min_heldout_iou}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_decoder(out_path, frozen, oracle, report)
    return report


def _decoder_for(config: ExperimentConfig, path: Path):
    if config.sft.alpha == 0:
        return None
    if not path.exists():
        cmd_pretrain_decoder(config, path)
    frozen, _, _ = load_decoder(path)
    if frozen.config != config.decoder_config():
        raise ConfigError(f"decoder artifact {path} was built for {frozen.config}")
    return frozen


def cmd_sft(config: ExperimentConfig, data_dir: Path, out_dir: Path, decoder_path: Path | None = None,
            resume: Path | None = None, stop_after: int | None = None, force: bool = False) -> Path:
    """Train from initialization (or resume a partial run) and save ``sft.ckpt``."""
    _, train = load_split(data_dir, "train")
    _, val = load_split(data_dir, "val")
    decoder_path = decoder_path or out_dir.parent / "decoder.bin"
    if resume is None:
        _prepare_out(out_dir, force)
        params, state, start = init_params(config.model, config.seeds.init), AdamState(), 0
    else:
        ckpt = load_checkpoint(resume)
        _check_vocab(ckpt, config)
        params, state, start = ckpt.params, ckpt.state, int(ckpt.meta.get("sft_step", 0))
        out_dir.mkdir(parents=True, exist_ok=True)
    frozen = _decoder_for(config, decoder_path)
    _write_config(out_dir, config)
    log = JsonlLog(out_dir / "sft_log.jsonl", out_dir / "sft_timings.jsonl", append=resume is not None)
    try:
        params = train_sft(params, state, train, val, config.sft, config.seeds.sft, frozen,
                           start_step=start, stop_step=stop_after, log=log, r_thresh=config.eval.r_thresh)
    finally:
        log.close()
    done = config.sft.steps if stop_after is None else min(stop_after, config.sft.steps)
    done = max(done, start)
    ckpt = Checkpoint(params, state, {"stage": "sft", "sft_step": done}, frozen.checksum if frozen else None)
    save_checkpoint(ckpt, out_dir / "sft.ckpt")
    return out_dir / "sft.ckpt"


def cmd_rft(config: ExperimentConfig, data_dir: Path, init: Path, out_dir: Path, force: bool = False) -> Path:
    ckpt = load_checkpoint(init)
    _check_vocab(ckpt, config)
    _, train = load_split(data_dir, "train")
    _, val = load_split(data_dir, "val")
    _prepare_out(out_dir, force)
    _write_config(out_dir, config)
    log = JsonlLog(out_dir / "rft_log.jsonl", out_dir / "rft_timings.jsonl")
    try:
        # a fresh optimizer: RFT is a new stage with its own learning rate
        params = train_rft(ckpt.params, AdamState(), train, val, config.rft, config.seeds.rft, log, config.eval.r_thresh)
    finally:
        log.close()
    out = Checkpoint(params, AdamState(), {"stage": "rft", "rft_step": config.rft.steps}, ckpt.decoder_checksum)
    save_checkpoint(out, out_dir / "rft.ckpt")
    return out_dir / "rft.ckpt"


def _check_vocab(ckpt: Checkpoint, config: ExperimentConfig) -> None:
    want = config.model.vocab.layout_hash()
    if ckpt.vocab_hash != want:
        raise CheckpointError(f"checkpoint vocabulary {ckpt.vocab_hash} does not match the configured vocabulary {want}")


def cmd_eval(config: ExperimentConfig, ckpt_path: Path, data_dir: Path, split: str, out_dir: Path):
    ckpt = load_checkpoint(ckpt_path)
    _check_vocab(ckpt, config)
    names, scenes = load_split(data_dir, split)
    if not scenes:
        raise SceneError(f"split {split!r} is empty")
    report = evaluate_split(ckpt.params, names, scenes, config.eval.r_thresh)
    report.config["split"] = split
    out_dir.mkdir(parents=True, exist_ok=True)
    return report, report.write(out_dir, f"eval_{split}")


def cmd_report(logs: list[Path], evals: list[Path], out_dir: Path) -> dict:
    from .report import write_report

    return write_report(logs, evals, out_dir)


# ---------------------------------------------------------------- argument parsing

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config leaf, e.g. sft.lr=0.001 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nextpoint", description=__doc__.split("\n")[0])
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic scene dataset")
    _add_config_args(p)
    p.add_argument("--out", type=Path, help="dataset directory (default <run>/data)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("pretrain-decoder", help="train and freeze the prompt-to-mask decoder")
    _add_config_args(p)
    p.add_argument("--out", type=Path, help="artifact path (default <run>/decoder.bin)")

    p = sub.add_parser("sft", help="supervised training")
    _add_config_args(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, help="default <run>/sft")
    p.add_argument("--decoder", type=Path, help="default <run>/decoder.bin, built if missing")
    p.add_argument("--resume", type=Path, help="continue from a partial sft checkpoint")
    p.add_argument("--stop-after", type=int, help="stop once this many steps are done")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("rft", help="GRPO fine-tuning from an sft checkpoint")
    _add_config_args(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--init", type=Path, help="default <run>/sft/sft.ckpt")
    p.add_argument("--out", type=Path, help="default <run>/rft")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="greedy decoding plus the full metric suite")
    _add_config_args(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="val")
    p.add_argument("--out", type=Path, help="default <run>/eval")

    p = sub.add_parser("report", help="plots and summary from logs and eval reports")
    p.add_argument("--log", dest="logs", type=Path, action="append", default=[])
    p.add_argument("--eval", dest="evals", type=Path, action="append", default=[])
    p.add_argument("--out", type=Path, required=True)
    return ap


def _dispatch(args) -> int:
    if args.command == "report":
        summary = cmd_report([resolve(p) for p in args.logs], [resolve(p) for p in args.evals], resolve(args.out))
        print(json.dumps(summary, sort_keys=True))
        return 0
    config = load_config(args.config, args.overrides)
    run = run_dir(config)
    data = resolve(args.data) if getattr(args, "data", None) else run / "data"
    if args.command == "generate":
        out = cmd_generate(config, resolve(args.out) if args.out else run / "data", args.force)
        print(f"wrote {len(read_manifest(out)['scenes'])} scenes to {out}")
    elif args.command == "pretrain-decoder":
        out = resolve(args.out) if args.out else run / "decoder.bin"
        print(json.dumps(cmd_pretrain_decoder(config, out), sort_keys=True))
    elif args.command == "sft":
        out = resolve(args.out) if args.out else run / "sft"
        dec = resolve(args.decoder) if args.decoder else run / "decoder.bin"
        resume = resolve(args.resume) if args.resume else None
        print(f"saved {cmd_sft(config, data, out, dec, resume, args.stop_after, args.force)}")
    elif args.command == "rft":
        init = resolve(args.init) if args.init else run / "sft" / "sft.ckpt"
        out = resolve(args.out) if args.out else run / "rft"
        print(f"saved {cmd_rft(config, data, init, out, args.force)}")
    elif args.command == "eval":
        out = resolve(args.out) if args.out else run / "eval"
        report, paths = cmd_eval(config, resolve(args.ckpt), data, args.split, out)
        print(json.dumps(report.aggregates, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return _dispatch(args)
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SceneError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
