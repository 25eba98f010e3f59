"""Training curves as SVG files plus a summary table; no display needed."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp, so identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "nextpoint"

PANELS = (
    ("loss", ("loss", "ntp", "covt")),
    ("reward", ("mean_reward", "mean_r_dm")),
    ("val_f1", ("val_f1",)),
    ("rates", ("filtered_fraction", "format_failure_rate")),
)


def _read_log(path: Path) -> tuple[list[dict], int]:
    recs, bad = [], 0
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            bad += 1
            continue
        if not isinstance(rec, dict) or not isinstance(rec.get("step"), int) or isinstance(rec.get("step"), bool):
            bad += 1
            continue
        recs.append(rec)
    return recs, bad


def plot_series(recs: list[dict], keys: tuple[str, ...], title: str, path: Path) -> tuple[int, int] | None:
    """One line per key present in the records; returns the plotted step range."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [r["step"] for r in recs]
    for k in keys:
        pts = [(r["step"], r[k]) for r in recs if isinstance(r.get(k), (int, float))]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=k, lw=1.2)
    span = None
    if steps:
        span = (min(steps), max(steps))
        if span[1] > span[0]:
            ax.set_xlim(*span)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return span


def write_report(logs: list[Path], evals: list[Path], out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"logs": {}, "evals": {}, "skipped_records": 0}
    for log in logs:
        recs, bad = _read_log(log)
        summary["skipped_records"] += bad
        stem = log.stem
        entry = {"records": len(recs), "plots": {}}
        for name, keys in PANELS:
            if not any(k in r for r in recs for k in keys) and recs:
                continue
            path = out_dir / f"{stem}_{name}.svg"
            span = plot_series(recs, keys, f"{stem}: {name}", path)
            entry["plots"][name] = {"file": path.name, "x_range": list(span) if span else None}
        last = {}
        for r in recs:
            for k, v in r.items():
                if isinstance(v, (int, float)) and k != "step":
                    last[k] = v
        entry["last"] = last
        entry["steps"] = [recs[0]["step"], recs[-1]["step"]] if recs else [0, 0]
        summary["logs"][stem] = entry
    for ev in evals:
        agg = json.loads(ev.read_text())["aggregates"]
        summary["evals"][ev.stem] = agg
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.md").write_text(_table(summary))
    return summary


def _table(summary: dict) -> str:
    keys = ("f1", "precision", "recall", "pq", "dq", "sq", "aji")
    lines = ["| report | " + " | ".join(keys) + " |", "|---" * (len(keys) + 1) + "|"]
    for name, agg in summary["evals"].items():
        lines.append(f"| {name} | " + " | ".join(f"{agg.get(k, 0.0):.4f}" for k in keys) + " |")
    for name, entry in summary["logs"].items():
        last = ", ".join(f"{k}={v:.4g}" for k, v in sorted(entry["last"].items()))
        lines.append(f"\n{name}: {entry['records']} records, steps {entry['steps']}; last {last}")
    return "\n".join(lines) + "\n"
