"""Markdown + SVG report from a run directory (read-only).

Looks for, at any depth below the directory:

* ``metrics.jsonl``      per-epoch rows (required, at least one row)
* ``chain_state.json``   a chain run (cost table, LTA verdicts)
* ``<model>.json``       baseline records written next to baseline checkpoints
"""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

from ..chain import STATE_FILE, ChainState, lta_check
from .metrics import MetricsRow, read_metrics
from .svg import line_chart

EXPECTED = ("metrics.jsonl", STATE_FILE, "<model>.json (baseline record)")


class ReportError(FileNotFoundError):
    pass


def _baselines(root: Path) -> dict[str, dict]:
    out = {}
    for p in sorted(root.rglob("*.json")):
        if p.name == STATE_FILE or p.name == "manifest.json":
            continue
        try:
            body = json.loads(p.read_text())
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(body, dict) and {"name", "epochs", "macs", "final", "checkpoint"} <= set(body):
            out.setdefault(body["name"], body)
    return out


def collect(root: Path) -> tuple[list[MetricsRow], list[tuple[Path, ChainState]], dict[str, dict]]:
    rows: list[MetricsRow] = []
    for p in sorted(root.rglob("metrics.jsonl")):
        rows.extend(read_metrics(p))
    chains = []
    for p in sorted(root.rglob(STATE_FILE)):
        st = ChainState.load(p.parent)
        if st is not None and st.models:
            chains.append((p.parent, st))
    return rows, chains, _baselines(root)


def _g(x: float) -> str:
    return f"{x:.4g}"


def emit_report(metrics_dir, out_dir=None, threshold: float = 2.0) -> Path:
    """Write ``report.md`` plus SVG curves; returns the markdown path."""
    root = Path(metrics_dir)
    rows, chains, baselines = collect(root) if root.is_dir() else ([], [], {})
    if not rows:
        raise ReportError(f"no metrics rows under {root}; expected files: {', '.join(EXPECTED)}")
    out = Path(out_dir) if out_dir is not None else root
    out.mkdir(parents=True, exist_ok=True)

    by_run: dict[str, list[MetricsRow]] = defaultdict(list)
    for r in rows:
        by_run[r.run_id].append(r)
    runs = sorted(by_run)

    charts = {
        "r1_vs_epoch.svg": line_chart({k: [(r.epoch, r.r1) for r in by_run[k] if r.r1 is not None]
                                       for k in runs}, "Retrieval R@1", "epoch", "R@1 (%)"),
        "loss_vs_epoch.svg": line_chart({k: [(r.epoch, r.l_total) for r in by_run[k]] for k in runs},
                                        "Training loss", "epoch", "l_total"),
        "r1_vs_macs.svg": line_chart({k: [(r.cumulative_macs, r.r1) for r in by_run[k]
                                          if r.r1 is not None] for k in runs},
                                     "R@1 against cumulative MACs", "MACs", "R@1 (%)"),
    }
    for name, svg in charts.items():
        (out / name).write_text(svg)

    md = ["# Training report", "", f"Source: `{root.name}`", "", "## Runs", "",
          "| run | model | epochs | final l_task | final l_ifd | final R@1 | MACs |",
          "|---|---|---:|---:|---:|---:|---:|"]
    for k in runs:
        last = by_run[k][-1]
        r1 = "" if last.r1 is None else f"{last.r1:.2f}"
        md.append(f"| {k} | {last.model} | {last.epoch} | {last.l_task:.4f} | {last.l_ifd:.4f} | "
                  f"{r1} | {_g(last.cumulative_macs)} |")
    md += ["", "## Curves", ""] + [f"![{n}]({n})" for n in charts] + [""]

    if baselines:
        md += ["## Baselines", "", "| model | epochs | R@1 | MACs |", "|---|---:|---:|---:|"]
        for name in sorted(baselines):
            b = baselines[name]
            md.append(f"| {name} | {b['epochs']} | {b['final'].get('r1', float('nan')):.2f} | "
                      f"{_g(b['macs'])} |")
        md.append("")

    for path, st in chains:
        rel = path.relative_to(root) if path != root else Path(".")
        md += [f"## Chain `{rel}`", "", "| model | epochs | R@1 | MACs | cumulative MACs |",
               "|---|---:|---:|---:|---:|"]
        for m in st.models:
            md.append(f"| {m.name} | {m.epochs} | {m.final.get('r1', float('nan')):.2f} | "
                      f"{_g(m.macs)} | {_g(m.cumulative_macs)} |")
        md.append("")
        missing = [m.name for m in st.models[1:] if m.name not in baselines]
        if missing:
            md += [f"Cost table and LTA verdicts need baselines for: {', '.join(missing)}.", ""]
            continue
        base_macs = [baselines[m.name]["macs"] if m.name in baselines else m.macs
                     for m in st.models]
        md += ["### Cost", "", "```", st.report(base_macs).table(), "```", "",
               f"### LTA verdicts (threshold {threshold:g} points)", "",
               "| model | chain R@1 | baseline R@1 | gap | verdict |", "|---|---:|---:|---:|---|"]
        for m in st.models[1:]:
            v = lta_check(m.final["r1"], baselines[m.name]["final"]["r1"], threshold)
            md.append(f"| {m.name} | {v.candidate:.2f} | {v.baseline:.2f} | {v.gap:.2f} | "
                      f"{'pass' if v.passed else 'fail'} |")
        md.append("")
    path = out / "report.md"
    path.write_text("\n".join(md).rstrip("\n") + "\n")
    return path
