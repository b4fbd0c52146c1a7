"""One-axis sweeps over training settings.

Axes
----
epochs           baseline of one model at each epoch budget
smallest-model   chains from each starting model to the largest
expansion-ratio  chains picked from the family at each growth ratio
alpha            first chain pair at each distillation ratio r
components       first chain pair with {none, iwi, ifd, both} transfer

The pair axes (alpha, components) share one trained first model. Arms run in
separate processes up to the configured parallelism; a failed arm is recorded
and the sweep goes on.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..chain import STATE_FILE, ChainSpec, ChainState, run_baseline, run_chain
from ..complexity import run_macs
from ..data import Samples
from ..expand import ExpandSpec
from ..modelzoo import FAMILIES, get_preset
from ..train import DistillConfig, TrainConfig, sample_spec
from .config import ExperimentConfig, chain_by_ratio
from .svg import line_chart

log = logging.getLogger(__name__)

AXES = ("epochs", "smallest-model", "expansion-ratio", "alpha", "components")
COMPONENTS = ("none", "iwi", "ifd", "both")
FIELDS = ("axis", "value", "status", "models", "epochs", "r1", "macs", "baseline_macs",
          "macs_ratio", "reduced_macs", "error")


class SweepError(ValueError):
    pass


@dataclass
class SweepReport:
    axis: str
    rows: list[dict]
    summary: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _cell(r.get(k)) for k in FIELDS})
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"axis": self.axis, "rows": self.rows, "summary": self.summary}


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return "" if v is None else v


def parallelism(requested: int) -> int:
    cap = os.environ.get("COMCHAIN_THREADS")
    n = max(1, int(requested))
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise SweepError(f"COMCHAIN_THREADS must be an integer, got {cap!r}") from None
    return n


def parse_values(axis: str, values) -> list:
    """Normalize sweep values; strings like ``"15,30,60"`` are split."""
    if axis not in AXES:
        raise SweepError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    if isinstance(values, str):
        values = [v.strip() for v in values.split(",") if v.strip()]
    values = list(values)
    if not values:
        raise SweepError("no sweep values given")
    try:
        if axis == "epochs":
            out = [int(v) for v in values]
            if any(v < 1 for v in out):
                raise SweepError("epoch values must be >= 1")
            return out
        if axis in ("expansion-ratio", "alpha"):
            out = [float(v) for v in values]
            if not all(math.isfinite(v) for v in out):
                raise SweepError("sweep values must be finite")
            return out
    except ValueError as e:
        raise SweepError(f"bad value for axis {axis}: {e}") from None
    out = [str(v) for v in values]
    if axis == "components":
        bad = [v for v in out if v not in COMPONENTS]
        if bad:
            raise SweepError(f"unknown components {bad}; choose from {', '.join(COMPONENTS)}")
    else:
        for v in out:
            try:
                get_preset(v)
            except ValueError as e:
                raise SweepError(str(e)) from None
    return out


def min_epochs(points: list[tuple[float, float]], target: float) -> float | None:
    """Smallest epoch count reaching ``target`` by linear interpolation of
    (epochs, metric) points; None when never reached."""
    pts = sorted(points)
    if not pts:
        return None
    if pts[0][1] >= target:
        return float(pts[0][0])
    for (e0, r0), (e1, r1) in zip(pts, pts[1:]):
        if r0 < target <= r1:
            return e0 + (target - r0) / (r1 - r0) * (e1 - e0)
    return None


def monotone(points: list[tuple[float, float]]) -> bool:
    ys = [y for _, y in sorted(points)]
    return all(b >= a for a, b in zip(ys, ys[1:]))


# ---------------------------------------------------------------------------
# arms (top-level so they pickle into worker processes)
# ---------------------------------------------------------------------------

def _baseline_macs(configs, n: int, epochs: int, tcfg: TrainConfig, m_full: int) -> float:
    return float(sum(run_macs(c, n, epochs, None, sample_spec(c, tcfg, m_full)) for c in configs))


def _run_arm(arm: dict) -> dict:
    row = {"axis": arm["axis"], "value": arm["value"], "status": "ok", "error": None}
    t0 = time.perf_counter()
    try:
        out = Path(arm["out"])
        train, ev = arm["train"], arm["eval"]
        if arm["kind"] == "baseline":
            cfg = get_preset(arm["model"])
            rec = run_baseline(cfg, arm["epochs"], train, ev, out, arm["tcfg"], arm["seed"])
            row.update(models=[cfg.name], epochs=[rec.epochs], r1=rec.final.get("r1"),
                       macs=rec.macs)
        else:
            spec: ChainSpec = arm["spec"]
            if arm.get("seed_state"):
                out.mkdir(parents=True, exist_ok=True)
                if not (out / STATE_FILE).exists():
                    arm["seed_state"].save(out)
            st = run_chain(spec, train, ev, out, run_id=f"sweep/{arm['axis']}/{arm['value']}")
            own = st.models[1:] if arm.get("seed_state") else st.models
            row.update(models=[m.name for m in st.models], epochs=[m.epochs for m in st.models],
                       r1=st.models[-1].final.get("r1"),
                       macs=float(sum(m.macs for m in own)))
        if arm.get("baseline_macs"):
            row["baseline_macs"] = arm["baseline_macs"]
            row["macs_ratio"] = arm["baseline_macs"] / row["macs"]
            row["reduced_macs"] = arm["baseline_macs"] - row["macs"]
    except Exception as e:  # noqa: BLE001 - an arm failure must not stop the sweep
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
        log.error("sweep arm %s=%s failed\n%s", arm["axis"], arm["value"], traceback.format_exc())
    row["wall_seconds"] = time.perf_counter() - t0
    return row


def _chain_epochs(cfg: ExperimentConfig, n: int) -> tuple[int, ...]:
    rest = list(cfg.epochs[1:]) or [cfg.epochs[0]]
    rest = rest + [rest[-1]] * max(0, n - 1 - len(rest))
    return (cfg.epochs[0], *rest[: n - 1])


def plan(cfg: ExperimentConfig, axis: str, values: list, out: Path, train: Samples,
         ev: Samples | None) -> tuple[list[dict], dict | None]:
    """Arms for the sweep; the second item describes a shared first-model run."""
    spec = cfg.chain_spec()
    tcfg = replace(cfg.train, seed=cfg.seed)
    m_full = train.captions.shape[1]
    base = {"axis": axis, "train": train, "eval": ev, "seed": cfg.seed}
    arms = []
    shared = None
    if axis == "epochs":
        model = cfg.sweep_model or cfg.models[min(1, len(cfg.models) - 1)]
        for v in values:
            arms.append({**base, "value": v, "kind": "baseline", "model": model, "epochs": v,
                         "tcfg": tcfg, "out": str(out / f"epochs-{v}")})
    elif axis in ("smallest-model", "expansion-ratio"):
        fam = FAMILIES[cfg.family]
        for v in values:
            if axis == "smallest-model":
                if v not in fam:
                    raise SweepError(f"{v} is not in family {cfg.family}")
                names = [n for n in fam[fam.index(v):] if n == v or n in cfg.models]
                if cfg.models[-1] not in names:
                    raise SweepError(f"{v} is above the chain's largest model {cfg.models[-1]}")
                names = names[: names.index(cfg.models[-1]) + 1]
            else:
                names = chain_by_ratio(fam, cfg.models[0], cfg.models[-1], v)
            configs = [get_preset(n) for n in names]
            s = replace(spec, configs=tuple(configs), epochs=_chain_epochs(cfg, len(configs)))
            arms.append({**base, "value": v, "kind": "chain", "spec": s,
                         "out": str(out / f"{axis}-{v}"),
                         "baseline_macs": _baseline_macs(configs, len(train), cfg.baseline_epochs,
                                                         tcfg, m_full)})
    else:
        if len(spec.configs) < 2:
            raise SweepError(f"axis {axis} needs a chain of at least two models")
        pair = replace(spec, configs=spec.configs[:2], epochs=spec.epochs[:2])
        shared = {"spec": replace(pair, configs=pair.configs[:1], epochs=pair.epochs[:1]),
                  "out": out / "shared-first"}
        for v in values:
            if axis == "alpha":
                s = replace(pair, distill=DistillConfig(mode="ratio", ratio=v))
            else:
                iwi, ifd = v in ("iwi", "both"), v in ("ifd", "both")
                distill = spec.distill if spec.distill.mode != "off" else DistillConfig()
                s = replace(pair, expand=(spec.expand or ExpandSpec(seed=cfg.seed)) if iwi else None,
                            distill=distill if ifd else DistillConfig(mode="off"))
            arms.append({**base, "value": v, "kind": "chain", "spec": s,
                         "out": str(out / f"{axis}-{v}")})
    return arms, shared


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir, train: Samples,
              ev: Samples | None, workers: int | None = None) -> SweepReport:
    values = parse_values(axis, values)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms, shared = plan(cfg, axis, values, out, train, ev)
    if shared is not None:
        first = run_chain(shared["spec"], train, ev, shared["out"], run_id="sweep/shared-first")
        seed_state = ChainState(0, list(first.models), first.cumulative_macs)
        for a in arms:
            a["seed_state"] = seed_state
    n = parallelism(cfg.parallelism if workers is None else workers)
    if n == 1 or len(arms) == 1:
        rows = [_run_arm(a) for a in arms]
    else:
        with ProcessPoolExecutor(max_workers=min(n, len(arms))) as pool:
            rows = list(pool.map(_run_arm, arms))
    for r in rows:
        r.pop("wall_seconds", None)     # keep sweep outputs reproducible
    report = SweepReport(axis, rows, _summary(cfg, axis, rows))
    _write(report, out)
    return report


def _summary(cfg: ExperimentConfig, axis: str, rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] == "ok" and r.get("r1") is not None]
    s: dict = {"arms": len(rows), "failed": len(rows) - len(ok)}
    if axis == "epochs" and ok:
        pts = [(float(r["value"]), r["r1"]) for r in ok]
        target = cfg.sweep_target if cfg.sweep_target is not None else (
            max(p[1] for p in pts) - cfg.lta_threshold)
        s.update(monotone=monotone(pts), target=target, min_epochs=min_epochs(pts, target))
    return s


def _write(report: SweepReport, out: Path) -> None:
    (out / "sweep.csv").write_text(report.csv())
    (out / "sweep.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    ok = [r for r in report.rows if r["status"] == "ok"]
    numeric = all(isinstance(r["value"], (int, float)) for r in report.rows)
    xs = [(float(r["value"]) if numeric else float(i)) for i, r in enumerate(ok)]
    if not numeric:
        xs = [float([x["value"] for x in report.rows].index(r["value"])) for r in ok]
    series = {"R@1": [(x, r["r1"]) for x, r in zip(xs, ok) if r.get("r1") is not None]}
    xlabel = report.axis if numeric else report.axis + " (" + ", ".join(
        f"{i}={r['value']}" for i, r in enumerate(report.rows)) + ")"
    (out / "sweep.svg").write_text(line_chart(series, f"Sweep over {report.axis}", xlabel, "R@1 (%)"))
    if any(r.get("macs") for r in ok):
        macs = {"run MACs": [(x, r["macs"]) for x, r in zip(xs, ok)]}
        if any(r.get("baseline_macs") for r in ok):
            macs["baseline MACs"] = [(x, r["baseline_macs"]) for x, r in zip(xs, ok)]
        (out / "sweep_macs.svg").write_text(line_chart(macs, f"Cost over {report.axis}", xlabel, "MACs"))
