"""``comchain`` command line.

Output layout under ``--out``::

    data/        manifest.json, shards, train.json / eval.json split manifests
    baselines/   <model>.comc, <model>.json, metrics.jsonl
    chain/       chain_state.json, checkpoints/, metrics.jsonl
    sweep-<axis>/
    report.md, *.svg
"""
from __future__ import annotations

import argparse
import contextlib
import errno
import json
import logging
import os
import sys
from pathlib import Path

from ..chain import ChainState, lta_check, run_baseline, run_chain
from ..complexity import (REFERENCE_RUNS, REFERENCE_SAMPLE, REFERENCE_TABLE, breakdown,
                          chain_report, validate_reference, validation_table)
from ..data import DatasetError, DatasetManifest, generate, read_samples, split
from ..modelzoo import FAMILIES, ConfigError, get_preset, reported_param_count
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, ExperimentConfig, load_config
from .evaluate import eval_retrieval
from .report import ReportError, emit_report
from .sweep import AXES, SweepError, run_sweep

log = logging.getLogger("comchain")

LOCK_NAME = ".comchain.lock"


class LockError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(out: Path):
    """Exclusive ownership of an output directory; stale locks of dead
    processes are taken over."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise LockError(f"{out} is in use by process {pid} (lock {path})") from None
            path.unlink(missing_ok=True)
    else:
        raise LockError(f"could not lock {out}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError as e:
        return e.errno == errno.EPERM
    return True


# ---------------------------------------------------------------------------

def _dataset(cfg: ExperimentConfig, out: Path):
    if cfg.data_manifest:
        manifest = DatasetManifest.load(cfg.data_manifest)
    elif (out / "data" / "manifest.json").exists():
        manifest = DatasetManifest.load(out / "data" / "manifest.json")
    else:
        manifest = generate(cfg.data_spec, out / "data")
    train_m, eval_m = split(manifest, cfg.split, seed=cfg.seed)
    return manifest, train_m, eval_m


def _samples(cfg: ExperimentConfig, out: Path):
    _, tr, ev = _dataset(cfg, out)
    return read_samples(tr), read_samples(ev)


def cmd_gen_data(cfg, args, out: Path) -> int:
    manifest, tr, ev = _dataset(cfg, out)
    tr.save(out / "data" / "train.json")
    ev.save(out / "data" / "eval.json")
    print(json.dumps({"manifest": str(manifest.path), "sha256": manifest.sha256,
                      "samples": manifest.total, "train": len(tr), "eval": len(ev)}, indent=2))
    return 0


def cmd_train_baseline(cfg, args, out: Path) -> int:
    train, ev = _samples(cfg, out)
    names = [args.preset] if args.preset else list(cfg.models)
    for name in names:
        rec = run_baseline(get_preset(name), cfg.baseline_epochs, train, ev, out / "baselines",
                           cfg.train, cfg.seed)
        print(f"{rec.name}: epochs {rec.epochs}  R@1 {rec.final.get('r1', float('nan')):.2f}  "
              f"MACs {rec.macs:.4g}")
    return 0


def _baseline_records(out: Path) -> dict[str, dict]:
    d = out / "baselines"
    recs = {}
    if d.is_dir():
        for p in sorted(d.glob("*.json")):
            body = json.loads(p.read_text())
            recs[body["name"]] = body
    return recs


def cmd_train_chain(cfg, args, out: Path) -> int:
    train, ev = _samples(cfg, out)
    state = run_chain(cfg.chain_spec(), train, ev, out / "chain")
    for m in state.models:
        print(f"{m.name}: epochs {m.epochs}  R@1 {m.final.get('r1', float('nan')):.2f}  "
              f"MACs {m.macs:.4g}  cumulative {m.cumulative_macs:.4g}")
    return _verdicts(state, _baseline_records(out), args.threshold or cfg.lta_threshold)


def _verdicts(state: ChainState, baselines: dict, threshold: float) -> int:
    if not all(m.name in baselines for m in state.models[1:]):
        print("(train-baseline for every successor to get LTA verdicts and cost ratios)")
        return 0
    failed = 0
    for m in state.models[1:]:
        v = lta_check(m.final["r1"], baselines[m.name]["final"]["r1"], threshold)
        failed += not v.passed
        print(f"LTA {m.name}: chain {v.candidate:.2f} vs baseline {v.baseline:.2f} "
              f"(gap {v.gap:.2f}, threshold {threshold:g}) {'pass' if v.passed else 'FAIL'}")
    base = [baselines[m.name]["macs"] if m.name in baselines else m.macs for m in state.models]
    print(state.report(base).table())
    return 1 if failed else 0


def cmd_eval(cfg, args, out: Path) -> int:
    if not args.checkpoint:
        raise ConfigFileError(["eval needs --checkpoint"])
    params, config = load_checkpoint(args.checkpoint)
    train, ev = _samples(cfg, out)
    res = eval_retrieval(params, config, train if args.split == "train" else ev)
    print(json.dumps({"model": config.name, "split": args.split, **res}, indent=2, sort_keys=True))
    return 0


def macs_text(preset: str) -> str:
    """Validation table for a reference family, otherwise a per-model breakdown."""
    names = FAMILIES.get(preset, [preset])
    refs = [n for n in names if n in REFERENCE_TABLE]
    lines = []
    if refs:
        lines += ["Reference validation (computed vs table, sample: "
                  f"{REFERENCE_SAMPLE.captions_per_image} captions/image, batch {REFERENCE_SAMPLE.batch_size})",
                  "", validation_table(validate_reference(refs)), ""]
        if refs == FAMILIES["vit_ref"]:
            rep = chain_report(["T", "S", "B", "L"], REFERENCE_RUNS["chain"],
                               REFERENCE_RUNS["baseline"], unit="ZMACs")
            lines += ["Chain vs baseline on the reported per-model run costs", "", rep.table(), ""]
    others = [n for n in names if n not in REFERENCE_TABLE]
    if others:
        lines += ["| Model | Params | C_f | C_f_first | C_b | C_u | C_t |", "|---|---|---|---|---|---|---|"]
        for n in others:
            cfg = get_preset(n)
            b = breakdown(cfg)
            lines.append(f"| {n} | {reported_param_count(cfg)['total']} | {b.C_f:.4g} | "
                         f"{b.C_f_first:.4g} | {b.C_b:.4g} | {b.C_u:.4g} | {b.C_t:.4g} |")
    return "\n".join(lines).rstrip() + "\n"


def cmd_macs(cfg, args, out: Path) -> int:
    preset = args.preset or "vit_ref"
    if preset not in FAMILIES:
        get_preset(preset)
    sys.stdout.write(macs_text(preset))
    return 0


def cmd_sweep(cfg, args, out: Path) -> int:
    if not args.axis or args.values is None:
        raise ConfigFileError(["sweep needs --axis and --values"])
    train, ev = _samples(cfg, out)
    rep = run_sweep(cfg, args.axis, args.values, out / f"sweep-{args.axis}", train, ev)
    print(rep.csv(), end="")
    if rep.summary:
        print(json.dumps(rep.summary, sort_keys=True))
    if rep.failed:
        print(f"{len(rep.failed)} sweep arm(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_report(cfg, args, out: Path) -> int:
    path = emit_report(out, threshold=args.threshold or cfg.lta_threshold)
    print(path)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, True, "generate the synthetic dataset and split manifests"),
    "train-baseline": (cmd_train_baseline, True, "train models individually (task loss only)"),
    "train-chain": (cmd_train_chain, True, "train the model chain (resumable)"),
    "eval": (cmd_eval, False, "retrieval metrics of a checkpoint"),
    "macs": (cmd_macs, False, "analytic MAC report"),
    "sweep": (cmd_sweep, True, "one-axis sweep"),
    "report": (cmd_report, False, "markdown + SVG report from metrics"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (YAML or JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--threshold", type=float, help="LTA threshold in R@1 points")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="comchain", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, _, help_) in COMMANDS.items():
        s = sub.add_parser(name, parents=[common], help=help_)
        if name in ("train-baseline", "macs"):
            s.add_argument("--preset", help="preset or family name")
        if name == "sweep":
            s.add_argument("--axis", choices=AXES)
            s.add_argument("--values", help="comma separated values")
        if name == "eval":
            s.add_argument("--checkpoint")
            s.add_argument("--split", choices=("eval", "train"), default="eval")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, locks, _ = COMMANDS[args.command]
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = load_config(args.config, overrides)
        out = Path(args.out or cfg.out)
        if locks:
            with run_lock(out):
                return fn(cfg, args, out)
        return fn(cfg, args, out)
    except (ConfigFileError, ConfigError, SweepError) as e:
        print(f"comchain: error: {e}", file=sys.stderr)
        return 2
    except (LockError, DatasetError, CheckpointError, ReportError, OSError) as e:
        print(f"comchain: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
