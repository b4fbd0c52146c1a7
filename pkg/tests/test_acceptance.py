"""Acceptance criteria A1-A10. Each test records a PASS/FAIL line (see conftest)."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comchain.chain import ChainState, lta_check, run_baseline, run_chain
from comchain.complexity import REFERENCE_RUNS, SampleSpec, breakdown, chain_report, validate_reference
from comchain.data import DatasetManifest, generate, read_samples, split, verify
from comchain.expand import DEPTH_METHODS, ExpandSpec, expand_model, extract_submodel
from comchain.harness import cli
from comchain.harness.checkpoint import load_checkpoint, save_checkpoint
from comchain.harness.config import parse_config
from comchain.harness.sweep import run_sweep
from comchain.losses import (
    ContrastiveBatch,
    DistillPair,
    ifd_loss,
    ifd_pair_loss,
    t2v_loss,
    task_loss,
    total_loss,
    v2t_loss,
)
from comchain.modelzoo import NANO, build_params
from comchain.numerics import grad_check, l2_normalize
from test_complexity import configs as random_configs
from test_expand import config_pairs
from test_numerics import CASES, weighted

TABLE_F = {  # name: (params M, forward G, training G)
    "vit_t16_ref": (15.10, 5.82, 17.57),
    "vit_s16_ref": (43.10, 14.44, 43.65),
    "vit_b16_ref": (124.02, 35.09, 106.27),
    "vit_l16_ref": (389.14, 100.92, 306.11),
}


def test_a1_reference_macs(verdict):
    t0 = time.perf_counter()
    text = cli.macs_text("vit_ref")
    rows = {r.model: r for r in validate_reference(list(TABLE_F))}
    elapsed = time.perf_counter() - t0
    worst = [0.0, 0.0, 0.0]
    for name, (p, f, t) in TABLE_F.items():
        r = rows[name]
        worst = [max(worst[0], abs(r.params_m - p) / p), max(worst[1], abs(r.forward_g - f) / f),
                 max(worst[2], abs(r.train_g - t) / t)]
        assert name in text
    ok = worst[0] <= 0.02 and worst[1] <= 0.05 and worst[2] <= 0.05 and elapsed < 1.0
    verdict("A1", ok, f"max err params {100 * worst[0]:.2f}% fwd {100 * worst[1]:.2f}% "
                      f"train {100 * worst[2]:.2f}%, {elapsed:.3f}s")
    assert ok


def test_a2_table_ratios(verdict):
    t0 = time.perf_counter()
    rep = chain_report(["T", "S", "B", "L"], REFERENCE_RUNS["chain"], REFERENCE_RUNS["baseline"])
    ind, acc = f"{rep.rows[-1].individual_ratio:.2f}", f"{rep.rows[-1].accumulated_ratio:.2f}"
    elapsed = time.perf_counter() - t0
    ok = ind == "7.65" and acc == "5.68" and elapsed < 1.0
    verdict("A2", ok, f"individual {ind}x, accumulated {acc}x")
    assert ok


_A3 = []


@settings(max_examples=100, deadline=None, derandomize=True)
@given(random_configs(), st.integers(1, 1024))
def _a3_case(cfg, batch):
    b = breakdown(cfg, SampleSpec(cfg.captions_per_image, batch))
    _A3.append(b.C_b == 2 * b.C_f - b.C_f_first and b.C_t == b.C_f + b.C_b + b.C_u)
    assert _A3[-1]


def test_a3_mac_identities(verdict):
    _A3.clear()
    try:
        _a3_case()
    finally:
        ok = len(_A3) >= 100 and all(_A3)
        verdict("A3", ok, f"{sum(_A3)}/{len(_A3)} configs exact")
    assert ok


def _loss_cases():
    def contrastive(fn):
        def f(p):
            return fn(ContrastiveBatch.from_logit_scale(l2_normalize(p["v"]), l2_normalize(p["t"]),
                                                        p["s"], 2))
        return {"v": (3, 4), "t": (6, 4), "s": (1,)}, f

    def ifd(p):
        return ifd_loss(DistillPair(p["tv"], p["sv"], p["w"], p["b"], alpha=2.5))

    def pair(p):
        return ifd_pair_loss(DistillPair(p["tv"], p["sv"], p["w"], p["b"], alpha=2.5),
                             DistillPair(p["tt"], p["st"], p["w"], p["b"], alpha=2.5))

    def total(p):
        b = ContrastiveBatch.from_logit_scale(l2_normalize(p["v"]), l2_normalize(p["t"]), p["s"], 2)
        return total_loss(task_loss(b), pair(p))
    d = {"tv": (3, 2), "sv": (3, 4), "w": (2, 4), "b": (2,), "tt": (6, 2), "st": (6, 4)}
    return {
        "t2v": contrastive(t2v_loss), "v2t": contrastive(v2t_loss), "task": contrastive(task_loss),
        "ifd": ({k: d[k] for k in ("tv", "sv", "w", "b")}, ifd),
        "ifd_pair": (d, pair),
        "total": ({**d, "v": (3, 4), "t": (6, 4), "s": (1,)}, total),
    }


def test_a4_gradients(verdict):
    t0 = time.perf_counter()
    worst = {}
    cases = {f"primitive:{k}": (s, lambda p, fn=fn: weighted(fn(p))) for k, (s, fn) in CASES.items()}
    cases.update({f"loss:{k}": v for k, v in _loss_cases().items()})
    rng = np.random.default_rng(2024)
    for name, (shapes, fn) in cases.items():
        worst[name] = max(grad_check(fn, {k: rng.standard_normal(s) for k, s in shapes.items()})
                          for _ in range(20))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    ok = not bad and elapsed < 60
    verdict("A4", ok, f"{len(cases)} functions x 20 points, max rel err "
                      f"{max(worst.values()):.2e}, {elapsed:.1f}s" + (f", failing {bad}" if bad else ""))
    assert ok


_A5 = []


@settings(max_examples=50, deadline=None, derandomize=True)
@given(config_pairs(), st.integers(0, 10_000))
def _a5_case(pair, seed):
    small, big = pair
    teacher = build_params(small, seed)
    for depth in DEPTH_METHODS:
        student, maps = expand_model(teacher, small, big, ExpandSpec("insertion", depth, seed=seed))
        sub = extract_submodel(student, small, maps)
        ok = sub.keys() == teacher.keys() and all(np.array_equal(sub[k], teacher[k]) for k in sub)
        if depth == "duplicate":
            for tower, m in maps.items():
                for k, (kind, ref) in enumerate(m.sources):
                    if kind == "duplicate":
                        for key in [n for n in student if n.startswith(f"{tower}.block{k}.")]:
                            ok &= np.array_equal(student[key],
                                                 student[key.replace(f"block{k}.", f"block{ref}.")])
        _A5.append(bool(ok))
        assert ok


def test_a5_embedding_exactness(verdict):
    _A5.clear()
    t0 = time.perf_counter()
    try:
        _a5_case()
    finally:
        elapsed = time.perf_counter() - t0
        ok = len(_A5) >= 150 and all(_A5) and elapsed < 60
        verdict("A5", ok, f"{sum(_A5)}/{len(_A5)} (pair, depth mode) cases bit-exact, {elapsed:.1f}s")
    assert ok


def test_a6_loss_values(verdict):
    errs = []
    for n in (2, 4, 8):
        v = np.tile([1.0, 0.0, 0.0], (n, 1))
        errs.append(abs(t2v_loss(ContrastiveBatch.from_temperature(v, v, 1.0, 1)).item() - math.log(n)))
    hand = t2v_loss(ContrastiveBatch.from_temperature(np.eye(2), np.eye(2), 1.0, 1)).item()
    rng = np.random.default_rng(6)
    linear = True
    for _ in range(200):
        t, s, w = rng.standard_normal((3, 2)), rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
        a = float(rng.uniform(0, 1000))
        one = ifd_loss(DistillPair(t, s, w, np.zeros(2), 1.0)).item()
        linear &= ifd_loss(DistillPair(t, s, w, np.zeros(2), a)).item() == a * one
    ok = max(errs) <= 1e-6 and abs(hand - 0.3133) <= 1e-4 and linear
    verdict("A6", ok, f"ln N max err {max(errs):.1e}, N=2 hand case {hand:.5f}, alpha-linear {linear}")
    assert ok


# -- desk-scale behaviour ------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default dataset, 60-epoch baselines and the default three-model chain."""
    root = tmp_path_factory.mktemp("desk")
    cfg = parse_config({"out": str(root)})
    cpu0 = time.process_time()
    manifest = generate(cfg.data_spec, root / "data")
    tr_m, ev_m = split(manifest, cfg.split, seed=cfg.seed)
    train, ev = read_samples(tr_m), read_samples(ev_m)
    baselines = {name: run_baseline(cfg.configs[i], cfg.baseline_epochs, train, ev,
                                    root / "baselines", cfg.train, cfg.seed)
                 for i, name in enumerate(cfg.models) if i > 0}
    state = run_chain(cfg.chain_spec(), train, ev, root / "chain")
    cpu = time.process_time() - cpu0
    return {"root": root, "cfg": cfg, "train": train, "eval": ev, "manifest": manifest,
            "baselines": baselines, "state": state, "cpu": cpu}


def test_a7_chain_lossless_acceleration(desk, verdict):
    state: ChainState = desk["state"]
    base = desk["baselines"]
    verdicts = [lta_check(m.final["r1"], base[m.name].final["r1"], desk["cfg"].lta_threshold)
                for m in state.models[1:]]
    base_macs = [state.models[0].macs] + [base[m.name].macs for m in state.models[1:]]
    rep = state.report(base_macs)
    ratio = rep.rows[-1].accumulated_ratio
    ok = all(v.passed for v in verdicts) and ratio >= 1.5 and desk["cpu"] <= 30 * 60
    detail = ", ".join(f"{m.name} chain {v.candidate:.2f} vs base {v.baseline:.2f}"
                       for m, v in zip(state.models[1:], verdicts))
    verdict("A7", ok, f"{detail}; accumulated {ratio:.2f}x; {desk['cpu'] / 60:.1f} CPU-min")
    assert ok


def test_a8_components_ordering(desk, verdict, tmp_path):
    cfg = desk["cfg"]
    state: ChainState = desk["state"]
    pair_cfg = replace(cfg, models=cfg.models[:2], epochs=cfg.epochs[:2])
    shared = tmp_path / "shared-first"
    shared.mkdir()
    ChainState(0, state.models[:1], state.models[0].cumulative_macs).save(shared)   # reuse the 60-epoch m_1
    cpu0 = time.process_time()
    rep = run_sweep(pair_cfg, "components", "none,iwi,ifd,both", tmp_path, desk["train"], desk["eval"],
                    workers=1)
    cpu = time.process_time() - cpu0
    r = {row["value"]: row["r1"] for row in rep.rows}
    ok = (not rep.failed and r["both"] >= r["ifd"] - 1 and r["ifd"] >= r["none"] - 1
          and r["both"] >= r["iwi"] - 1 and cpu <= 45 * 60)
    verdict("A8", ok, "R@1 " + ", ".join(f"{k} {v:.2f}" for k, v in r.items())
                      + f" at {cfg.epochs[1]} epochs; {cpu / 60:.1f} CPU-min")
    assert ok


def test_a9_first_batch_ratio(desk, verdict):
    fb = desk["state"].models[1].first_batch
    ratio = fb["l_ifd"] / fb["l_task"]
    ok = 0.08 <= ratio <= 0.12
    verdict("A9", ok, f"first transfer batch l_ifd/l_task = {ratio:.4f} (alpha {fb['alpha']:.4g})")
    assert ok


def test_a10_persistence(desk, verdict, tmp_path):
    checks = {}
    for name, cfg in NANO.items():
        p = build_params(cfg, 3)
        save_checkpoint(p, cfg, tmp_path / f"{name}.comc")
        q, back = load_checkpoint(tmp_path / f"{name}.comc")
        checks[f"ckpt {name}"] = back == cfg and all(q[k].tobytes() == p[k].tobytes() for k in p)
    for m in desk["state"].models:
        p, cfg = load_checkpoint(m.checkpoint)
        save_checkpoint(p, cfg, tmp_path / "again.comc")
        checks[f"chain {m.name}"] = (tmp_path / "again.comc").read_bytes() == open(m.checkpoint, "rb").read()
    man: DatasetManifest = desk["manifest"]
    again = generate(man.spec, tmp_path / "data")
    checks["shards"] = all((man.root / a["path"]).read_bytes() == (again.root / b["path"]).read_bytes()
                           for a, b in zip(man.shards, again.shards)) and man.sha256 == again.sha256
    checks["manifest hashes"] = verify(DatasetManifest.load(man.root / "manifest.json"))
    tr, ev = split(man, [0.9, 0.1])
    back = DatasetManifest.load(ev.save(tmp_path / "ev.json"))
    checks["split manifest"] = np.array_equal(read_samples(back).images, read_samples(ev).images)
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    verdict("A10", ok, f"{len(checks) - len(failed)}/{len(checks)} roundtrips bit-exact"
                       + (f", failing {failed}" if failed else ""))
    assert ok
