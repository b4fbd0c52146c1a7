"""Experiment configuration.

The schema (YAML or JSON file; every key optional)::

    seed: 0
    out: runs/default
    data:
      manifest: path/to/manifest.json     # use existing shards, or
      spec: {n_classes: 16, samples_per_class: 64, noise: 1.0, ...}
      split: [0.9, 0.1]                   # train / eval fractions
    family: nano                          # preset family
    chain:
      models: [nano-T, nano-S, nano-B]    # explicit chain, or
      smallest: nano-T                    # pick from the family by
      largest: nano-B                     #   bounds and
      expansion_ratio: 4.0                #   target parameter growth
      epochs: [60, 15, 10]                # explicit budgets, or
      schedule: {first: 60, transfer: 15, decrement: 5, min: 1}
    baseline_epochs: 60
    train: {batch_size: 64, lr: 0.001, warmup_steps: 400, transfer_warmup: 50,
            weight_decay: 0.1, beta1: 0.9, beta2: 0.98, eps: 1.0e-8,
            captions_per_image: null}
    distill: {ratio: 0.1}                 # or {alpha: 500}, or "off"
    expand: {width_method: insertion, depth_method: duplicate, fill_std: 0.02}   # or "off"
    lta_threshold: 2.0
    sweep: {model: nano-S, target: null, parallelism: 1}
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from ..chain import ChainSpec, allocate_epochs
from ..data import SyntheticSpec
from ..expand import ExpandSpec
from ..modelzoo import FAMILIES, ModelConfig, get_preset, param_count
from ..numerics import ContractError
from ..train import DistillConfig, TrainConfig


class ConfigFileError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid experiment config:\n  - " + "\n  - ".join(problems))
        self.problems = problems


TOP_KEYS = {"seed", "out", "data", "family", "chain", "baseline_epochs", "train", "distill",
            "expand", "lta_threshold", "sweep"}
TRAIN_KEYS = {"batch_size", "lr", "warmup_steps", "transfer_warmup", "weight_decay", "beta1",
              "beta2", "eps", "captions_per_image"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data_manifest: str | None = None
    data_spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    split: tuple[float, ...] = (0.9, 0.1)
    family: str = "nano"
    models: tuple[str, ...] = ("nano-T", "nano-S", "nano-B")
    epochs: tuple[int, ...] = (60, 15, 10)
    baseline_epochs: int = 60
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer_warmup: int = 50
    distill: DistillConfig = field(default_factory=DistillConfig)
    expand: ExpandSpec | None = field(default_factory=ExpandSpec)
    lta_threshold: float = 2.0
    sweep_model: str | None = None
    sweep_target: float | None = None
    parallelism: int = 1

    @property
    def configs(self) -> list[ModelConfig]:
        return [get_preset(m) for m in self.models]

    def chain_spec(self) -> ChainSpec:
        return ChainSpec(self.configs, self.epochs, self.expand, self.distill,
                         replace(self.train, seed=self.seed), self.transfer_warmup, self.seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "out": self.out,
            "data": {"manifest": self.data_manifest, "spec": self.data_spec.__dict__,
                     "split": list(self.split)},
            "family": self.family,
            "chain": {"models": list(self.models), "epochs": list(self.epochs)},
            "baseline_epochs": self.baseline_epochs,
            "train": {k: getattr(self.train, k) for k in TRAIN_KEYS - {"transfer_warmup"}}
            | {"transfer_warmup": self.transfer_warmup},
            "distill": "off" if self.distill.mode == "off" else (
                {"ratio": self.distill.ratio} if self.distill.mode == "ratio"
                else {"alpha": self.distill.alpha}),
            "expand": "off" if self.expand is None else {
                "width_method": self.expand.width_method,
                "depth_method": self.expand.depth_method,
                "fill_std": self.expand.fill_std},
            "lta_threshold": self.lta_threshold,
            "sweep": {"model": self.sweep_model, "target": self.sweep_target,
                      "parallelism": self.parallelism},
        }


def chain_by_ratio(family_names: list[str], smallest: str, largest: str, ratio: float) -> list[str]:
    """Walk the family from ``smallest``: each next model is the one whose
    parameter growth is closest (in log space) to ``ratio``; ends at ``largest``."""
    if not ratio > 1:
        raise ValueError("expansion ratio must be > 1")
    try:
        i, j = family_names.index(smallest), family_names.index(largest)
    except ValueError as e:
        raise ValueError(f"chain bounds not in family: {e}") from None
    if j < i:
        raise ValueError("largest precedes smallest in the family")
    counts = [param_count(get_preset(n)) for n in family_names]
    chain = [i]
    while chain[-1] != j:
        cur = chain[-1]
        best = min(range(cur + 1, j + 1),
                   key=lambda k: (abs(math.log(counts[k] / counts[cur] / ratio)), k))
        chain.append(best)
    return [family_names[k] for k in chain]


def _schedule(sched: dict, n: int) -> list[int]:
    first = int(sched.get("first", 60))
    rest = allocate_epochs(int(sched.get("transfer", 15)), int(sched.get("decrement", 0)), n,
                           int(sched.get("min", 1))) if n > 1 else []
    return [first, *rest]


def parse_config(body: dict | None) -> ExperimentConfig:
    body = dict(body or {})
    probs: list[str] = []
    unknown = set(body) - TOP_KEYS
    if unknown:
        probs.append(f"unknown keys {sorted(unknown)}")
    cfg = ExperimentConfig()
    cfg.seed = int(body.get("seed", cfg.seed))
    cfg.out = str(body.get("out", cfg.out))

    data = body.get("data") or {}
    cfg.data_manifest = data.get("manifest")
    try:
        cfg.data_spec = SyntheticSpec(**(data.get("spec") or {}))
        cfg.data_spec.validate()
    except (TypeError, ValueError) as e:
        probs.append(f"data.spec: {e}")
    cfg.split = tuple(float(x) for x in data.get("split", cfg.split))
    if abs(sum(cfg.split) - 1) > 1e-9 or len(cfg.split) != 2:
        probs.append("data.split must be two fractions summing to 1")

    cfg.family = body.get("family", cfg.family)
    if cfg.family not in FAMILIES:
        probs.append(f"unknown family {cfg.family!r}")
        fam = []
    else:
        fam = FAMILIES[cfg.family]

    chain = body.get("chain") or {}
    try:
        if "models" in chain:
            models = list(chain["models"])
        elif "expansion_ratio" in chain or "smallest" in chain or "largest" in chain:
            models = chain_by_ratio(fam, chain.get("smallest", fam[0] if fam else ""),
                                    chain.get("largest", fam[-1] if fam else ""),
                                    float(chain.get("expansion_ratio", 4.0)))
        else:
            models = list(cfg.models)
        for m in models:
            get_preset(m)
        cfg.models = tuple(models)
    except (ValueError, IndexError) as e:
        probs.append(f"chain: {e}")
    if "epochs" in chain and "schedule" in chain:
        probs.append("chain.epochs and chain.schedule are mutually exclusive")
    elif "epochs" in chain:
        cfg.epochs = tuple(int(e) for e in chain["epochs"])
    elif "schedule" in chain:
        try:
            cfg.epochs = tuple(_schedule(chain["schedule"], len(cfg.models)))
        except ValueError as e:
            probs.append(f"chain.schedule: {e}")
    elif len(cfg.models) != len(cfg.epochs):
        cfg.epochs = tuple(_schedule({}, len(cfg.models)))
    if len(cfg.epochs) != len(cfg.models):
        probs.append(f"{len(cfg.models)} models but {len(cfg.epochs)} epoch budgets")
    cfg.baseline_epochs = int(body.get("baseline_epochs", cfg.baseline_epochs))

    train = dict(body.get("train") or {})
    bad = set(train) - TRAIN_KEYS
    if bad:
        probs.append(f"unknown train keys {sorted(bad)}")
    cfg.transfer_warmup = int(train.pop("transfer_warmup", cfg.transfer_warmup))
    try:
        cfg.train = TrainConfig(**{k: v for k, v in train.items() if k in TRAIN_KEYS})
    except TypeError as e:
        probs.append(f"train: {e}")

    distill = body.get("distill", {"ratio": 0.1})
    try:
        if distill == "off" or distill is False:
            cfg.distill = DistillConfig(mode="off")
        elif isinstance(distill, dict):
            if "ratio" in distill and "alpha" in distill:
                probs.append("distill: ratio and alpha are mutually exclusive")
            elif "alpha" in distill:
                cfg.distill = DistillConfig(mode="alpha", alpha=float(distill["alpha"]))
            else:
                cfg.distill = DistillConfig(mode="ratio", ratio=float(distill.get("ratio", 0.1)))
        else:
            probs.append("distill must be 'off' or a mapping")
    except ValueError as e:
        probs.append(f"distill: {e}")

    expand = body.get("expand", {})
    try:
        if expand == "off" or expand is False:
            cfg.expand = None
        else:
            cfg.expand = ExpandSpec(seed=cfg.seed, **(expand or {}))
    except (TypeError, ContractError) as e:
        probs.append(f"expand: {e}")

    cfg.lta_threshold = float(body.get("lta_threshold", cfg.lta_threshold))
    sweep = body.get("sweep") or {}
    cfg.sweep_model = sweep.get("model")
    cfg.sweep_target = sweep.get("target")
    cfg.parallelism = int(sweep.get("parallelism", 1))
    if not probs:
        try:
            cfg.chain_spec()
        except ValueError as e:
            probs.append(f"chain: {e}")
    if probs:
        raise ConfigFileError(probs)
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML (or ``.json``) config; ``overrides`` replace top-level keys."""
    if path is None:
        return parse_config(dict(overrides or {}))
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigFileError([f"cannot read {p}: {e}"]) from e
    try:
        body = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigFileError([f"{p}: parse error: {e}"]) from e
    if body is not None and not isinstance(body, dict):
        raise ConfigFileError([f"{p}: top level must be a mapping"])
    return parse_config({**(body or {}), **(overrides or {})})
