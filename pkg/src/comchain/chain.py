"""Chain orchestration: train the smallest model, then grow and distill each
successor from its frozen predecessor, persisting every step."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from .complexity import chain_report, CostReport
from .data import Samples
from .expand import ExpandSpec, expand_model
from .harness.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .harness.metrics import MetricsWriter
from .modelzoo import ModelConfig, build_params, param_count
from .train import DistillConfig, Teacher, TrainConfig, TrainResult, train_model

log = logging.getLogger(__name__)

STATE_FILE = "chain_state.json"


class ChainError(RuntimeError):
    pass


class ScheduleInfeasibleError(ChainError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# schedule rules
# ---------------------------------------------------------------------------

def allocate_epochs(e_first_transfer: int, decrement: int, n: int, e_min: int = 1) -> list[int]:
    """Epochs for models 2..n: linear decrease from ``e_first_transfer``, floored at ``e_min``."""
    if not e_first_transfer >= e_min >= 1:
        raise ValueError("need e_first_transfer >= e_min >= 1")
    if decrement < 0:
        raise ValueError("decrement must be >= 0")
    return [max(e_min, e_first_transfer - (i - 2) * decrement) for i in range(2, n + 1)]


def relax_schedule(schedule: list[int], gamma: float) -> list[int]:
    """Scale every entry by ``gamma`` and round up (products within 1e-9 of an
    integer count as that integer, so float noise never adds an epoch)."""
    if not gamma > 1:
        raise ValueError(f"gamma must be > 1, got {gamma}")
    out = []
    for e in schedule:
        x = e * gamma
        r = round(x)
        out.append(int(r) if abs(x - r) <= 1e-9 * max(1.0, x) else math.ceil(x))
    return out


@dataclass(frozen=True)
class LtaVerdict:
    candidate: float
    baseline: float
    threshold: float
    passed: bool

    @property
    def gap(self) -> float:
        return self.baseline - self.candidate


def lta_check(candidate: float, baseline: float, threshold: float) -> LtaVerdict:
    return LtaVerdict(candidate, baseline, threshold, baseline - candidate < threshold)


# ---------------------------------------------------------------------------
# spec / state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainSpec:
    configs: tuple[ModelConfig, ...]
    epochs: tuple[int, ...]
    expand: ExpandSpec | None = ExpandSpec()        # None: successors start from random init
    distill: DistillConfig = DistillConfig()
    train: TrainConfig = TrainConfig()               # first model
    transfer_warmup: int = 50                        # warmup steps for successors
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "configs", tuple(self.configs))
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        self.validate()

    def validate(self) -> None:
        if len(self.configs) < 1:
            raise ValueError("a chain needs at least one model")
        if len(self.epochs) != len(self.configs):
            raise ValueError("one epoch budget per model required")
        if any(e < 1 for e in self.epochs):
            raise ValueError("every epoch budget must be >= 1")
        counts = [param_count(c) for c in self.configs]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("chain models must strictly increase in parameter count")

    def train_config(self, i: int) -> TrainConfig:
        if i == 0:
            return replace(self.train, epochs=self.epochs[0], seed=self.seed)
        return replace(self.train, epochs=self.epochs[i], warmup_steps=self.transfer_warmup,
                       seed=self.seed + i)

    def relaxed(self, gamma: float) -> ChainSpec:
        return replace(self, epochs=(self.epochs[0], *relax_schedule(list(self.epochs[1:]), gamma)))


@dataclass
class ModelRecord:
    name: str
    epochs: int
    checkpoint: str
    checkpoint_sha256: str
    macs: float
    cumulative_macs: float
    final: dict
    alpha: float | None = None
    first_batch: dict = field(default_factory=dict)
    teacher_sha256: str | None = None


@dataclass
class ChainState:
    completed: int = -1                 # index of last completed model
    models: list[ModelRecord] = field(default_factory=list)
    cumulative_macs: float = 0.0

    def save(self, out_dir: Path) -> None:
        path = Path(out_dir) / STATE_FILE
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, out_dir: Path) -> ChainState | None:
        path = Path(out_dir) / STATE_FILE
        if not path.exists():
            return None
        body = json.loads(path.read_text())
        return cls(body["completed"], [ModelRecord(**m) for m in body["models"]],
                   body["cumulative_macs"])

    def report(self, baseline_macs: list[float]) -> CostReport:
        return chain_report([m.name for m in self.models], [m.macs for m in self.models],
                            baseline_macs)


def _checkpoint_path(out_dir: Path, i: int, config: ModelConfig) -> Path:
    return out_dir / "checkpoints" / f"{i:02d}-{config.name}.comc"


def run_chain(spec: ChainSpec, train: Samples, eval_split: Samples | None, out_dir,
              run_id: str = "chain", stop_after: int | None = None) -> ChainState:
    """Run (or resume) the chain; every completed model is checkpointed.

    ``stop_after`` ends the run after that model index, leaving a resumable state.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    state = ChainState.load(out) or ChainState()
    if len(state.models) != state.completed + 1:
        raise ChainError(f"{out}: inconsistent chain state")
    writer = MetricsWriter(out / "metrics.jsonl")
    for i, config in enumerate(spec.configs):
        if i <= state.completed:
            continue
        tcfg = spec.train_config(i)
        teacher = None
        teacher_hash = None
        if i == 0:
            params = build_params(config, seed=spec.seed)
            distill = DistillConfig(mode="off")
        else:
            prev = state.models[i - 1]
            tpath = Path(prev.checkpoint)
            teacher_hash = file_sha256(tpath)
            if teacher_hash != prev.checkpoint_sha256:
                raise ChainError(f"teacher checkpoint {tpath} changed since it was written")
            tparams, tconfig = load_checkpoint(tpath, spec.configs[i - 1])
            teacher = Teacher(tparams, tconfig)
            if spec.expand is not None:
                params, _ = expand_model(tparams, tconfig, config,
                                         replace(spec.expand, seed=spec.expand.seed + i))
            else:
                params = build_params(config, seed=spec.seed + i)
            distill = spec.distill
        res: TrainResult = train_model(
            config, params, train, tcfg, eval_split, teacher=teacher, distill=distill,
            metrics=writer, run_id=f"{run_id}/{i}-{config.name}",
            mac_offset=state.cumulative_macs)
        if teacher is not None and file_sha256(Path(state.models[i - 1].checkpoint)) != teacher_hash:
            raise ChainError("teacher checkpoint modified during chain step")
        ckpt = _checkpoint_path(out, i, config)
        digest = save_checkpoint(res.params, config, ckpt)
        cumulative = state.cumulative_macs + res.macs
        state.models.append(ModelRecord(
            name=config.name, epochs=tcfg.epochs, checkpoint=str(ckpt), checkpoint_sha256=digest,
            macs=res.macs, cumulative_macs=cumulative, final=res.final, alpha=res.alpha,
            first_batch=res.first_batch, teacher_sha256=teacher_hash))
        state.cumulative_macs = cumulative
        state.completed = i
        state.save(out)
        log.info("chain step %d (%s) done: %s", i, config.name, res.final)
        if stop_after is not None and i >= stop_after:
            break
    return state


@dataclass
class BaselineRecord:
    name: str
    epochs: int
    checkpoint: str
    macs: float
    final: dict


def run_baseline(config: ModelConfig, epochs: int, train: Samples, eval_split: Samples | None,
                 out_dir, tcfg: TrainConfig = TrainConfig(), seed: int = 0,
                 run_id: str | None = None) -> BaselineRecord:
    """Individual training from random init with the task loss only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = replace(tcfg, epochs=epochs, seed=seed)
    res = train_model(config, build_params(config, seed=seed), train, tcfg, eval_split,
                      metrics=MetricsWriter(out / "metrics.jsonl"),
                      run_id=run_id or f"baseline/{config.name}")
    ckpt = out / f"{config.name}.comc"
    save_checkpoint(res.params, config, ckpt)
    rec = BaselineRecord(config.name, epochs, str(ckpt), res.macs, res.final)
    (out / f"{config.name}.json").write_text(json.dumps(asdict(rec), indent=2, sort_keys=True))
    return rec


def validate_first_pair(spec: ChainSpec, baseline_metric: float, threshold: float = 2.0,
                        gamma: float = 1.25, max_retries: int = 3,
                        evaluate: Callable[[ChainSpec], float] | None = None,
                        train: Samples | None = None, eval_split: Samples | None = None,
                        out_dir=None) -> tuple[LtaVerdict, ChainSpec, list[LtaVerdict]]:
    """Check LTA on m_1 -> m_2, relaxing successor epochs until it passes.

    ``evaluate(spec)`` returns m_2's metric; by default it trains the pair
    (m_1 only once) under ``out_dir``.
    """
    if len(spec.configs) < 2:
        raise ValueError("need at least two models")
    if evaluate is None:
        if train is None or out_dir is None:
            raise ValueError("train data and out_dir needed when no evaluator is given")
        root = Path(out_dir)
        first = run_chain(replace(spec, configs=spec.configs[:1], epochs=spec.epochs[:1]),
                          train, eval_split, root / "m1")

        def evaluate(s: ChainSpec) -> float:
            d = root / f"m2-e{s.epochs[1]}"
            d.mkdir(parents=True, exist_ok=True)
            if not (d / STATE_FILE).exists():
                seed_state = ChainState(0, list(first.models), first.cumulative_macs)
                seed_state.save(d)
            pair = replace(s, configs=s.configs[:2], epochs=s.epochs[:2])
            return run_chain(pair, train, eval_split, d).models[1].final["r1"]

    history: list[LtaVerdict] = []
    current = spec
    for attempt in range(max_retries + 1):
        verdict = lta_check(evaluate(current), baseline_metric, threshold)
        history.append(verdict)
        if verdict.passed:
            return verdict, current, history
        if attempt < max_retries:
            current = current.relaxed(gamma)
    raise ScheduleInfeasibleError(
        f"first pair still fails after {max_retries} relaxations "
        f"(epochs {list(current.epochs)})", history)
