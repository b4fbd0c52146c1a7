"""Single-model training: contrastive task loss, optionally distilled from a
frozen smaller teacher through learnable affine feature maps."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .complexity import SampleSpec, run_macs
from .data import Samples, load_batches
from .harness.evaluate import eval_retrieval
from .harness.metrics import MetricsRow, MetricsWriter
from .losses import (
    MAX_LOGIT_SCALE,
    ContrastiveBatch,
    DistillPair,
    calibrate_alpha,
    raw_distill,
    t2v_loss,
    v2t_loss,
)
from .modelzoo import ModelConfig, check_params, encode_image, encode_text
from .numerics import (
    OptimState,
    Tape,
    add,
    adamw_step,
    backward,
    cosine_lr,
    l2_normalize,
    no_grad,
    scale,
)
from .numerics.rng import make_rng, truncated_normal

log = logging.getLogger(__name__)

DISTILL_MODES = ("ratio", "alpha", "off")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 400
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    seed: int = 0
    captions_per_image: int | None = None   # None: use every caption of a sample
    eval_every: int = 1                     # epochs; 0 disables per-epoch eval


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "ratio"
    ratio: float = 0.1
    alpha: float = 500.0

    def __post_init__(self):
        if self.mode not in DISTILL_MODES:
            raise ValueError(f"distill mode must be one of {DISTILL_MODES}, got {self.mode!r}")
        if self.mode == "ratio" and not self.ratio >= 0:
            raise ValueError("ratio must be >= 0")
        if self.mode == "alpha" and not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")


@dataclass
class Teacher:
    params: dict[str, np.ndarray]
    config: ModelConfig


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    rows: list[MetricsRow]
    final: dict[str, float]
    macs: float
    steps: int
    alpha: float | None = None
    first_batch: dict[str, float] = field(default_factory=dict)


def transform_params(student: ModelConfig, teacher: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Affine maps student embed space -> teacher embed space, one per tower."""
    out = {}
    for tower in ("image", "text"):
        rng = make_rng(seed, "transform", tower)
        out[f"distill.{tower}.weight"] = truncated_normal(
            rng, (teacher.embed_dim, student.embed_dim), 0.02)
        out[f"distill.{tower}.bias"] = np.zeros(teacher.embed_dim, dtype=np.float32)
    return out


def _freeze(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        v = v.view()
        v.flags.writeable = False
        out[k] = v
    return out


def sample_spec(config: ModelConfig, tcfg: TrainConfig, m_full: int) -> SampleSpec:
    m = tcfg.captions_per_image or m_full
    return SampleSpec(captions_per_image=m, batch_size=tcfg.batch_size)


def train_model(config: ModelConfig, params: dict[str, np.ndarray], train: Samples,
                tcfg: TrainConfig, eval_split: Samples | None = None,
                teacher: Teacher | None = None, distill: DistillConfig = DistillConfig(),
                metrics: MetricsWriter | None = None, run_id: str = "run",
                mac_offset: float = 0.0) -> TrainResult:
    """Train ``params`` in place of a copy; returns the final parameters.

    ``mac_offset`` is added to the run's own cumulative MACs in the logged
    rows, so chain steps can log chain-cumulative totals.
    """
    check_params(params, config)
    if tcfg.epochs < 0 or tcfg.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    use_teacher = teacher is not None and distill.mode != "off"
    m_full = train.captions.shape[1]
    spec = sample_spec(config, tcfg, m_full)
    params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
    if use_teacher:
        tparams = _freeze(teacher.params)
        params.update(transform_params(config, teacher.config, tcfg.seed))
    state = OptimState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps,
                       weight_decay=tcfg.weight_decay,
                       no_decay=frozenset(k for k, v in params.items() if v.ndim < 2))
    steps_per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    alpha = distill.alpha if (use_teacher and distill.mode == "alpha") else None
    writer = metrics or MetricsWriter(None)
    rows: list[MetricsRow] = []
    first: dict[str, float] = {}
    t0 = time.perf_counter()
    step = 0
    seen = 0
    final: dict[str, float] = {}

    def own_macs() -> float:
        return run_macs(config, seen, 1, teacher.config if use_teacher else None, spec)

    for epoch in range(tcfg.epochs):
        sums = np.zeros(3)
        count = 0
        for batch in load_batches(train, tcfg.batch_size, seed=tcfg.seed, epoch=epoch,
                                  captions_per_image=tcfg.captions_per_image):
            b, m, L = batch.captions.shape
            tokens = batch.captions.reshape(b * m, L)
            if use_teacher:
                with no_grad():
                    tv = encode_image(tparams, teacher.config, batch.images).numpy()
                    tt = encode_text(tparams, teacher.config, tokens).numpy()
            with Tape() as tape:
                p = tape.watch(params)
                v = encode_image(p, config, batch.images)
                t = encode_text(p, config, tokens)
                cb = ContrastiveBatch.from_logit_scale(l2_normalize(v), l2_normalize(t),
                                                       p["logit_scale"], m)
                l_t2v, l_v2t = t2v_loss(cb), v2t_loss(cb)
                task = scale(add(l_t2v, l_v2t), 0.5)
                loss, ifd_val = task, 0.0
                if use_teacher:
                    raw_v = raw_distill(DistillPair(tv, v, p["distill.image.weight"],
                                                    p["distill.image.bias"]))
                    raw_t = raw_distill(DistillPair(tt, t, p["distill.text.weight"],
                                                    p["distill.text.bias"]))
                    raw = scale(add(raw_v, raw_t), 0.5)
                    if alpha is None:
                        alpha = calibrate_alpha(task.item(), raw.item(), distill.ratio)
                    ifd = scale(raw, alpha)
                    ifd_val = ifd.item()
                    loss = add(task, ifd)
                    if step == 0:
                        first = {"l_task": task.item(), "l_ifd": ifd_val,
                                 "raw_image": raw_v.item(), "raw_text": raw_t.item(),
                                 "alpha": alpha, "ratio": ifd_val / task.item()}
            lval = loss.item()
            if not math.isfinite(lval):
                raise NonFiniteLossError(
                    f"{run_id}: non-finite loss at epoch {epoch} step {step} ({lval})")
            grads = backward(tape, loss)
            lr = cosine_lr(step, tcfg.lr, tcfg.warmup_steps, total_steps)
            params, state = adamw_step(params, grads, state, lr=lr)
            ls = params["logit_scale"]
            if ls[0] > MAX_LOGIT_SCALE or ls[0] < 0:
                params["logit_scale"] = np.clip(ls, 0.0, MAX_LOGIT_SCALE).astype(np.float32)
            step += 1
            seen += b
            sums += (task.item(), ifd_val, lval)
            count += 1
        mean_task, mean_ifd, mean_total = sums / max(count, 1)
        evaluate = eval_split is not None and (
            (tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0) or epoch == tcfg.epochs - 1)
        res = eval_retrieval(params, config, eval_split) if evaluate else {}
        if res:
            final = res
        row = MetricsRow(run_id=run_id, model=config.name, epoch=epoch + 1, step=step,
                         l_task=float(mean_task), l_ifd=float(mean_ifd),
                         l_total=float(mean_total), r1=res.get("r1"),
                         cumulative_macs=mac_offset + own_macs(),
                         wall_seconds=time.perf_counter() - t0,
                         t2i_r1=res.get("t2i_r1"), i2t_r1=res.get("i2t_r1"),
                         proto_top1=res.get("proto_top1"))
        writer.write(row)
        rows.append(row)
        log.info("%s %s epoch %d task %.4f ifd %.4f r1 %s", run_id, config.name, epoch + 1,
                 mean_task, mean_ifd, f"{res['r1']:.2f}" if res else "-")
    if eval_split is not None and not final:
        final = eval_retrieval(params, config, eval_split)
    model_params = {k: v for k, v in params.items() if not k.startswith("distill.")}
    return TrainResult(model_params, rows, final, own_macs(), step, alpha, first)
