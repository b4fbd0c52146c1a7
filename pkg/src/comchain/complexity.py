"""Analytical MAC accounting for forward, backward and update cost.

Counting convention: only matrix products are counted (patch embedding,
QKV, attention scores, attention-weighted values, output projection, MLP,
final projection). Layer norm, softmax, activations and bias adds are
excluded; the token-embedding lookup is free.

Per sample::

    C_b = 2*C_f - C_f_first         (no input gradient for the first layer)
    C_u = 3*params / batch_size     (one optimizer step, shared by the batch)
    C_t = C_f + C_b + C_u

A chain step also pays one teacher forward per sample.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .modelzoo import EncoderConfig, ModelConfig, param_count


@dataclass(frozen=True)
class SampleSpec:
    """What one training sample costs: one image plus its captions.

    ``text_pass_scale`` multiplies the number of text-tower passes. It is 1
    for real training; the reference table's numbers are only reproduced
    with 1.5 (six text passes for four captions).
    """

    captions_per_image: int = 4
    batch_size: int = 1024
    text_pass_scale: float = 1.0

    @property
    def text_passes(self) -> float:
        return self.captions_per_image * self.text_pass_scale


REFERENCE_SAMPLE = SampleSpec(captions_per_image=4, batch_size=1024, text_pass_scale=1.5)


@dataclass(frozen=True)
class MacBreakdown:
    C_f: float
    C_f_first: float
    C_b: float
    C_u: float
    C_t: float
    params: int
    image_f: float = 0.0
    text_f: float = 0.0


def block_macs(enc: EncoderConfig) -> int:
    n, w = enc.seq_len, enc.width
    hidden = enc.mlp_ratio * w
    qkv = 3 * n * w * w
    scores = n * n * w          # summed over heads: heads * n * n * head_dim
    weighted = n * n * w
    out = n * w * w
    mlp = 2 * n * w * hidden
    return qkv + scores + weighted + out + mlp


def embed_macs(enc: EncoderConfig) -> int:
    """First-layer cost: patch projection for images, nothing for token lookup."""
    return enc.n_patches * enc.patch_dim * enc.width if enc.is_image else 0


def tower_macs(enc: EncoderConfig, embed_dim: int) -> int:
    return embed_macs(enc) + enc.depth * block_macs(enc) + enc.width * embed_dim


def forward_macs(config: ModelConfig, sample: SampleSpec | None = None) -> tuple[float, float]:
    """(C_f, C_f_first) for one sample."""
    sample = sample or SampleSpec(config.captions_per_image)
    config.validate()
    img = tower_macs(config.image, config.embed_dim)
    txt = tower_macs(config.text, config.embed_dim)
    c_f = img + sample.text_passes * txt
    first = embed_macs(config.image) + sample.text_passes * embed_macs(config.text)
    return c_f, first


def training_macs(c_f: float, c_f_first: float, params: int, batch_size: int = 1) -> float:
    """C_t per sample."""
    c_b = 2 * c_f - c_f_first
    c_u = 3 * params / batch_size
    return c_f + c_b + c_u


def breakdown(config: ModelConfig, sample: SampleSpec | None = None) -> MacBreakdown:
    sample = sample or SampleSpec(config.captions_per_image)
    c_f, first = forward_macs(config, sample)
    params = param_count(config)
    c_b = 2 * c_f - first
    c_u = 3 * params / sample.batch_size
    return MacBreakdown(
        C_f=c_f, C_f_first=first, C_b=c_b, C_u=c_u, C_t=c_f + c_b + c_u, params=params,
        image_f=tower_macs(config.image, config.embed_dim),
        text_f=sample.text_passes * tower_macs(config.text, config.embed_dim),
    )


def run_macs(config: ModelConfig, n_samples: int, epochs: int,
             teacher: ModelConfig | None = None, sample: SampleSpec | None = None) -> float:
    """Total MACs of one training run; a teacher adds its forward cost per sample."""
    if n_samples < 0 or epochs < 0:
        raise ValueError("n_samples and epochs must be non-negative")
    per = breakdown(config, sample).C_t
    if teacher is not None:
        per = per + forward_macs(teacher, sample or SampleSpec(config.captions_per_image))[0]
    return epochs * n_samples * per


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class CostRow:
    model: str
    individual: float
    accumulated: float
    baseline_individual: float
    baseline_accumulated: float

    @property
    def individual_ratio(self) -> float:
        return self.baseline_individual / self.individual

    @property
    def accumulated_ratio(self) -> float:
        return self.baseline_accumulated / self.accumulated


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    unit: str = "MACs"

    @property
    def total(self) -> float:
        return self.rows[-1].accumulated if self.rows else 0.0

    def to_json(self) -> dict:
        return {
            "unit": self.unit,
            "rows": [
                {**asdict(r), "individual_ratio": r.individual_ratio,
                 "accumulated_ratio": r.accumulated_ratio}
                for r in self.rows
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        head = ("| Model | Baseline indiv. | Baseline accum. | Chain indiv. | Chain accum. |\n"
                "|---|---|---|---|---|")
        lines = [head]
        for r in self.rows:
            lines.append(
                f"| {r.model} | {r.baseline_individual:.4g} | {r.baseline_accumulated:.4g} "
                f"| {r.individual:.4g} ({r.individual_ratio:.2f}x) "
                f"| {r.accumulated:.4g} ({r.accumulated_ratio:.2f}x) |")
        return "\n".join(lines)


def _prefix(xs):
    out, acc = [], 0.0
    for x in xs:
        acc = acc + x
        out.append(acc)
    return out


def chain_report(names: list[str], chain_runs: list[float], baseline_runs: list[float],
                 unit: str = "MACs") -> CostReport:
    """Individual/accumulated costs and ratios (baseline / chain) per model."""
    if not (len(names) == len(chain_runs) == len(baseline_runs)):
        raise ValueError("names, chain_runs and baseline_runs must have equal length")
    if any(x <= 0 for x in chain_runs):
        raise ValueError("chain run costs must be positive")
    acc, bacc = _prefix(chain_runs), _prefix(baseline_runs)
    rows = [CostRow(n, c, a, b, ba)
            for n, c, a, b, ba in zip(names, chain_runs, acc, baseline_runs, bacc)]
    return CostReport(rows, unit)


# Reference architecture table: params (M), forward MACs (G), training MACs (G).
REFERENCE_TABLE = {
    "vit_t16_ref": (15.10, 5.82, 17.57),
    "vit_c16_ref": (24.66, 9.23, 27.87),
    "vit_s16_ref": (43.10, 14.44, 43.65),
    "vit_m16_ref": (67.56, 21.88, 66.17),
    "vit_b16_ref": (124.02, 35.09, 106.27),
    "vit_xb16_ref": (209.19, 48.76, 148.05),
    "vit_l16_ref": (389.14, 100.92, 306.11),
}

# Published per-model training MACs (1e10 G) for the ViT family on the small
# dataset: baseline individual runs and chain runs.
REFERENCE_RUNS = {
    "models": ["ViT-T/16", "ViT-S/16", "ViT-B/16", "ViT-L/16"],
    "baseline": [0.62, 1.54, 3.75, 10.79],
    "chain": [0.62, 0.32, 0.59, 1.41],
}


@dataclass
class ValidationRow:
    model: str
    params_m: float
    params_ref: float
    forward_g: float
    forward_ref: float
    train_g: float
    train_ref: float

    def errors(self) -> tuple[float, float, float]:
        def rel(a, b):
            return abs(a - b) / b
        return (rel(self.params_m, self.params_ref), rel(self.forward_g, self.forward_ref),
                rel(self.train_g, self.train_ref))


def validate_reference(names: list[str] | None = None) -> list[ValidationRow]:
    from .modelzoo import get_preset, reported_param_count

    rows = []
    for name in names or list(REFERENCE_TABLE):
        cfg = get_preset(name)
        p_ref, f_ref, t_ref = REFERENCE_TABLE[name]
        b = breakdown(cfg, REFERENCE_SAMPLE)
        rows.append(ValidationRow(name, reported_param_count(cfg)["total"] / 1e6, p_ref,
                                  b.C_f / 1e9, f_ref, b.C_t / 1e9, t_ref))
    return rows


def validation_table(rows: list[ValidationRow]) -> str:
    out = ["| Model | Params (M) | ref | err | Fwd MACs (G) | ref | err | Train MACs (G) | ref | err |",
           "|---|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        ep, ef, et = r.errors()
        out.append(
            f"| {r.model} | {r.params_m:.2f} | {r.params_ref:.2f} | {100 * ep:.2f}% "
            f"| {r.forward_g:.2f} | {r.forward_ref:.2f} | {100 * ef:.2f}% "
            f"| {r.train_g:.2f} | {r.train_ref:.2f} | {100 * et:.2f}% |")
    return "\n".join(out)
