"""CLIP-style two-tower transformer family.

Canonical tensor names (``W`` = tower width, ``E`` = embed dim, ``R`` = MLP
ratio, linear weights are stored ``(out, in)``)::

    image.conv1.weight             (W, C*P*P)   patch embedding, no bias
    image.class_embedding          (W,)
    image.positional_embedding     (S, W)
    image.ln_pre.{weight,bias}     (W,)
    image.block{k}.ln_1.{weight,bias}        (W,)
    image.block{k}.attn.qkv.weight           (3W, W)   rows: Q | K | V
    image.block{k}.attn.qkv.bias             (3W,)
    image.block{k}.attn.out.{weight,bias}    (W, W), (W,)
    image.block{k}.ln_2.{weight,bias}        (W,)
    image.block{k}.mlp.fc.{weight,bias}      (R*W, W), (R*W,)
    image.block{k}.mlp.proj.{weight,bias}    (W, R*W), (W,)
    image.ln_post.{weight,bias}    (W,)
    image.proj                     (W, E)
    text.token_embedding           (V, W)
    text.positional_embedding      (S, W)
    text.block{k}.*                as above
    text.ln_final.{weight,bias}    (W,)
    text.proj                      (W, E)
    logit_scale                    (1,)   log of the inverse temperature
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    slice_,
    softmax,
    take,
    transpose,
)
from .numerics.rng import make_rng, truncated_normal

INIT_STD = 0.02
BLOCK_KEYS = (
    "ln_1.weight", "ln_1.bias",
    "attn.qkv.weight", "attn.qkv.bias",
    "attn.out.weight", "attn.out.bias",
    "ln_2.weight", "ln_2.bias",
    "mlp.fc.weight", "mlp.fc.bias",
    "mlp.proj.weight", "mlp.proj.bias",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    width: int
    depth: int
    head_dim: int
    seq_len: int
    patch_size: int | None = None
    image_size: int | None = None
    channels: int = 3
    vocab_size: int | None = None
    mlp_ratio: int = 4

    @property
    def is_image(self) -> bool:
        return self.vocab_size is None

    @property
    def heads(self) -> int:
        return self.width // self.head_dim

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def problems(self) -> list[str]:
        out = []
        if self.width < 1 or self.head_dim < 1 or self.width % self.head_dim:
            out.append(f"width {self.width} not divisible by head_dim {self.head_dim}")
        if self.depth < 1:
            out.append(f"depth {self.depth} < 1")
        if self.mlp_ratio < 1:
            out.append(f"mlp_ratio {self.mlp_ratio} < 1")
        if self.is_image:
            if not self.patch_size or not self.image_size or self.image_size % self.patch_size:
                out.append("image_size must be a positive multiple of patch_size")
            elif self.n_patches + 1 != self.seq_len:
                out.append(f"image seq_len {self.seq_len} != patches {self.n_patches} + 1")
        elif self.vocab_size < 1 or self.seq_len < 1:
            out.append("text tower needs vocab_size >= 1 and seq_len >= 1")
        return out


@dataclass(frozen=True)
class ModelConfig:
    name: str
    image: EncoderConfig
    text: EncoderConfig
    embed_dim: int
    captions_per_image: int = 4
    init_temperature: float = 0.07

    def validate(self) -> None:
        probs = [f"image: {p}" for p in self.image.problems()]
        probs += [f"text: {p}" for p in self.text.problems()]
        if not self.image.is_image:
            probs.append("image tower must define patch_size/image_size")
        if self.text.is_image:
            probs.append("text tower must define vocab_size")
        if self.embed_dim < 1:
            probs.append(f"embed_dim {self.embed_dim} < 1")
        if self.captions_per_image < 1:
            probs.append(f"captions_per_image {self.captions_per_image} < 1")
        if not self.init_temperature > 0:
            probs.append("init_temperature must be > 0")
        if probs:
            raise ConfigError(f"invalid config {self.name!r}: " + "; ".join(probs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["image"] = EncoderConfig(**d["image"])
        d["text"] = EncoderConfig(**d["text"])
        return cls(**d)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _ref(name: str, img_w: int, img_d: int, txt_w: int, txt_d: int = 12) -> ModelConfig:
    return ModelConfig(
        name=name,
        image=EncoderConfig(img_w, img_d, 64, 197, patch_size=16, image_size=224, channels=3),
        text=EncoderConfig(txt_w, txt_d, 64, 77, vocab_size=49408),
        embed_dim=txt_w,
    )


def _nano(name: str, width: int, depth: int) -> ModelConfig:
    return ModelConfig(
        name=name,
        image=EncoderConfig(width, depth, 16, 17, patch_size=4, image_size=16, channels=1),
        text=EncoderConfig(width, depth, 16, 8, vocab_size=64),
        embed_dim=width,
    )


# Table-reference architectures (analytical validation only; never trained).
REFERENCE = {
    c.name: c for c in [
        _ref("vit_t16_ref", 192, 12, 256),
        _ref("vit_c16_ref", 256, 12, 320),
        _ref("vit_s16_ref", 384, 12, 384),
        _ref("vit_m16_ref", 512, 12, 448),
        _ref("vit_b16_ref", 768, 12, 512),
        _ref("vit_xb16_ref", 1024, 12, 512),
        _ref("vit_l16_ref", 1024, 24, 768),
    ]
}

NANO = {
    c.name: c for c in [
        _nano("nano-T", 32, 2),
        _nano("nano-C", 48, 2),
        _nano("nano-S", 64, 2),
        _nano("nano-M", 96, 2),
        _nano("nano-B", 128, 4),
    ]
}

PRESETS: dict[str, ModelConfig] = {**REFERENCE, **NANO}

FAMILIES: dict[str, list[str]] = {
    "vit_ref": ["vit_t16_ref", "vit_s16_ref", "vit_b16_ref", "vit_l16_ref"],
    "vit_ref_full": list(REFERENCE),
    "nano": ["nano-T", "nano-S", "nano-B"],
    "nano_full": list(NANO),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def family(name: str) -> list[ModelConfig]:
    try:
        names = FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown family {name!r}; known: {sorted(FAMILIES)}") from None
    configs = [PRESETS[n] for n in names]
    check_family(configs)
    return configs


def check_family(configs: list[ModelConfig]) -> None:
    counts = [param_count(c) for c in configs]
    for a, b, ca, cb in zip(configs, configs[1:], counts, counts[1:]):
        if cb <= ca:
            raise ConfigError(f"family not ascending: {a.name} ({ca}) -> {b.name} ({cb})")


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

def block_shapes(width: int, mlp_ratio: int) -> dict[str, tuple[int, ...]]:
    w, h = width, width * mlp_ratio
    return {
        "ln_1.weight": (w,), "ln_1.bias": (w,),
        "attn.qkv.weight": (3 * w, w), "attn.qkv.bias": (3 * w,),
        "attn.out.weight": (w, w), "attn.out.bias": (w,),
        "ln_2.weight": (w,), "ln_2.bias": (w,),
        "mlp.fc.weight": (h, w), "mlp.fc.bias": (h,),
        "mlp.proj.weight": (w, h), "mlp.proj.bias": (w,),
    }


def tower_shapes(prefix: str, enc: EncoderConfig, embed_dim: int) -> dict[str, tuple[int, ...]]:
    w = enc.width
    out: dict[str, tuple[int, ...]] = {}
    if enc.is_image:
        out[f"{prefix}.conv1.weight"] = (w, enc.patch_dim)
        out[f"{prefix}.class_embedding"] = (w,)
        out[f"{prefix}.positional_embedding"] = (enc.seq_len, w)
        out[f"{prefix}.ln_pre.weight"] = (w,)
        out[f"{prefix}.ln_pre.bias"] = (w,)
    else:
        out[f"{prefix}.token_embedding"] = (enc.vocab_size, w)
        out[f"{prefix}.positional_embedding"] = (enc.seq_len, w)
    for k in range(enc.depth):
        for key, shape in block_shapes(w, enc.mlp_ratio).items():
            out[f"{prefix}.block{k}.{key}"] = shape
    final = "ln_post" if enc.is_image else "ln_final"
    out[f"{prefix}.{final}.weight"] = (w,)
    out[f"{prefix}.{final}.bias"] = (w,)
    out[f"{prefix}.proj"] = (w, embed_dim)
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map, in canonical order."""
    config.validate()
    shapes = tower_shapes("image", config.image, config.embed_dim)
    shapes.update(tower_shapes("text", config.text, config.embed_dim))
    shapes["logit_scale"] = (1,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Exact number of learnable scalars in ``build_params(config)``."""
    return sum(math.prod(s) for s in param_shapes(config).values())


def reported_param_count(config: ModelConfig) -> dict[str, int]:
    """Parameter counts in the convention of the reference architecture table.

    That table counts the whole image tower but only the transformer blocks of
    the text tower (no token/positional embedding, final norm or projection).
    """
    shapes = param_shapes(config)
    image = sum(math.prod(s) for n, s in shapes.items() if n.startswith("image."))
    text = sum(math.prod(s) for n, s in shapes.items() if n.startswith("text.block"))
    return {"image": image, "text": text, "total": image + text}


def init_tensor(name: str, shape: tuple[int, ...], seed: int, tag: str = "",
                dtype=np.float32, init_temperature: float = 0.07) -> np.ndarray:
    """Default initializer for one canonical tensor (also the expansion fill)."""
    leaf = name.rsplit(".", 1)[-1]
    parent = name.rsplit(".", 2)[-2] if name.count(".") >= 2 else ""
    if name == "logit_scale":
        return np.full(shape, math.log(1.0 / init_temperature), dtype=dtype)
    if parent.startswith("ln") and leaf == "weight":
        return np.ones(shape, dtype=dtype)
    if leaf == "bias":
        return np.zeros(shape, dtype=dtype)
    return truncated_normal(make_rng(seed, "init", tag, name), shape, INIT_STD, dtype=dtype)


def build_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters for ``config``; each tensor draws from its own named stream."""
    return {
        name: init_tensor(name, shape, seed, dtype=dtype, init_temperature=config.init_temperature)
        for name, shape in param_shapes(config).items()
    }


def check_params(params: dict[str, np.ndarray], config: ModelConfig) -> None:
    shapes = param_shapes(config)
    for name in params:
        if name not in shapes:
            raise ConfigError(f"unknown tensor {name!r} for config {config.name!r}")
    for name, shape in shapes.items():
        if name not in params:
            raise ConfigError(f"missing tensor {name!r} for config {config.name!r}")
        if tuple(params[name].shape) != shape:
            raise ConfigError(
                f"tensor {name!r}: shape {tuple(params[name].shape)} != expected {shape}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _linear(x: Tensor, weight, bias=None) -> Tensor:
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


def attention(x: Tensor, p: dict, prefix: str, width: int, head_dim: int) -> Tensor:
    b, n, _ = x.shape
    h = width // head_dim
    qkv = _linear(x, p[f"{prefix}.qkv.weight"], p[f"{prefix}.qkv.bias"])

    def heads(i):
        part = slice_(qkv, i * width, (i + 1) * width, axis=-1)
        return transpose(reshape(part, (b, n, h, head_dim)), (0, 2, 1, 3))

    q, k, v = heads(0), heads(1), heads(2)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(head_dim))
    ctx = matmul(softmax(scores), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, width))
    return _linear(ctx, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])


def block(x: Tensor, p: dict, prefix: str, enc: EncoderConfig) -> Tensor:
    a = layer_norm(x, p[f"{prefix}.ln_1.weight"], p[f"{prefix}.ln_1.bias"])
    x = add(x, attention(a, p, f"{prefix}.attn", enc.width, enc.head_dim))
    m = layer_norm(x, p[f"{prefix}.ln_2.weight"], p[f"{prefix}.ln_2.bias"])
    m = gelu(_linear(m, p[f"{prefix}.mlp.fc.weight"], p[f"{prefix}.mlp.fc.bias"]))
    return add(x, _linear(m, p[f"{prefix}.mlp.proj.weight"], p[f"{prefix}.mlp.proj.bias"]))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C*patch*patch), row-major over the patch grid."""
    b, c, hgt, wid = images.shape
    gh, gw = hgt // patch, wid // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def encode_image(params: dict, config: ModelConfig, images) -> Tensor:
    """Projected (pre-normalization) image features, shape (B, embed_dim).

    ``params`` maps canonical names to Tensors or arrays.
    """
    enc = config.image
    images = np.asarray(images)
    want = (enc.channels, enc.image_size, enc.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ValueError(f"encode_image: expected (B, {want}), got {images.shape}")
    dt = np.asarray(_data(params["image.conv1.weight"])).dtype
    b = images.shape[0]
    x = _linear(Tensor(patchify(images.astype(dt, copy=False), enc.patch_size)),
                params["image.conv1.weight"])
    cls = add(np.zeros((b, 1, enc.width), dtype=dt),
              reshape(params["image.class_embedding"], (1, 1, enc.width)))
    x = concat([cls, x], axis=1)
    x = add(x, params["image.positional_embedding"])
    x = layer_norm(x, params["image.ln_pre.weight"], params["image.ln_pre.bias"])
    for k in range(enc.depth):
        x = block(x, params, f"image.block{k}", enc)
    pooled = reshape(slice_(x, 0, 1, axis=1), (b, enc.width))
    pooled = layer_norm(pooled, params["image.ln_post.weight"], params["image.ln_post.bias"])
    return matmul(pooled, params["image.proj"])


def encode_text(params: dict, config: ModelConfig, tokens) -> Tensor:
    """Projected (pre-normalization) text features pooled at the final position."""
    enc = config.text
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != enc.seq_len:
        raise ValueError(f"encode_text: expected (B, {enc.seq_len}) tokens, got {tokens.shape}")
    if tokens.dtype.kind not in "iu":
        raise TypeError("encode_text: tokens must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= enc.vocab_size):
        raise ValueError(f"encode_text: token out of range [0, {enc.vocab_size})")
    b, n = tokens.shape
    x = take(params["text.token_embedding"], tokens)
    x = add(x, params["text.positional_embedding"])
    for k in range(enc.depth):
        x = block(x, params, f"text.block{k}", enc)
    pooled = reshape(slice_(x, n - 1, n, axis=1), (b, enc.width))
    pooled = layer_norm(pooled, params["text.ln_final.weight"], params["text.ln_final.bias"])
    return matmul(pooled, params["text.proj"])


def _data(x):
    return x.data if isinstance(x, Tensor) else x
