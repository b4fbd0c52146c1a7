"""Inverse weight initialization: grow a trained small model into a larger one.

Width methods act per tensor:

* ``insertion``: the teacher occupies the leading corner; the rest is freshly
  initialized (layer-norm gains 1, biases 0, other weights truncated normal).
* ``duplication``: the teacher is tiled; target dims must be multiples.
* ``interpolation``: separable linear resize with aligned endpoints.

Depth methods place p teacher blocks into q student blocks:

* ``constant``: blocks 0..p-1, the tail is random.
* ``interval``: teacher block j goes to ``floor(j*q/p)``, gaps are random.
* ``duplicate``: interval placement, gaps copy the nearest preceding placed block.

QKV weights are expanded as three independent (W, W) blocks so head
boundaries survive; the patch projection is treated as a (W, C*P*P) matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .modelzoo import BLOCK_KEYS, ModelConfig, check_params, param_shapes
from .numerics import ContractError
from .numerics.rng import make_rng, truncated_normal

WIDTH_METHODS = ("duplication", "interpolation", "insertion")
DEPTH_METHODS = ("constant", "interval", "duplicate")


@dataclass(frozen=True)
class ExpandSpec:
    width_method: str = "insertion"
    depth_method: str = "duplicate"
    fill_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.width_method not in WIDTH_METHODS:
            raise ContractError(f"width_method must be one of {WIDTH_METHODS}, got {self.width_method!r}")
        if self.depth_method not in DEPTH_METHODS:
            raise ContractError(f"depth_method must be one of {DEPTH_METHODS}, got {self.depth_method!r}")
        if not self.fill_std >= 0:
            raise ContractError("fill_std must be >= 0")


@dataclass(frozen=True)
class LayerMapping:
    """``sources[k]`` is ("teacher", j), ("duplicate", k') or ("random", -1)."""

    p: int
    q: int
    method: str
    sources: tuple[tuple[str, int], ...]

    def teacher_slot(self, j: int) -> int:
        for k, (kind, ref) in enumerate(self.sources):
            if kind == "teacher" and ref == j:
                return k
        raise ContractError(f"teacher block {j} is not placed in mapping")


def layer_mapping(p: int, q: int, method: str) -> LayerMapping:
    if method not in DEPTH_METHODS:
        raise ContractError(f"unknown depth method {method!r}")
    if p < 1 or q < p:
        raise ContractError(f"depth expansion needs 1 <= p <= q, got p={p}, q={q}")
    if method == "constant":
        slots = list(range(p))
    else:
        slots = [j * q // p for j in range(p)]
    src: list[tuple[str, int]] = [("random", -1)] * q
    for j, k in enumerate(slots):
        src[k] = ("teacher", j)
    if method == "duplicate":
        last = -1
        for k in range(q):
            if src[k][0] == "teacher":
                last = k
            elif last >= 0:
                src[k] = ("duplicate", last)
    return LayerMapping(p, q, method, tuple(src))


# ---------------------------------------------------------------------------
# width
# ---------------------------------------------------------------------------

def _resize_axis(a: np.ndarray, n: int, axis: int) -> np.ndarray:
    s = a.shape[axis]
    if s == n:
        return a
    if s == 1:
        return np.repeat(a, n, axis=axis)
    pos = np.arange(n) * (s - 1) / (n - 1)
    lo = np.minimum(np.floor(pos).astype(int), s - 2)
    frac = (pos - lo).reshape([-1 if i == axis else 1 for i in range(a.ndim)])
    a64 = a.astype(np.float64)
    out = np.take(a64, lo, axis=axis) * (1 - frac) + np.take(a64, lo + 1, axis=axis) * frac
    return out


def expand_width(w: np.ndarray, target_shape, method: str = "insertion",
                 rng: np.random.Generator | None = None,
                 fill: str | Callable[[tuple], np.ndarray] = "normal",
                 std: float = 0.02) -> np.ndarray:
    """Grow one tensor to ``target_shape``. Same shape is a bit-exact copy."""
    w = np.asarray(w)
    target = tuple(int(t) for t in target_shape)
    if len(target) != w.ndim:
        raise ContractError(f"rank mismatch: {w.shape} -> {target}")
    if any(t < s for t, s in zip(target, w.shape)):
        raise ContractError(f"target {target} smaller than teacher {w.shape}")
    if target == w.shape:
        return w.copy()
    if method == "insertion":
        if callable(fill):
            out = np.asarray(fill(target), dtype=w.dtype)
        elif fill == "ones":
            out = np.ones(target, dtype=w.dtype)
        elif fill == "zeros":
            out = np.zeros(target, dtype=w.dtype)
        elif fill == "normal":
            if rng is None:
                raise ContractError("insertion with random fill needs an rng")
            out = truncated_normal(rng, target, std, dtype=w.dtype)
        else:
            raise ContractError(f"unknown fill {fill!r}")
        out[tuple(slice(0, s) for s in w.shape)] = w
        return out
    if method == "duplication":
        if any(t % s for t, s in zip(target, w.shape)):
            raise ContractError(f"duplication needs integer multiples: {w.shape} -> {target}")
        return np.tile(w, [t // s for t, s in zip(target, w.shape)])
    if method == "interpolation":
        out = w
        for axis, n in enumerate(target):
            out = _resize_axis(out, n, axis)
        return out.astype(w.dtype)
    raise ContractError(f"unknown width method {method!r}")


def _fill_kind(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    parent = name.rsplit(".", 2)[-2] if name.count(".") >= 2 else ""
    if parent.startswith("ln") and leaf == "weight":
        return "ones"
    if leaf == "bias":
        return "zeros"
    return "normal"


def _expand_tensor(name: str, w: np.ndarray, target: tuple, spec: ExpandSpec, key: str) -> np.ndarray:
    rng = make_rng(spec.seed, "expand", key)
    try:
        if name.endswith("attn.qkv.weight") or name.endswith("attn.qkv.bias"):
            parts = np.split(w, 3, axis=0)
            sub = (target[0] // 3,) + tuple(target[1:])
            return np.concatenate([
                expand_width(p, sub, spec.width_method, rng, _fill_kind(name), spec.fill_std)
                for p in parts], axis=0)
        return expand_width(w, target, spec.width_method, rng, _fill_kind(name), spec.fill_std)
    except ContractError as e:
        raise ContractError(f"{name}: {e}") from None


# ---------------------------------------------------------------------------
# depth + model
# ---------------------------------------------------------------------------

def expand_depth(blocks: list[dict[str, np.ndarray]], q: int, method: str,
                 random_block: Callable[[int], dict[str, np.ndarray]]
                 ) -> tuple[list[dict[str, np.ndarray]], LayerMapping]:
    """Place p teacher blocks into q slots; ``random_block(k)`` fills fresh slots."""
    mapping = layer_mapping(len(blocks), q, method)
    out: list[dict[str, np.ndarray]] = []
    for k, (kind, ref) in enumerate(mapping.sources):
        if kind == "teacher":
            out.append({n: v.copy() for n, v in blocks[ref].items()})
        elif kind == "duplicate":
            out.append({n: v.copy() for n, v in out[ref].items()})
        else:
            out.append(random_block(k))
    return out, mapping


def _check_pair(teacher: ModelConfig, student: ModelConfig) -> None:
    for tower in ("image", "text"):
        t, s = getattr(teacher, tower), getattr(student, tower)
        if s.width < t.width or s.depth < t.depth:
            raise ContractError(f"{tower}: student ({s.width}, {s.depth}) smaller than "
                                f"teacher ({t.width}, {t.depth})")
        if s.seq_len != t.seq_len or s.mlp_ratio != t.mlp_ratio:
            raise ContractError(f"{tower}: sequence length and mlp ratio must match")
        if s.is_image and (s.patch_dim != t.patch_dim):
            raise ContractError("image: patch geometry must match")
        if not s.is_image and s.vocab_size != t.vocab_size:
            raise ContractError("text: vocab size must match")
    if student.embed_dim < teacher.embed_dim:
        raise ContractError("student embed_dim smaller than teacher")


def expand_model(teacher: dict[str, np.ndarray], teacher_config: ModelConfig,
                 student_config: ModelConfig, spec: ExpandSpec = ExpandSpec()
                 ) -> tuple[dict[str, np.ndarray], dict[str, LayerMapping]]:
    """Student parameters plus the per-tower layer mappings.

    Depth is resolved first (which teacher block feeds which slot), then each
    tensor is width-expanded. Random slots are drawn directly at student width;
    duplicate slots copy their source slot after expansion, so they are
    bit-identical to it.
    """
    check_params(teacher, teacher_config)
    _check_pair(teacher_config, student_config)
    shapes = param_shapes(student_config)
    out: dict[str, np.ndarray] = {}
    mappings: dict[str, LayerMapping] = {}
    for tower in ("image", "text"):
        p = getattr(teacher_config, tower).depth
        q = getattr(student_config, tower).depth
        mapping = layer_mapping(p, q, spec.depth_method)
        mappings[tower] = mapping
        for k, (kind, ref) in enumerate(mapping.sources):
            for key in BLOCK_KEYS:
                name = f"{tower}.block{k}.{key}"
                if kind == "teacher":
                    src = f"{tower}.block{ref}.{key}"
                    out[name] = _expand_tensor(name, teacher[src], shapes[name], spec,
                                               f"{tower}.block{ref}.{key}")
                elif kind == "duplicate":
                    out[name] = out[f"{tower}.block{ref}.{key}"].copy()
                else:
                    out[name] = _fresh(name, shapes[name], spec)
    for name, shape in shapes.items():
        if name in out:
            continue
        if name == "logit_scale":
            out[name] = teacher[name].copy()
        else:
            out[name] = _expand_tensor(name, teacher[name], shape, spec, name)
    return {n: out[n] for n in shapes}, mappings


def _fresh(name: str, shape: tuple, spec: ExpandSpec) -> np.ndarray:
    kind = _fill_kind(name)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    return truncated_normal(make_rng(spec.seed, "expand", "fresh", name), shape,
                            spec.fill_std, dtype=np.float32)


def extract_submodel(student: dict[str, np.ndarray], teacher_config: ModelConfig,
                     mappings: dict[str, LayerMapping]) -> dict[str, np.ndarray]:
    """Teacher-shaped leading slice of the student, blocks read via ``mappings``."""
    shapes = param_shapes(teacher_config)
    out = {}
    for tower in ("image", "text"):
        m = mappings.get(tower)
        if m is None or m.p != getattr(teacher_config, tower).depth:
            raise ContractError(f"{tower}: mapping does not match teacher config")
    for name, shape in shapes.items():
        src = name
        parts = name.split(".")
        if len(parts) > 1 and parts[1].startswith("block"):
            j = int(parts[1][5:])
            k = mappings[parts[0]].teacher_slot(j)
            src = ".".join([parts[0], f"block{k}", *parts[2:]])
        if src not in student:
            raise ContractError(f"student has no tensor {src!r}")
        w = student[src]
        if name.endswith("attn.qkv.weight") or name.endswith("attn.qkv.bias"):
            sub = (shape[0] // 3,) + tuple(shape[1:])
            blocks = np.split(w, 3, axis=0)
            out[name] = np.concatenate(
                [b[tuple(slice(0, s) for s in sub)] for b in blocks], axis=0)
        else:
            if any(s > t for s, t in zip(shape, w.shape)):
                raise ContractError(f"{name}: student tensor {w.shape} smaller than {shape}")
            out[name] = w[tuple(slice(0, s) for s in shape)].copy()
    return out
