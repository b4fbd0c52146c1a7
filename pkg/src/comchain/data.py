"""Synthetic paired image/caption data with a fixed binary shard format.

Shard layout (little endian)::

    b"CMDS"  u32 version  u64 sample_count
    per sample: u32 class_id, f32[C*H*W] image, u32[M*L] caption tokens

The manifest is JSON: ``{version, spec, shards: [{path, count, sha256}],
counts, sha256, indices}``. ``sha256`` hashes the concatenated shard bytes;
``indices`` (optional) restricts the manifest to a subset of samples, which
is how splits are represented without copying shards.

Token layout: 0 = PAD, 1 = EOS, then one keyword per class, then
``synonyms_per_class`` synonyms per class, then shared filler tokens. Every
caption ends with EOS at the last position.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics.rng import make_rng

MAGIC = b"CMDS"
VERSION = 1
PAD, EOS = 0, 1
_HEADER = struct.Struct("<4sIQ")


class DatasetError(ValueError):
    pass


class IntegrityError(DatasetError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 16
    samples_per_class: int = 64
    image_size: int = 16
    channels: int = 1
    caption_length: int = 8
    vocab_size: int = 64
    captions_per_image: int = 4
    noise: float = 1.0
    synonyms_per_class: int = 2
    template_waves: int = 3
    seed: int = 0
    shard_size: int = 4096

    @property
    def n_samples(self) -> int:
        return self.n_classes * self.samples_per_class

    @property
    def image_numel(self) -> int:
        return self.channels * self.image_size * self.image_size

    @property
    def first_filler(self) -> int:
        return 2 + self.n_classes * (1 + self.synonyms_per_class)

    def validate(self) -> None:
        probs = []
        if self.n_classes < 2:
            probs.append("n_classes must be >= 2")
        if self.samples_per_class < 1:
            probs.append("samples_per_class must be >= 1")
        if self.captions_per_image < 1:
            probs.append("captions_per_image must be >= 1")
        if self.caption_length < 3:
            probs.append("caption_length must be >= 3")
        if self.vocab_size <= self.first_filler:
            probs.append(
                f"vocab_size {self.vocab_size} leaves no filler tokens "
                f"(needs > {self.first_filler})")
        if self.noise < 0:
            probs.append("noise must be >= 0")
        if self.shard_size < 1:
            probs.append("shard_size must be >= 1")
        if probs:
            raise DatasetError("invalid SyntheticSpec: " + "; ".join(probs))


def _sample_dtype(spec: SyntheticSpec) -> np.dtype:
    return np.dtype([
        ("cls", "<u4"),
        ("img", "<f4", (spec.image_numel,)),
        ("cap", "<u4", (spec.captions_per_image, spec.caption_length)),
    ])


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """Smooth zero-mean, unit-std pattern per class: (n_classes, C, H, W)."""
    n = spec.image_size
    yy, xx = np.meshgrid(np.arange(n) / n, np.arange(n) / n, indexing="ij")
    out = np.zeros((spec.n_classes, spec.channels, n, n))
    for c in range(spec.n_classes):
        rng = make_rng(spec.seed, "template", c)
        for ch in range(spec.channels):
            img = np.zeros((n, n))
            for _ in range(spec.template_waves):
                freq = rng.uniform(0.5, 2.5)
                theta = rng.uniform(0, np.pi)
                phase = rng.uniform(0, 2 * np.pi)
                img += np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            img -= img.mean()
            img /= img.std() + 1e-12
            out[c, ch] = img
    return out


def make_caption(spec: SyntheticSpec, cls: int, variant: int, rng: np.random.Generator) -> np.ndarray:
    """Variant 0 carries the class keyword; later variants paraphrase with synonyms."""
    L = spec.caption_length
    n_fill = spec.vocab_size - spec.first_filler
    length = int(rng.integers(2, L))          # content tokens before padding
    body = spec.first_filler + rng.integers(0, n_fill, size=length)
    if variant == 0:
        body[rng.integers(0, length)] = 2 + cls
    else:
        syn0 = 2 + spec.n_classes + cls * spec.synonyms_per_class
        k = int(rng.integers(1, min(2, length) + 1))
        slots = rng.choice(length, size=k, replace=False)
        body[slots] = syn0 + rng.integers(0, spec.synonyms_per_class, size=k)
    tokens = np.full(L, PAD, dtype=np.uint32)
    tokens[:length] = body
    tokens[-1] = EOS
    return tokens


def generate_arrays(spec: SyntheticSpec) -> np.ndarray:
    """All samples as one structured array, class-major order."""
    spec.validate()
    temps = class_templates(spec).reshape(spec.n_classes, -1)
    rec = np.zeros(spec.n_samples, dtype=_sample_dtype(spec))
    i = 0
    for c in range(spec.n_classes):
        for s in range(spec.samples_per_class):
            rng = make_rng(spec.seed, "sample", c, s)
            noise = rng.standard_normal(spec.image_numel)
            rec["cls"][i] = c
            rec["img"][i] = (temps[c] + spec.noise * noise).astype(np.float32)
            for j in range(spec.captions_per_image):
                rec["cap"][i, j] = make_caption(spec, c, j, rng)
            i += 1
    return rec


def _shard_bytes(records: np.ndarray) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, len(records)) + records.tobytes()


@dataclass
class DatasetManifest:
    path: Path | None
    spec: SyntheticSpec
    shards: list[dict]
    sha256: str
    indices: list[int] | None = None

    @property
    def root(self) -> Path:
        return self.path.parent if self.path else Path(".")

    @property
    def total(self) -> int:
        return sum(s["count"] for s in self.shards)

    def __len__(self) -> int:
        return self.total if self.indices is None else len(self.indices)

    def to_json(self) -> dict:
        n = len(self)
        return {
            "version": VERSION,
            "spec": asdict(self.spec),
            "shards": self.shards,
            "counts": {"samples": n, "captions": n * self.spec.captions_per_image},
            "sha256": self.sha256,
            "indices": self.indices,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        body = self.to_json()
        if self.path is not None and path.parent.resolve() != self.root.resolve():
            body["shards"] = [
                {**s, "path": str((self.root / s["path"]).resolve())} for s in self.shards
            ]
        path.write_text(json.dumps(body, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        try:
            body = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetError(f"cannot read manifest {path}: {e}") from e
        if body.get("version") != VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {body.get('version')}")
        return cls(path, SyntheticSpec(**body["spec"]), body["shards"], body["sha256"],
                   body.get("indices"))


def generate(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write shards + ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {out}: {e}") from e
    records = generate_arrays(spec)
    total = hashlib.sha256()
    shards = []
    for k, start in enumerate(range(0, len(records), spec.shard_size)):
        blob = _shard_bytes(records[start:start + spec.shard_size])
        name = f"shard-{k:05d}.bin"
        try:
            (out / name).write_bytes(blob)
        except OSError as e:
            raise DatasetError(f"cannot write {out / name}: {e}") from e
        total.update(blob)
        shards.append({"path": name, "count": int(min(spec.shard_size, len(records) - start)),
                       "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = DatasetManifest(out / "manifest.json", spec, shards, total.hexdigest())
    manifest.save(out / "manifest.json")
    return manifest


@dataclass
class Samples:
    classes: np.ndarray    # (N,) int64
    images: np.ndarray     # (N, C, H, W) float32
    captions: np.ndarray   # (N, M, L) int64

    def __len__(self) -> int:
        return len(self.classes)

    def subset(self, idx) -> Samples:
        idx = np.asarray(idx, dtype=np.intp)
        return Samples(self.classes[idx], self.images[idx], self.captions[idx])


def _records_to_samples(rec: np.ndarray, spec: SyntheticSpec) -> Samples:
    n = spec.image_size
    return Samples(
        rec["cls"].astype(np.int64),
        rec["img"].reshape(len(rec), spec.channels, n, n).astype(np.float32),
        rec["cap"].astype(np.int64),
    )


_CACHE: dict[tuple, Samples] = {}


def read_samples(manifest: DatasetManifest) -> Samples:
    """Load (and verify) every shard, then apply the manifest's index subset."""
    key = (str(manifest.root.resolve()), manifest.sha256)
    full = _CACHE.get(key)
    if full is None:
        dt = _sample_dtype(manifest.spec)
        total = hashlib.sha256()
        parts = []
        for s in manifest.shards:
            p = manifest.root / s["path"]
            try:
                blob = p.read_bytes()
            except OSError as e:
                raise DatasetError(f"cannot read shard {p}: {e}") from e
            if hashlib.sha256(blob).hexdigest() != s["sha256"]:
                raise IntegrityError(f"shard {p}: hash mismatch")
            total.update(blob)
            magic, version, count = _HEADER.unpack_from(blob)
            if magic != MAGIC or version != VERSION:
                raise IntegrityError(f"shard {p}: bad magic/version")
            body = blob[_HEADER.size:]
            if len(body) != count * dt.itemsize or count != s["count"]:
                raise IntegrityError(f"shard {p}: truncated or count mismatch")
            parts.append(np.frombuffer(body, dtype=dt, count=count))
        if total.hexdigest() != manifest.sha256:
            raise IntegrityError("manifest sha256 does not match shard bytes")
        full = _records_to_samples(np.concatenate(parts), manifest.spec)
        _CACHE[key] = full
    return full if manifest.indices is None else full.subset(manifest.indices)


def verify(manifest: DatasetManifest) -> bool:
    _CACHE.pop((str(manifest.root.resolve()), manifest.sha256), None)
    read_samples(manifest)
    return True


@dataclass
class Batch:
    images: np.ndarray     # (B, C, H, W)
    captions: np.ndarray   # (B, m, L)
    classes: np.ndarray    # (B,)
    index: np.ndarray      # positions within the manifest


def load_batches(source: DatasetManifest | Samples, batch_size: int, seed: int = 0,
                 epoch: int = 0, shuffle: bool = True,
                 captions_per_image: int | None = None) -> Iterator[Batch]:
    """One epoch of batches; the final batch may be short.

    Order and caption subsets are a pure function of ``(seed, epoch)``.
    """
    data = read_samples(source) if isinstance(source, DatasetManifest) else source
    n = len(data)
    full_m = data.captions.shape[1]
    m = full_m if captions_per_image is None else captions_per_image
    if not 1 <= m <= full_m:
        raise DatasetError(f"captions_per_image {m} outside [1, {full_m}]")
    rng = make_rng(seed, "loader", epoch)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        caps = data.captions[idx]
        if m < full_m:
            pick = np.argsort(rng.random((len(idx), full_m)), axis=1)[:, :m]
            caps = np.take_along_axis(caps, pick[:, :, None], axis=1)
        yield Batch(data.images[idx], caps, data.classes[idx], idx)


def split(manifest: DatasetManifest, fractions: Sequence[float], seed: int = 0
          ) -> list[DatasetManifest]:
    """Disjoint, exhaustive, class-stratified index splits.

    Samples are laid out class by class (shuffled within class) and dealt to
    splits by largest deficit, so every class is spread in proportion and the
    split sizes are within one of ``round(n * fraction)``.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.ndim != 1 or len(fr) == 0 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    base = np.arange(manifest.total) if manifest.indices is None else np.asarray(manifest.indices)
    classes = read_samples(manifest).classes
    rng = make_rng(seed, "split")
    order = []
    for c in np.unique(classes):
        members = np.flatnonzero(classes == c)
        order.extend(members[rng.permutation(len(members))])
    counts = np.zeros(len(fr))
    buckets: list[list[int]] = [[] for _ in fr]
    for pos, i in enumerate(order):
        k = int(np.argmax(fr * (pos + 1) - counts))
        counts[k] += 1
        buckets[k].append(int(base[i]))
    return [DatasetManifest(manifest.path, manifest.spec, manifest.shards, manifest.sha256,
                            sorted(b)) for b in buckets]


def class_separation(spec: SyntheticSpec) -> tuple[float, float]:
    """Mean within-class and across-class pairwise image distance."""
    data = _records_to_samples(generate_arrays(spec), spec)
    x = data.images.reshape(len(data), -1).astype(np.float64)
    sq = (x * x).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0))
    same = data.classes[:, None] == data.classes[None, :]
    off = ~np.eye(len(x), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())

