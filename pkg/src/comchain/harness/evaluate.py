"""Retrieval evaluation on a held-out split.

Hits are counted at the class level: the synthetic captions carry no
instance identity, so a retrieved item counts as correct when it shares the
query's class.
"""
from __future__ import annotations

import numpy as np

from ..data import Samples
from ..modelzoo import ModelConfig, encode_image, encode_text
from ..numerics import no_grad


class EmptySplitError(ValueError):
    pass


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def embed(params: dict, config: ModelConfig, samples: Samples, chunk: int = 256
          ) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm image features (N, E) and caption features (N*M, E)."""
    imgs, txts = [], []
    with no_grad():
        for s in range(0, len(samples), chunk):
            imgs.append(encode_image(params, config, samples.images[s:s + chunk]).numpy())
            caps = samples.captions[s:s + chunk]
            txts.append(encode_text(params, config, caps.reshape(-1, caps.shape[-1])).numpy())
    return _unit(np.concatenate(imgs).astype(np.float64)), _unit(np.concatenate(txts).astype(np.float64))


def retrieval_metrics(img: np.ndarray, txt: np.ndarray, classes: np.ndarray,
                      captions_per_image: int) -> dict[str, float]:
    """R@1 (percent) both directions and class-prototype top-1 from unit features."""
    n = len(img)
    if n == 0:
        raise EmptySplitError("evaluation split is empty")
    m = captions_per_image
    txt_cls = np.repeat(classes, m)
    sims = txt @ img.T                                       # (N*M, N)
    t2i = float(np.mean(classes[np.argmax(sims, axis=1)] == txt_cls))
    i2t = float(np.mean(txt_cls[np.argmax(sims, axis=0)] == classes))
    labels = np.unique(classes)
    protos = _unit(np.stack([txt[txt_cls == c].mean(0) for c in labels]))
    proto = float(np.mean(labels[np.argmax(img @ protos.T, axis=1)] == classes))
    return {
        "t2i_r1": 100 * t2i,
        "i2t_r1": 100 * i2t,
        "r1": 100 * (t2i + i2t) / 2,
        "proto_top1": 100 * proto,
    }


def eval_retrieval(params: dict, config: ModelConfig, samples: Samples) -> dict[str, float]:
    if len(samples) == 0:
        raise EmptySplitError("evaluation split is empty")
    img, txt = embed(params, config, samples)
    return retrieval_metrics(img, txt, samples.classes, samples.captions.shape[1])
