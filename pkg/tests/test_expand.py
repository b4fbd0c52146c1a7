import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comchain.expand import (
    DEPTH_METHODS,
    WIDTH_METHODS,
    ExpandSpec,
    expand_depth,
    expand_model,
    expand_width,
    extract_submodel,
    layer_mapping,
)
from comchain.modelzoo import NANO, EncoderConfig, ModelConfig, build_params, param_shapes
from comchain.numerics import ContractError, make_rng


def rng():
    return make_rng(0, "test")


def test_insertion_scalar_corner():
    out = expand_width(np.array([[2.0]]), (2, 2), "insertion", rng())
    assert out[0, 0] == 2.0
    assert np.all(out.reshape(-1)[1:] != 0)  # random fill, almost surely nonzero


def test_insertion_vector_fills():
    assert list(expand_width(np.array([3.0, 4.0]), (4,), "insertion", fill="ones")) == [3, 4, 1, 1]
    assert list(expand_width(np.array([3.0, 4.0]), (4,), "insertion", fill="zeros")) == [3, 4, 0, 0]


@pytest.mark.parametrize("method", WIDTH_METHODS)
def test_same_shape_is_copy(method):
    w = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    out = expand_width(w, w.shape, method, rng())
    assert np.array_equal(out, w) and out is not w


def test_duplication_tiles():
    assert list(expand_width(np.array([1.0, 2.0]), (4,), "duplication")) == [1, 2, 1, 2]
    with pytest.raises(ContractError):
        expand_width(np.array([1.0, 2.0]), (3,), "duplication")


def test_interpolation_endpoints():
    np.testing.assert_allclose(expand_width(np.array([0.0, 2.0]), (3,), "interpolation"), [0, 1, 2])


def test_interpolation_bilinear_2d():
    w = np.array([[0.0, 2.0], [4.0, 6.0]])
    out = expand_width(w, (3, 3), "interpolation")
    np.testing.assert_allclose(out, [[0, 1, 2], [2, 3, 4], [4, 5, 6]])


def test_shrinking_rejected():
    with pytest.raises(ContractError):
        expand_width(np.ones((3, 3)), (2, 4), "insertion", rng())


def test_mapping_examples():
    m = layer_mapping(2, 4, "duplicate")
    assert m.sources == (("teacher", 0), ("duplicate", 0), ("teacher", 1), ("duplicate", 2))
    m = layer_mapping(2, 4, "interval")
    assert m.sources == (("teacher", 0), ("random", -1), ("teacher", 1), ("random", -1))
    m = layer_mapping(2, 4, "constant")
    assert m.sources == (("teacher", 0), ("teacher", 1), ("random", -1), ("random", -1))
    with pytest.raises(ContractError):
        layer_mapping(3, 2, "constant")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 8), st.sampled_from(DEPTH_METHODS))
def test_mapping_covers_and_uses_teacher_once(p, extra, method):
    q = p + extra
    m = layer_mapping(p, q, method)
    assert len(m.sources) == q
    placed = [ref for kind, ref in m.sources if kind == "teacher"]
    assert sorted(placed) == list(range(p))
    for k, (kind, ref) in enumerate(m.sources):
        if kind == "duplicate":
            assert ref < k and m.sources[ref][0] == "teacher"
    if method == "duplicate":
        assert all(kind != "random" for kind, _ in m.sources)


def test_expand_depth_duplicate_blocks():
    blocks = [{"w": np.array([1.0])}, {"w": np.array([2.0])}]
    out, m = expand_depth(blocks, 4, "duplicate", lambda k: {"w": np.array([-1.0])})
    assert [b["w"][0] for b in out] == [1, 1, 2, 2]
    out, _ = expand_depth(blocks, 4, "interval", lambda k: {"w": np.array([-1.0])})
    assert [b["w"][0] for b in out] == [1, -1, 2, -1]
    out, _ = expand_depth(blocks, 2, "constant", lambda k: {"w": np.array([-1.0])})
    assert [b["w"][0] for b in out] == [1, 2]


def _cfg(iw, idp, tw, tdp, head=4):
    return ModelConfig("c", EncoderConfig(iw, idp, head, 5, patch_size=2, image_size=4, channels=1),
                       EncoderConfig(tw, tdp, head, 3, vocab_size=7), embed_dim=tw)


@st.composite
def config_pairs(draw):
    iw = 4 * draw(st.integers(1, 3))
    tw = 4 * draw(st.integers(1, 3))
    idp, tdp = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    small = _cfg(iw, idp, tw, tdp)
    big = _cfg(iw + 4 * draw(st.integers(0, 3)), idp + draw(st.integers(0, 3)),
               tw + 4 * draw(st.integers(0, 3)), tdp + draw(st.integers(0, 3)))
    return small, big


def _equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@settings(max_examples=50, deadline=None)
@given(config_pairs(), st.sampled_from(DEPTH_METHODS), st.integers(0, 1000))
def test_embedding_exactness(pair, depth, seed):
    small, big = pair
    teacher = build_params(small, seed)
    student, maps = expand_model(teacher, small, big, ExpandSpec("insertion", depth, seed=seed))
    assert list(student) == list(param_shapes(big))
    assert _equal(extract_submodel(student, small, maps), teacher)
    if depth == "duplicate":
        for tower, m in maps.items():
            for k, (kind, ref) in enumerate(m.sources):
                if kind == "duplicate":
                    for key in [n for n in student if n.startswith(f"{tower}.block{k}.")]:
                        src = key.replace(f"block{k}.", f"block{ref}.")
                        assert np.array_equal(student[key], student[src])


@pytest.mark.parametrize("width", WIDTH_METHODS)
@pytest.mark.parametrize("depth", DEPTH_METHODS)
def test_identity_expansion(width, depth):
    cfg = NANO["nano-T"]
    p = build_params(cfg, 1)
    out, _ = expand_model(p, cfg, cfg, ExpandSpec(width, depth))
    assert _equal(out, p)


def test_determinism():
    t = build_params(NANO["nano-T"], 0)
    a, _ = expand_model(t, NANO["nano-T"], NANO["nano-S"], ExpandSpec(seed=4))
    b, _ = expand_model(t, NANO["nano-T"], NANO["nano-S"], ExpandSpec(seed=4))
    c, _ = expand_model(t, NANO["nano-T"], NANO["nano-S"], ExpandSpec(seed=5))
    assert _equal(a, b) and not _equal(a, c)


def test_nano_chain_insertion_duplicate():
    for small, big in (("nano-T", "nano-S"), ("nano-S", "nano-B")):
        t = build_params(NANO[small], 2)
        s, m = expand_model(t, NANO[small], NANO[big], ExpandSpec())
        assert _equal(extract_submodel(s, NANO[small], m), t)
        assert np.array_equal(s["logit_scale"], t["logit_scale"])


def test_duplication_leading_tile_recovers_teacher():
    t = build_params(NANO["nano-T"], 2)
    s, m = expand_model(t, NANO["nano-T"], NANO["nano-S"], ExpandSpec("duplication", "duplicate"))
    assert _equal(extract_submodel(s, NANO["nano-T"], m), t)


def test_qkv_heads_preserved_in_insertion():
    small, big = _cfg(4, 1, 4, 1), _cfg(8, 1, 8, 1)
    t = build_params(small, 0)
    s, _ = expand_model(t, small, big)
    w_t, w_s = t["image.block0.attn.qkv.weight"], s["image.block0.attn.qkv.weight"]
    for part in range(3):
        assert np.array_equal(w_s[8 * part:8 * part + 4, :4], w_t[4 * part:4 * part + 4])


def test_random_init_differs_from_teacher():
    small, big = NANO["nano-T"], NANO["nano-S"]
    t = build_params(small, 0)
    _, m = expand_model(t, small, big)
    fresh = build_params(big, 99)
    sub = extract_submodel(fresh, small, m)
    assert not _equal(sub, t)


def test_expand_rejects_smaller_student():
    with pytest.raises(ContractError):
        expand_model(build_params(NANO["nano-S"]), NANO["nano-S"], NANO["nano-T"])


def test_invalid_spec():
    with pytest.raises(ContractError):
        ExpandSpec(width_method="stretch")
