import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comchain.losses import (
    CalibrationError,
    ContrastiveBatch,
    DistillPair,
    calibrate_alpha,
    ifd_loss,
    ifd_pair_loss,
    t2v_loss,
    task_loss,
    total_loss,
    v2t_loss,
)
from comchain.numerics import ContractError, DimensionError, Tensor, grad_check, l2_normalize

E1 = math.log(1 + math.exp(-1))  # hand-enumerated two-way softmax, see tests below


def batch(v, t, tau=1.0, m=1):
    return ContrastiveBatch.from_temperature(np.asarray(v, float), np.asarray(t, float), tau, m)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_t2v_uniform_two():
    b = batch([[1, 0], [1, 0]], [[1, 0], [1, 0]])
    assert t2v_loss(b).item() == pytest.approx(math.log(2), abs=1e-12)


def test_identity_similarity_hand_value():
    # row i: logits [1, 0] -> -log(e / (e + 1)) = log(1 + e^-1)
    b = batch(np.eye(2), np.eye(2))
    assert t2v_loss(b).item() == pytest.approx(E1, abs=1e-12)
    assert v2t_loss(b).item() == pytest.approx(E1, abs=1e-12)
    assert abs(E1 - 0.3133) < 1e-4


def test_v2t_uniform_two_by_two_is_ln4():
    v = [[1, 0], [1, 0]]
    t = [[1, 0]] * 4
    assert v2t_loss(batch(v, t, m=2)).item() == pytest.approx(math.log(4), abs=1e-12)


def test_task_is_mean_of_directions_and_symmetric_case():
    rng = np.random.default_rng(0)
    v, t = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    b = batch(v, t, 0.5)
    assert task_loss(b).item() == pytest.approx((t2v_loss(b).item() + v2t_loss(b).item()) / 2, abs=1e-15)
    # symmetric similarity: texts == images
    b = batch(v, v, 0.5)
    assert task_loss(b).item() == pytest.approx(t2v_loss(b).item(), abs=1e-12)


def test_saturated_softmax():
    v = np.array([[1.0, 0], [-1.0, 0]])
    assert task_loss(batch(v, v, tau=0.01)).item() < 1e-6


def test_v2t_m1_is_transpose_structure():
    rng = np.random.default_rng(1)
    v, t = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    assert v2t_loss(batch(v, t, 0.3)).item() == pytest.approx(t2v_loss(batch(t, v, 0.3)).item(), abs=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("tau", [0.01, 0.07, 1.0, 10.0])
def test_uniform_batch_gives_ln_n(n, tau):
    v = np.tile([1.0, 0, 0], (n, 1))
    assert abs(t2v_loss(batch(v, v, tau)).item() - math.log(n)) <= 1e-6


def test_nonpositive_temperature_rejected():
    with pytest.raises(ContractError):
        batch(np.eye(2), np.eye(2), tau=0.0)


def test_text_shape_checked():
    with pytest.raises(DimensionError):
        t2v_loss(batch(np.eye(2), np.eye(2), m=2))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 10_000))
def test_t2v_permutation_invariant(n, m, seed):
    rng = np.random.default_rng(seed)
    v, t = unit_rows(rng, n, 3), unit_rows(rng, n * m, 3)
    perm = rng.permutation(n)
    tperm = (perm[:, None] * m + np.arange(m)).reshape(-1)
    a = t2v_loss(batch(v, t, 0.2, m)).item()
    b = t2v_loss(batch(v[perm], t[tperm], 0.2, m)).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert v2t_loss(batch(v, t, 0.2, m)).item() == pytest.approx(
        v2t_loss(batch(v[perm], t[tperm], 0.2, m)).item(), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 10_000))
def test_losses_nonnegative(n, m, seed):
    rng = np.random.default_rng(seed)
    b = batch(unit_rows(rng, n, 3), unit_rows(rng, n * m, 3), 0.1, m)
    assert t2v_loss(b).item() >= 0 and v2t_loss(b).item() >= 0


# -- distillation --------------------------------------------------------------

def pair(teacher, student, weight=None, bias=None, alpha=1.0):
    student = np.asarray(student, float)
    teacher = np.asarray(teacher, float)
    w = np.eye(teacher.shape[1], student.shape[1]) if weight is None else weight
    b = np.zeros(teacher.shape[1]) if bias is None else bias
    return DistillPair(teacher, Tensor(student), w, b, alpha)


def test_ifd_matched_is_zero():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert ifd_loss(pair(x, x)).item() == 0.0


def test_ifd_unit_residual_alpha_500():
    assert ifd_loss(pair([[1.0, 0]], [[0.0, 0]], alpha=500)).item() == 500.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1e4), st.integers(0, 10_000))
def test_ifd_linear_in_alpha_exactly(a, seed):
    rng = np.random.default_rng(seed)
    t, s = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    one = ifd_loss(pair(t, s, w, alpha=1.0)).item()
    assert ifd_loss(pair(t, s, w, alpha=a)).item() == a * one


def test_ifd_doubling_alpha():
    t, s = np.ones((2, 2)), np.zeros((2, 2))
    assert ifd_loss(pair(t, s, alpha=2.0)).item() == 2 * ifd_loss(pair(t, s)).item()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ifd_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    t, s = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    c = rng.standard_normal(3)
    # shift the teacher and the transformed student (through the bias) together
    base = ifd_loss(pair(t, s)).item()
    shifted = ifd_loss(pair(t + c, s, bias=c)).item()
    assert shifted == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_ifd_dim_mismatch():
    with pytest.raises(DimensionError):
        ifd_loss(DistillPair(np.ones((2, 3)), Tensor(np.ones((2, 4))), np.ones((2, 4)), np.zeros(2)))


def test_ifd_invalid_alpha():
    with pytest.raises(ContractError):
        ifd_loss(pair(np.ones((1, 2)), np.ones((1, 2)), alpha=float("nan")))


def test_pair_averaging():
    t, s = np.ones((1, 2)), np.zeros((1, 2))
    vis = pair(t, s)                       # raw value 2
    txt = pair(t, t)                       # 0
    assert ifd_pair_loss(vis, txt).item() == 1.0
    assert ifd_pair_loss(pair(t, t), pair(t, t)).item() == 0.0


def test_total_loss():
    assert total_loss(Tensor(np.array([0.5])), Tensor(np.array([0.05]))).item() == pytest.approx(0.55)
    assert total_loss(Tensor(np.array([0.5])), Tensor(np.array([0.0]))).item() == 0.5


def test_calibrate_alpha():
    assert calibrate_alpha(2.0, 0.004, 0.1) == pytest.approx(50.0)
    assert calibrate_alpha(2.0, 0.004, 0.0) == 0.0
    with pytest.raises(CalibrationError):
        calibrate_alpha(2.0, 0.0, 0.1)


def test_calibrated_ratio_is_target():
    rng = np.random.default_rng(3)
    p = pair(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    raw = ifd_loss(p).item()
    alpha = calibrate_alpha(1.7, raw, 0.1)
    p.alpha = alpha
    assert ifd_loss(p).item() / 1.7 == pytest.approx(0.1, rel=1e-12)


# -- gradients -----------------------------------------------------------------

def _contrastive(direction, m):
    def f(p):
        b = ContrastiveBatch(l2_normalize(p["v"]), l2_normalize(p["t"]),
                             1.0 / 0.3, m)
        return {"t2v": t2v_loss, "v2t": v2t_loss, "task": task_loss}[direction](b)
    return f


@pytest.mark.parametrize("direction", ["t2v", "v2t", "task"])
def test_contrastive_gradients_20_points(direction):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        n, m = 3, 2
        point = {"v": rng.standard_normal((n, 4)), "t": rng.standard_normal((n * m, 4))}
        worst = max(worst, grad_check(_contrastive(direction, m), point))
    assert worst <= 1e-4


def test_learnable_scale_gradient():
    rng = np.random.default_rng(5)

    def f(p):
        b = ContrastiveBatch.from_logit_scale(l2_normalize(p["v"]), l2_normalize(p["t"]), p["s"], 2)
        return task_loss(b)
    worst = 0.0
    for _ in range(20):
        point = {"v": rng.standard_normal((3, 4)), "t": rng.standard_normal((6, 4)),
                 "s": rng.normal(1.0, 0.5, size=(1,))}
        worst = max(worst, grad_check(f, point))
    assert worst <= 1e-4


def test_distill_gradients_20_points():
    rng = np.random.default_rng(12)

    def f(p):
        vis = DistillPair(p["tv"], p["sv"], p["wv"], p["bv"], alpha=3.0)
        txt = DistillPair(p["tt"], p["st"], p["wt"], p["bt"], alpha=3.0)
        return ifd_pair_loss(vis, txt)
    worst = 0.0
    for _ in range(20):
        point = {"tv": rng.standard_normal((3, 2)), "sv": rng.standard_normal((3, 4)),
                 "wv": rng.standard_normal((2, 4)), "bv": rng.standard_normal(2),
                 "tt": rng.standard_normal((5, 2)), "st": rng.standard_normal((5, 4)),
                 "wt": rng.standard_normal((2, 4)), "bt": rng.standard_normal(2)}
        worst = max(worst, grad_check(f, point))
    assert worst <= 1e-4
