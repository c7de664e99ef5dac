import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mad_dg import losses
from mad_dg.losses import LossBreakdown
from mad_dg.tensor import ParamGroup, Tensor, TensorError, finite_difference_check, ops, reset_tape, sgd_update


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


finite = st.floats(-10, 10, allow_nan=False)


# ------------------------------------------------------------------ reconstruction


def test_rc_examples():
    s = Tensor(np.array([[1.0, 0.0]]))
    assert losses.loss_rc(s, [Tensor(np.zeros((1, 2)))]).item() == 0.5
    assert losses.loss_rc(s, [Tensor(s.data.copy())]).item() == 0.0
    assert losses.loss_rc(s, []).item() == 0.0


def test_rc_averages_views():
    s = Tensor(np.zeros((2, 3)))
    r1, r2 = Tensor(np.ones((2, 3))), Tensor(np.full((2, 3), 3.0))
    assert losses.loss_rc(s, [r1, r2]).item() == (1.0 + 9.0) / 2


@settings(max_examples=30, deadline=None)
@given(st.lists(finite, min_size=6, max_size=6), st.lists(finite, min_size=6, max_size=6))
def test_rc_non_negative(a, b):
    assert losses.loss_rc(Tensor(np.reshape(a, (2, 3))), [Tensor(np.reshape(b, (2, 3)))]).item() >= 0


# ------------------------------------------------------------------ domain classification


def test_dc_examples():
    assert losses.loss_dc([Tensor(np.zeros((3, 2)))], [0, 1, 1], 2).item() == pytest.approx(math.log(2), abs=1e-15)
    margins = [losses.loss_dc([Tensor(np.array([[m, -m]]))], [0], 2).item() for m in (1.0, 3.0, 10.0, 30.0)]
    assert all(a > b for a, b in zip(margins, margins[1:])) and margins[-1] < 1e-12
    la = Tensor(np.array([[0.3, -0.2], [1.0, 0.5]]))
    lb = Tensor(np.array([[-1.0, 2.0], [0.0, 0.1]]))
    a = losses.loss_dc([la], [0, 1], 2).item()
    b = losses.loss_dc([lb], [0, 1], 2).item()
    assert losses.loss_dc([la, lb], [0, 1], 2).item() == pytest.approx((a + b) / 2, abs=1e-15)


def test_dc_pixelwise_logits_score_every_pixel():
    lg = np.zeros((2, 3, 2, 2))
    lg[:, 0] = 5.0
    per_pixel = -math.log(math.exp(5) / (math.exp(5) + 2))
    assert losses.loss_dc([Tensor(lg)], [0, 0], 3).item() == pytest.approx(per_pixel, rel=1e-12)


def test_dc_label_out_of_range():
    with pytest.raises(TensorError):
        losses.loss_dc([Tensor(np.zeros((1, 2)))], [2], 2)


# ------------------------------------------------------------------ view spread


def test_mv_raw_hand_example():
    e1, e2 = Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]]))
    assert losses.loss_mv([e1, e2], "raw").item() == -2.0


def test_mv_equal_latents():
    e = np.array([[0.3, -1.2, 2.0]])
    assert losses.loss_mv([Tensor(e), Tensor(e.copy()), Tensor(e.copy())], "raw").item() == 0.0
    assert losses.loss_mv([Tensor(e), Tensor(e.copy())], "hinge", tau=4.0).item() == 4.0


def test_mv_hinge_hand_example():
    e1, e2 = Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]]))
    # each ordered pair: max(0, 4 - 2) = 2; sum 4, / 2
    assert losses.loss_mv([e1, e2], "hinge", tau=4.0).item() == 2.0
    assert losses.loss_mv([e1, e2], "hinge", tau=1.0).item() == 0.0


def test_mv_single_view_is_zero_and_errors():
    assert losses.loss_mv([Tensor(np.ones((2, 3)))]).item() == 0.0
    with pytest.raises(TensorError):
        losses.loss_mv([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))])
    with pytest.raises(TensorError):
        losses.loss_mv([Tensor(np.ones((2, 3)))] * 2, "cosine")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(0, 10 ** 6), st.floats(0.1, 50.0))
def test_mv_bounds_and_permutation_invariance(m, seed, tau):
    rng = np.random.default_rng(seed)
    lat = [rng.standard_normal((3, 4)) for _ in range(m)]
    raw = losses.loss_mv([Tensor(e) for e in lat], "raw").item()
    hinge = losses.loss_mv([Tensor(e) for e in lat], "hinge", tau).item()
    assert raw <= 0 and 0 <= hinge <= tau
    for perm in itertools.islice(itertools.permutations(range(m)), 6):
        assert losses.loss_mv([Tensor(lat[i]) for i in perm], "raw").item() == pytest.approx(raw, rel=1e-12)


def test_mv_image_level_latents_are_flattened():
    a, b = np.zeros((2, 1, 2, 2)), np.ones((2, 1, 2, 2))
    assert losses.loss_mv([Tensor(a), Tensor(b)], "raw").item() == -4.0


def test_mv_gradient_pushes_latents_apart():
    # exactly equal latents are a stationary point of the raw loss; start them a hair apart
    e1 = leaf([[0.5, -0.2, 0.1]])
    e2 = leaf([[0.5, -0.2, 0.1 + 1e-3]])
    before = float(((e1.data - e2.data) ** 2).sum())
    g = ParamGroup("encoder")
    g.add("e1", e1)
    g.add("e2", e2)
    losses.loss_mv([e1, e2], "raw").backward()
    sgd_update(g, 0.1, 0.0)
    assert float(((e1.data - e2.data) ** 2).sum()) > before


def test_mv_equal_latents_have_zero_raw_gradient():
    e1, e2 = leaf([[1.0, 2.0]]), leaf([[1.0, 2.0]])
    losses.loss_mv([e1, e2], "raw").backward()
    assert np.array_equal(e1.grad, np.zeros((1, 2))) and np.array_equal(e2.grad, np.zeros((1, 2)))


# ------------------------------------------------------------------ consistency


def test_cst_examples():
    p_img = Tensor(np.array([[0.5, 0.5]]))
    p_ins = Tensor(np.array([[1.0, 0.0]]))
    assert losses.loss_cst([p_img], [p_ins], [0], 1).item() == pytest.approx(math.sqrt(0.5), abs=1e-15)
    same = Tensor(np.array([[0.2, 0.8]]))
    assert losses.loss_cst([same], [Tensor(same.data.copy())], [0], 1).item() == 0.0


def test_cst_all_pairs_and_paired_only():
    img = [Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), Tensor(np.array([[0.5, 0.5], [0.5, 0.5]]))]
    ins = [Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])), Tensor(np.array([[0.0, 1.0]] * 3))]
    owner = [0, 1, 1]
    full = 0.0
    paired = 0.0
    for i, j in itertools.product(range(2), range(2)):
        t = float(np.linalg.norm(img[i].data[owner] - ins[j].data, axis=1).sum())
        full += t
        paired += t if i == j else 0.0
    assert losses.loss_cst(img, ins, owner, 2).item() == pytest.approx(full / 2, abs=1e-12)
    assert losses.loss_cst(img, ins, owner, 2, paired_only=True).item() == pytest.approx(paired / 2, abs=1e-12)


def test_cst_empty_batch():
    with pytest.raises(TensorError):
        losses.loss_cst([Tensor(np.zeros((0, 2)))], [Tensor(np.zeros((0, 2)))], [], 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_cst_non_negative_and_bounded(seed):
    rng = np.random.default_rng(seed)
    p = lambda n: Tensor(np.exp(z := rng.standard_normal((n, 3))) / np.exp(z).sum(1, keepdims=True))  # noqa: E731
    v = losses.loss_cst([p(2)], [p(4)], [0, 0, 1, 1], 2).item()
    assert 0 <= v <= 4 * math.sqrt(2) / 2


# ------------------------------------------------------------------ composition


def test_mvdc_and_mad_examples():
    assert losses.loss_mvdc(0.1, 0.2, -0.05) == pytest.approx(0.25, abs=1e-15)
    assert losses.loss_mvdc(0.0, 0.0, 0.0) == 0.0
    assert losses.loss_mad(1.0, 0.5, 0.5, 0.2, 0.1) == pytest.approx(1.12, abs=1e-15)
    assert losses.loss_mad(0.731, 5.0, -3.0, 9.0, 0.0) == 0.731
    with pytest.raises(TensorError):
        losses.loss_mad(1.0, 0.0, 0.0, 0.0, -0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1, allow_nan=False), st.lists(finite, min_size=8, max_size=8))
def test_breakdown_identities_hold_bitwise(lam, vals):
    bd = LossBreakdown.compose(lam, *vals)
    assert bd.check(lam)
    assert bd.l_mvdc_img == vals[1] + vals[2] + vals[3]
    assert bd.l_mvdc_ins == vals[4] + vals[5] + vals[6]
    assert bd.l_mad == vals[0] + lam * (bd.l_mvdc_img + bd.l_mvdc_ins + vals[7])


def test_breakdown_detects_tampering():
    bd = LossBreakdown.compose(0.1, 1.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    bd.l_mad = math.nextafter(bd.l_mad, 10.0)
    assert not bd.check(0.1)


def test_tensor_composition_matches_float_composition():
    rngv = np.random.default_rng(0).standard_normal(8)
    t = [Tensor(float(v)) for v in rngv]
    img = losses.loss_mvdc(t[1], t[2], t[3])
    ins = losses.loss_mvdc(t[4], t[5], t[6])
    tensor_mad = losses.loss_mad(t[0], img, ins, t[7], 0.1).item()
    assert tensor_mad == LossBreakdown.compose(0.1, *[float(v) for v in rngv]).l_mad


# ------------------------------------------------------------------ gradients


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    s = Tensor(rng.standard_normal((3, 4)))
    r = leaf(rng.standard_normal((3, 4)))
    assert finite_difference_check(lambda: losses.loss_rc(s, [r, ops.scale(r, 0.5)]), r) < 1e-4
    lg = leaf(rng.standard_normal((3, 2, 2, 2)))
    assert finite_difference_check(lambda: losses.loss_dc([lg, ops.scale(lg, -1.0)], [0, 1, 1], 2), lg) < 1e-4
    e = [leaf(rng.standard_normal((3, 4))) for _ in range(3)]
    for variant, tau in (("raw", 4.0), ("hinge", 40.0)):
        assert finite_difference_check(lambda: losses.loss_mv(e, variant, tau), e[1]) < 1e-4
    zi = leaf(rng.standard_normal((2, 3)))
    zn = leaf(rng.standard_normal((3, 3)))
    f = lambda: losses.loss_cst([ops.softmax(zi, 1)], [ops.softmax(zn, 1), ops.softmax(ops.scale(zn, 2.0), 1)],  # noqa: E731
                                [0, 1, 1], 2)
    assert finite_difference_check(f, zi) < 1e-4
    assert finite_difference_check(f, zn) < 1e-4
