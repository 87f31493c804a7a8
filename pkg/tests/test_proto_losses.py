import math

import numpy as np
import pytest

from protoda import (
    SOURCE,
    TARGET,
    ProtoLossConfig,
    build_etf,
    ppc_loss,
    ppd_loss,
    proto_ce_loss,
    proto_loss,
    proto_loss_batch,
    prototype_of,
    weight_map,
    weight_scale,
)
from oracles import fd_grad, rel_err


@pytest.fixture(scope="module")
def bank2():
    return build_etf(2, 5, seed=0)


@pytest.fixture(scope="module")
def bank3():
    return build_etf(3, 9, seed=4)


def unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


# ----------------------------------------------------------------- ce loss


def test_ce_hand_value_c1_target():
    bank = build_etf(1, 3, seed=7)
    emb = prototype_of(bank, 1, TARGET)
    loss, _ = proto_ce_loss(emb, 1, TARGET, bank)
    # logits are 1 against own prototype and -1/(2C) = -0.5 against unknown
    assert loss == pytest.approx(-math.log(math.e / (math.e + math.exp(-0.5))), abs=1e-12)
    assert loss == pytest.approx(0.2014, abs=1e-4)


def test_ce_positive_everywhere(bank3):
    rng = np.random.default_rng(0)
    for _ in range(50):
        emb = unit(rng, 9)
        cls = int(rng.integers(1, 4))
        domain = SOURCE if rng.random() < 0.5 else TARGET
        loss, _ = proto_ce_loss(emb, cls, domain, bank3)
        assert loss > 0


def test_ce_softmax_sets(bank2):
    # target softmax runs over C+1 prototypes, source over C
    emb = prototype_of(bank2, 1, SOURCE)
    loss_src, _ = proto_ce_loss(emb, 1, SOURCE, bank2)
    # two-way softmax with logits (1, -0.25): loss = log(1 + e^{-1.25})
    assert loss_src == pytest.approx(math.log(1 + math.exp(-1.25)), abs=1e-12)

    emb_t = prototype_of(bank2, 1, TARGET)
    loss_tgt, _ = proto_ce_loss(emb_t, 1, TARGET, bank2)
    assert loss_tgt == pytest.approx(math.log(1 + 2 * math.exp(-1.25)), abs=1e-12)


def test_ce_unknown_only_on_target(bank2):
    emb = prototype_of(bank2, 3, TARGET)
    loss, _ = proto_ce_loss(emb, 3, TARGET, bank2)
    assert loss > 0
    with pytest.raises(KeyError):
        proto_ce_loss(emb, 3, SOURCE, bank2)


def test_ce_grad_finite_differences(bank3):
    rng = np.random.default_rng(1)
    for _ in range(30):
        emb = unit(rng, 9)
        cls = int(rng.integers(1, 4))
        domain = SOURCE if rng.random() < 0.5 else TARGET
        _, grad = proto_ce_loss(emb, cls, domain, bank3)
        fd = fd_grad(lambda e: proto_ce_loss(e, cls, domain, bank3)[0], emb)
        assert rel_err(grad, fd) < 1e-4


# ---------------------------------------------------------------- ppc loss


def test_ppc_monotone_in_own_similarity(bank2):
    # moving toward the source prototype strictly decreases the loss
    p = prototype_of(bank2, 1, SOURCE)
    other = prototype_of(bank2, 2, SOURCE)
    losses = []
    for t in (0.0, 0.2, 0.4, 0.6, 0.8):
        emb = (1 - t) * other + t * p
        emb /= np.linalg.norm(emb)
        losses.append(ppc_loss(emb, 1, bank2, tau=0.5)[0])
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert all(v > 0 for v in losses)


def test_ppc_high_temperature_limit(bank3):
    rng = np.random.default_rng(2)
    emb = unit(rng, 9)
    loss, _ = ppc_loss(emb, 2, bank3, tau=1e6)
    k = bank3.num_prototypes
    assert loss == pytest.approx(math.log(k / 2), abs=1e-3)


def test_ppc_unknown_single_positive(bank2):
    emb = prototype_of(bank2, 3, TARGET)
    loss, _ = ppc_loss(emb, 3, bank2, tau=1e6)
    assert loss == pytest.approx(math.log(bank2.num_prototypes / 1), abs=1e-3)


def test_ppc_tau_validation(bank2):
    with pytest.raises(ValueError):
        ppc_loss(np.ones(5) / np.sqrt(5), 1, bank2, tau=0.0)


def test_ppc_grad_finite_differences(bank3):
    rng = np.random.default_rng(3)
    for _ in range(30):
        emb = unit(rng, 9)
        cls = int(rng.integers(1, 5))  # includes the unknown class 4
        _, grad = ppc_loss(emb, cls, bank3, tau=0.1)
        fd = fd_grad(lambda e: ppc_loss(e, cls, bank3, tau=0.1)[0], emb)
        assert rel_err(grad, fd) < 1e-4


# ---------------------------------------------------------------- ppd loss


def test_ppd_hand_values(bank2):
    p = prototype_of(bank2, 2, TARGET)
    assert ppd_loss(p, 2, TARGET, bank2)[0] == pytest.approx(0.0, abs=1e-12)

    # orthogonal unit vector
    rng = np.random.default_rng(4)
    v = unit(rng, 5)
    v = v - (v @ p) * p
    v /= np.linalg.norm(v)
    assert ppd_loss(v, 2, TARGET, bank2)[0] == pytest.approx(1.0, abs=1e-12)

    assert ppd_loss(-p, 2, TARGET, bank2)[0] == pytest.approx(4.0, abs=1e-12)


def test_ppd_grad_closed_form(bank2):
    rng = np.random.default_rng(5)
    emb = unit(rng, 5)
    p = prototype_of(bank2, 1, SOURCE)
    loss, grad = ppd_loss(emb, 1, SOURCE, bank2)
    assert np.allclose(grad, -2 * (1 - emb @ p) * p)
    fd = fd_grad(lambda e: ppd_loss(e, 1, SOURCE, bank2)[0], emb)
    assert rel_err(grad, fd) < 1e-4


# ------------------------------------------------------------- combination


def test_proto_loss_zero_lambdas_equals_ce(bank3):
    rng = np.random.default_rng(6)
    cfg = ProtoLossConfig(lambda1=0.0, lambda2=0.0)
    for _ in range(10):
        emb = unit(rng, 9)
        cls = int(rng.integers(1, 4))
        ce = proto_ce_loss(emb, cls, SOURCE, bank3)
        combined = proto_loss(emb, cls, SOURCE, bank3, cfg)
        assert combined[0] == ce[0]
        assert np.array_equal(combined[1], ce[1])


def test_proto_loss_additive_bitwise(bank3):
    rng = np.random.default_rng(7)
    cfg = ProtoLossConfig(lambda1=0.01, lambda2=0.01, tau=0.1)
    for _ in range(10):
        emb = unit(rng, 9)
        cls = int(rng.integers(1, 4))
        ce = proto_ce_loss(emb, cls, TARGET, bank3)
        pc = ppc_loss(emb, cls, bank3, cfg.tau)
        pd = ppd_loss(emb, cls, TARGET, bank3)
        loss, grad = proto_loss(emb, cls, TARGET, bank3, cfg)
        assert loss == ce[0] + cfg.lambda1 * pc[0] + cfg.lambda2 * pd[0]
        assert np.array_equal(grad, ce[1] + cfg.lambda1 * pc[1] + cfg.lambda2 * pd[1])


def test_proto_loss_ppd_vanishes_at_target_prototype(bank2):
    cfg = ProtoLossConfig(lambda1=0.01, lambda2=0.01)
    emb = prototype_of(bank2, 1, TARGET)
    loss, _ = proto_loss(emb, 1, TARGET, bank2, cfg)
    ce, _ = proto_ce_loss(emb, 1, TARGET, bank2)
    pc, _ = ppc_loss(emb, 1, bank2, cfg.tau)
    assert loss == pytest.approx(ce + 0.01 * pc, abs=1e-15)


def test_proto_loss_grad_finite_differences(bank3):
    rng = np.random.default_rng(8)
    cfg = ProtoLossConfig()
    for _ in range(100):
        emb = unit(rng, 9)
        cls = int(rng.integers(1, 5))
        domain = TARGET if cls == 4 else (SOURCE if rng.random() < 0.5 else TARGET)
        _, grad = proto_loss(emb, cls, domain, bank3, cfg)
        fd = fd_grad(lambda e: proto_loss(e, cls, domain, bank3, cfg)[0], emb)
        assert rel_err(grad, fd) < 1e-4


def test_proto_loss_batch_matches_scalar(bank3):
    rng = np.random.default_rng(9)
    cfg = ProtoLossConfig()
    emb = rng.normal(size=(40, 9))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    cls = rng.integers(1, 5, size=40)
    losses, grads = proto_loss_batch(emb, cls, TARGET, bank3, cfg)
    for i in range(40):
        loss_i, grad_i = proto_loss(emb[i], int(cls[i]), TARGET, bank3, cfg)
        assert losses[i] == pytest.approx(loss_i, abs=1e-12)
        assert np.allclose(grads[i], grad_i, atol=1e-12)


def test_proto_loss_batch_source_rejects_unknown(bank3):
    emb = np.ones((1, 9)) / 3.0
    with pytest.raises(KeyError):
        proto_loss_batch(emb, np.array([4]), SOURCE, bank3, ProtoLossConfig())


# ------------------------------------------------------------ weight scale


def test_weight_scale_hand_values():
    assert weight_scale(1.0, 1.0) == 2.0
    assert weight_scale(1.0, -1.0) == 0.0
    assert weight_scale(-1.0, -1.0) == 0.0
    assert weight_scale(0.8, 0.2) == pytest.approx(1.44, abs=1e-12)
    assert weight_scale(0.8, 0.2, "mean") == pytest.approx(1.08, abs=1e-12)
    assert weight_scale(0.5, 0.5, "abs") == 2.0
    assert weight_scale(1.0, -1.0, "gaussian", sigma=1.0) == pytest.approx(
        2 * math.exp(-4.0), abs=1e-12
    )
    assert weight_scale(1.0, -1.0, "gaussian", sigma=1.0) == pytest.approx(0.0366, abs=1e-4)


def test_weight_scale_range_validation():
    with pytest.raises(ValueError):
        weight_scale(1.1, 0.0)
    with pytest.raises(ValueError):
        weight_scale(0.0, -1.2)
    # inside the 1e-9 slack is fine
    assert weight_scale(1.0 + 1e-10, 1.0) == 2.0
    with pytest.raises(ValueError):
        weight_scale(0.5, 0.5, "nope")


def test_weight_ours_vs_arithmetic_mean_grid():
    grid = np.linspace(-1.0, 1.0, 201)
    for d_s in grid[::10]:
        for d_t in grid[::10]:
            ours = weight_scale(d_s, d_t)
            am = ((d_s + 1.0) + (d_t + 1.0)) / 2.0
            assert ours <= am + 1e-15
            if d_s == d_t:
                assert ours == am
            else:
                assert ours < am


def test_weight_ours_symmetry_and_monotonicity():
    rng = np.random.default_rng(10)
    for _ in range(200):
        a, b = rng.uniform(-1, 1, size=2)
        assert weight_scale(a, b) == weight_scale(b, a)
    # non-decreasing in each argument
    xs = np.linspace(-1, 1, 41)
    for fixed in (-0.7, 0.0, 0.9):
        vals = [weight_scale(x, fixed) for x in xs]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_weight_ours_extremes():
    # 2 iff both are 1; 0 iff min is -1
    assert weight_scale(1, 1) == 2.0
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b = rng.uniform(-1, 1, size=2)
        w = weight_scale(a, b)
        if not (a == 1 and b == 1):
            assert w < 2.0
        if min(a, b) > -1:
            assert w > 0.0
        assert weight_scale(a, -1.0) == 0.0
        assert weight_scale(-1.0, b) == 0.0


# -------------------------------------------------------------- weight map


def test_weight_map_at_target_prototypes(bank2):
    # every pixel sits exactly on its class's target prototype
    h, w = 3, 4
    classes = np.array([[1, 2, 1, 2]] * 3)
    emb = np.zeros((h, w, 5))
    for c in (1, 2):
        emb[classes == c] = prototype_of(bank2, c, TARGET)
    wmap = weight_map(emb, classes, bank2)
    expected = 2 * 0.75 * 2 / 2.75  # d_s = -0.25, d_t = 1
    assert np.allclose(wmap, expected, atol=1e-9)
    assert wmap[0, 0] == pytest.approx(1.0909, abs=1e-4)


def test_weight_map_unknown_pixels_get_one(bank2):
    rng = np.random.default_rng(12)
    emb = rng.normal(size=(4, 4, 5))
    classes = np.full((4, 4), 3)  # all unknown
    assert np.array_equal(weight_map(emb, classes, bank2), np.ones((4, 4)))


def test_weight_map_single_pixel_matches_scalar(bank2):
    rng = np.random.default_rng(13)
    for variant in ("ours", "abs", "gaussian", "mean"):
        emb = rng.normal(size=(1, 1, 5))
        unitv = emb[0, 0] / np.linalg.norm(emb[0, 0])
        from protoda import cosine_pair

        d_s, d_t = cosine_pair(bank2, unitv, 2)
        wmap = weight_map(emb, np.array([[2]]), bank2, variant, sigma=0.7)
        assert wmap[0, 0] == pytest.approx(
            weight_scale(d_s, d_t, variant, sigma=0.7), abs=1e-12
        )


def test_weight_map_shape_mismatch(bank2):
    with pytest.raises(ValueError):
        weight_map(np.zeros((2, 2, 5)), np.ones((3, 3), dtype=int), bank2)
    with pytest.raises(ValueError):
        weight_map(np.zeros((2, 2, 4)), np.ones((2, 2), dtype=int), bank2)
