import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from olat.config import TrainConfig
from olat.errors import InvalidArgument, NumericError
from olat.geometry import degrade_indices
from olat.losses import (
    LossBreakdown,
    chamfer_loss,
    degrade_mask,
    gradient_penalty_norms,
    input_grad_norm,
    npair_loss,
    ranking_loss,
    reconstruction_loss,
    smooth_l1,
    total_losses,
    triplet_rank_loss,
    wgan_d_loss,
    wgan_g_loss,
)

from oracles import chamfer_scan, fd_relative_error

D64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=D64)


def test_chamfer_loss_matches_scan(rng):
    a, b = rng.normal(size=(3, 40, 3)), rng.normal(size=(3, 55, 3))
    expected = np.mean([chamfer_scan(x.tolist(), y.tolist()) for x, y in zip(a, b)])
    assert float(chamfer_loss(t(a), t(b))) == pytest.approx(expected, rel=1e-12)


def test_chamfer_loss_identity_exact(rng):
    x = t(rng.normal(size=(2, 64, 3)))
    assert float(chamfer_loss(x, x)) == 0.0


def test_degrade_mask_matches_geometry(rng):
    pred, part = rng.normal(size=(4, 200, 3)), rng.normal(size=(4, 60, 3))
    mask = degrade_mask(t(pred), t(part), 5)
    for i in range(4):
        assert np.flatnonzero(mask[i].numpy()).tolist() == degrade_indices(pred[i], part[i], 5).tolist()


def test_degrade_mask_ties_use_lower_index():
    pred = t([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [9, 9, 9]])
    mask = degrade_mask(pred, t([[0.0, 0, 0]]), 2)
    assert mask[0].tolist() == [True, True, False, False, False]


def test_reconstruction_perfect():
    P = t([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    C_hat = torch.cat([P, t([[10.0, 10, 10], [-10, 5, 3]])])
    assert float(reconstruction_loss(P, P.clone(), C_hat, 1)) == 0.0


def test_reconstruction_hand_value():
    val = reconstruction_loss(t([[0.0, 0, 0]]), t([[1.0, 0, 0]]), t([[0.5, 0, 0]]), 1)
    assert float(val) == pytest.approx(2.5, abs=1e-15)


def test_reconstruction_gradient(rng):
    P = t(rng.normal(size=(2, 12, 3)))
    err = fd_relative_error(lambda ph, ch: reconstruction_loss(P, ph, ch, 3),
                            [t(rng.normal(size=(2, 10, 3))), t(rng.normal(size=(2, 20, 3)))])
    assert err < 1e-4


def test_smooth_l1_values():
    assert float(smooth_l1(t([1.0, 2.0]), t([1.0, 2.0]))) == 0.0
    assert float(smooth_l1(t([0.5]), t([0.0]))) == 0.125
    assert float(smooth_l1(t([3.0]), t([0.0]))) == 2.5
    with pytest.raises(InvalidArgument):
        smooth_l1(t([1.0]), t([1.0, 2.0]))


def test_smooth_l1_gradient(rng):
    err = fd_relative_error(smooth_l1, [t(rng.normal(size=(4, 96)) * 2), t(rng.normal(size=(4, 96)))])
    assert err < 1e-4


def test_npair_closed_values():
    v = t([0.3, -0.2, 0.7])
    assert float(npair_loss(v, v, [v])) == pytest.approx(math.log(2), abs=1e-12)
    val = npair_loss(t([1.0, 1.0]), t([1.0, 1.0]), [t([0.0, 0.0])])
    assert float(val) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert float(val) == pytest.approx(0.126928, abs=1e-6)
    with pytest.raises(InvalidArgument):
        npair_loss(v, v, [])


def test_npair_gradient_d96(rng):
    err = fd_relative_error(lambda a, p, n: npair_loss(a, p, n),
                            [t(rng.normal(size=96) * 0.3), t(rng.normal(size=96) * 0.3), t(rng.normal(size=(3, 96)) * 0.3)])
    assert err < 1e-4


def _naive_npair(a, p, negs):
    return math.log1p(sum(math.exp(np.dot(a, n) - np.dot(a, p)) for n in negs))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n_neg=st.integers(1, 4), scale=st.floats(0.01, 3.0))
def test_npair_stable_matches_naive_and_positive(seed, n_neg, scale):
    r = np.random.default_rng(seed)
    a, p = r.normal(size=96) * scale, r.normal(size=96) * scale
    negs = r.normal(size=(n_neg, 96)) * scale
    val = float(npair_loss(t(a), t(p), t(negs)))
    assert val > 0
    try:
        naive = _naive_npair(a, p, negs)
    except OverflowError:
        return
    assert val == pytest.approx(naive, rel=1e-9, abs=1e-300)


def test_npair_no_overflow_and_decay():
    a = t([10.0] * 96)
    big = float(npair_loss(a, t([-10.0] * 96), [t([10.0] * 96)]))
    assert math.isfinite(big) and big == pytest.approx(2 * 9600.0, rel=1e-12)
    values = [float(npair_loss(t([1.0]), t([m]), [t([0.0])])) for m in (1, 5, 10, 20, 40)]
    assert all(v > 0 for v in values)
    assert values == sorted(values, reverse=True)
    assert values[-1] < 1e-15


def test_ranking_all_equal():
    o = t([0.4, 0.6, 0.5])
    assert float(ranking_loss(o, o, o)) == pytest.approx(math.log(3) + 2 * math.log(2), abs=1e-12)


def test_ranking_scalar_hand_value():
    o, o1, o2 = 0.9, 0.5, 0.1
    expected = (math.log(1 + math.exp(o1 - o) + math.exp(o2 - o))
                + math.log(1 + math.exp(o * o2 - o * o1))
                + math.log(1 + math.exp(o2 * o - o2 * o1)))
    assert float(ranking_loss(t([o]), t([o1]), t([o2]))) == pytest.approx(expected, abs=1e-12)


def test_ranking_monotone_sweep():
    o, o1 = t([0.9]), t([0.5])
    first = lambda s: float(npair_loss(torch.ones(1, dtype=D64), o, [o1, s]))  # noqa: E731
    second = lambda s: float(npair_loss(o, o1, [s]))  # noqa: E731
    sweep = [t([v]) for v in (0.45, 0.35, 0.25, 0.15, 0.05, 0.001)]
    for term in (first, second):
        vals = [term(s) for s in sweep]
        assert all(b < a for a, b in zip(vals, vals[1:]))


def test_ranking_permutation_invariant(rng):
    o, o1, o2 = (t(rng.uniform(size=96)) for _ in range(3))
    perm = torch.from_numpy(rng.permutation(96))
    assert float(ranking_loss(o[perm], o1[perm], o2[perm])) == pytest.approx(float(ranking_loss(o, o1, o2)), rel=1e-12)


def test_ranking_gradient(rng):
    codes = [t(rng.uniform(0.05, 0.95, size=(2, 96))) for _ in range(3)]
    assert fd_relative_error(ranking_loss, codes) < 1e-4


def test_triplet_equal_codes_give_three_delta():
    o = t([0.5, 0.5])
    assert float(triplet_rank_loss(o, o, o, 5.0)) == pytest.approx(15.0)
    with pytest.raises(InvalidArgument):
        triplet_rank_loss(o, o, o, 0.0)


def test_triplet_inactive_is_zero():
    assert float(triplet_rank_loss(t([1.0]), t([0.5]), t([0.0]), 0.1)) == 0.0


def test_triplet_hand_value():
    val = triplet_rank_loss(t([0.9]), t([0.5]), t([0.1]), 0.3)
    d = lambda x, y: (x - y) ** 2  # noqa: E731
    expected = (max(0, d(1, .9) - d(1, .5) + .3) + max(0, d(1, .9) - d(1, .1) + .3)) / 2
    expected += max(0, d(.9, .5) - d(.9, .1) + .3) + max(0, d(.1, .5) - d(.1, .9) + .3)
    assert float(val) == pytest.approx(expected, abs=1e-12)


def test_triplet_gradient(rng):
    codes = [t(rng.uniform(0.0, 1.0, size=(3, 8))) for _ in range(3)]
    assert fd_relative_error(lambda a, b, c: triplet_rank_loss(a, b, c, 5.0), codes) < 1e-4


def test_wgan_d_values():
    assert float(wgan_d_loss(t([0.3]), t([0.3]), t([1.0]), 1.0)) == 0.0
    assert float(wgan_d_loss(t([0.2]), t([0.5]), t([2.0]), 1.0)) == pytest.approx(0.7)
    with pytest.raises(InvalidArgument):
        wgan_d_loss(t([0.0]), t([0.0]), t([1.0]), -1.0)


def test_linear_discriminator_grad_norm(rng):
    w = t(rng.normal(size=12))
    disc = lambda x: x @ w  # noqa: E731
    x = t(rng.normal(size=(5, 12)))
    norms = input_grad_norm(disc, x)
    np.testing.assert_allclose(norms.detach().numpy(), float(w.norm()))
    loss = wgan_d_loss(disc(x), disc(x + 1), norms, 1.0)
    expected = float(disc(x).mean() - disc(x + 1).mean()) + (float(w.norm()) - 1) ** 2
    assert float(loss) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("mode", ["fake", "interpolate"])
def test_wgan_d_gradient_both_modes(rng, mode):
    w1 = t(rng.normal(size=(6, 4)) * 0.5)
    w2 = t(rng.normal(size=4))
    fake, real = t(rng.normal(size=(3, 6))), t(rng.normal(size=(3, 6)))

    def loss(a, b):
        disc = lambda x: torch.tanh(x @ a) @ b  # noqa: E731
        gen = torch.Generator().manual_seed(0)
        gn = gradient_penalty_norms(disc, fake, real, mode, gen)
        return wgan_d_loss(disc(fake), disc(real), gn, 1.0)

    assert fd_relative_error(loss, [w1, w2]) < 1e-4


def test_wgan_g():
    assert float(wgan_g_loss(t([0.0]))) == 0.0
    assert float(wgan_g_loss(t([1.0, 3.0]))) == -2.0
    base = t([0.1, -0.4, 2.0])
    assert float(wgan_g_loss(base + 0.5)) < float(wgan_g_loss(base))


def test_total_losses():
    zero = total_losses({}, 100.0, 10.0)
    assert zero.total_g == 0.0 and zero.total_d == 0.0
    cfg = TrainConfig()
    assert (cfg.gamma, cfg.beta, cfg.lambda_gp) == (100.0, 10.0, 1.0)
    lb = total_losses({"rec": 1.0, "z_equal": 1.0}, cfg.gamma, cfg.beta)
    assert lb.total_g == 110.0
    with pytest.raises(NumericError, match="npair"):
        total_losses({"npair": float("nan")}, 100.0, 10.0)
    with pytest.raises(InvalidArgument):
        total_losses({"bogus": 1.0}, 100.0, 10.0)


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.floats(-1e3, 1e3), min_size=8, max_size=8))
def test_total_losses_recompute(vals):
    parts = dict(zip(LossBreakdown.COMPONENTS, vals))
    lb = total_losses(parts, 100.0, 10.0)
    assert lb.total_g == (100.0 * lb.rec + 100.0 * lb.swap + 10.0 * lb.z_equal + lb.npair + lb.g_point + lb.g_code)
    assert lb.total_d == lb.d_point + lb.d_code
