import math

import mpmath
import numpy as np
import pytest
from conftest import random_instance
from hypothesis import given, settings
from hypothesis import strategies as st

from scpo_lab.model import NULL_IMAGE, Context, PolicyTable
from scpo_lab.objectives import (
    Hyperparams,
    LossBreakdown,
    PairBatch,
    PreferencePair,
    bt_probability,
    cco_loss,
    contradict_loss,
    cso_loss,
    dpo_loss,
    image_loss,
    margin,
    margin_grad_factor,
    match_loss,
    neg_log_sigmoid,
    population_dpo_loss_and_grad,
    scpo_grad,
    scpo_loss,
    softplus,
    text_loss,
)

LN2 = math.log(2)


def test_pair_validation():
    with pytest.raises(ValueError, match="image"):
        PreferencePair("p", "q", "i", "i", 0, 1)
    with pytest.raises(ValueError, match="response"):
        PreferencePair("p", "q", "i", "j", 0, 0)
    p = PreferencePair("p", "q", "i", "j", 0, 1)
    assert p.swapped().swapped() == p
    assert p.contexts() == (Context("i", "q"), Context("j", "q"), Context(NULL_IMAGE, "q"))


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        Hyperparams(beta=0.0)
    with pytest.raises(ValueError):
        Hyperparams(lam=-1.0)
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=-1.0)
    assert Hyperparams().replace(lam=0.5).lam == 0.5


@settings(max_examples=200)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_neg_log_sigmoid_extended_precision(z):
    mpmath.mp.dps = 60
    want = float(mpmath.log1p(mpmath.exp(-mpmath.mpf(z))))
    got = neg_log_sigmoid(z)
    assert math.isfinite(got)
    assert got == pytest.approx(want, rel=1e-13, abs=1e-300)
    assert float(softplus(-z)) == pytest.approx(want, rel=1e-13, abs=1e-300)


def test_bt_probability():
    assert bt_probability(1.0, 1.0) == 0.5
    assert bt_probability(2.0, 0.0) == pytest.approx(1 / (1 + math.exp(-2)))
    assert bt_probability(1e4, 0.0) == 1.0


def test_zero_margins_at_reference():
    rng = np.random.default_rng(0)
    pi, _, pair = random_instance(rng)
    ref = pi.copy()
    assert dpo_loss(pi, ref, pair.contexts()[0], pair.chosen_response, pair.rejected_response, 0.1) == pytest.approx(LN2, abs=1e-15)
    lt, li, cco = cco_loss(pi, ref, pair, 0.1)
    assert (lt, li, cco) == pytest.approx((LN2, LN2, 2 * LN2), abs=1e-15)
    parts = cso_loss(pi, ref, pair, 0.1, 0.1)
    assert parts == pytest.approx((LN2,) * 4 + (4 * LN2,), abs=1e-15)
    bd = scpo_loss(pi, ref, pair, Hyperparams(lam=0.2))
    assert bd.l_total == pytest.approx(2.8 * LN2, abs=1e-12)
    assert np.allclose(scpo_grad(pi, ref, pair, Hyperparams()).sum(axis=1), 0.0, atol=1e-15)


def test_hand_computed_losses():
    # one context row moved off a uniform reference by hand
    ctx = [Context("w", "q"), Context("l", "q"), Context(NULL_IMAGE, "q")]
    ref = PolicyTable.uniform(ctx, [0, 1])
    pi = PolicyTable(ctx, [0, 1], np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]))
    pair = PreferencePair("p", "q", "w", "l", 0, 1)
    # (I_w): log pi(0) - log pi(1) = 1, reference margin 0
    assert margin(pi, ref, ctx[0], 0, 1) == pytest.approx(1.0)
    beta = 0.5
    assert dpo_loss(pi, ref, ctx[0], 0, 1, beta) == pytest.approx(math.log1p(math.exp(-0.5)))
    # match (I_w, y_w): logratio(w, 0) - logratio(null, 0)
    lr_w0 = -math.log1p(math.exp(-1.0)) + math.log(2)
    assert match_loss(pi, ref, "w", 0, "q", beta) == pytest.approx(math.log1p(math.exp(-beta * lr_w0)))
    # contradict (I_w, y_l): logratio(null, 1) - logratio(w, 1)
    lr_w1 = -math.log1p(math.exp(1.0)) + math.log(2)
    assert contradict_loss(pi, ref, "w", 1, "q", beta) == pytest.approx(math.log1p(math.exp(beta * lr_w1)))


def test_breakdown_composition():
    bd = LossBreakdown.compose(1.0, 2.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    assert bd.l_cco == 3.0
    assert bd.l_cso == pytest.approx(1.0)
    assert bd.l_total == pytest.approx(3.5)
    assert set(bd.as_dict()) >= {"l_text", "l_image", "l_cco", "l_cso", "l_total"}


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_cso_is_swap_symmetric(seed):
    pi, ref, pair = random_instance(np.random.default_rng(seed))
    a = cso_loss(pi, ref, pair, 0.1, 0.2)
    b = cso_loss(pi, ref, pair.swapped(), 0.1, 0.2)
    # swapping exchanges match_w <-> match_l and contradict_l <-> contradict_w
    assert b[0] == pytest.approx(a[2]) and b[2] == pytest.approx(a[0])
    assert b[1] == pytest.approx(a[3]) and b[3] == pytest.approx(a[1])
    assert b[4] == pytest.approx(a[4], rel=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_gradient_rows_sum_to_zero(seed):
    pi, ref, pair = random_instance(np.random.default_rng(seed))
    g = scpo_grad(pi, ref, pair, Hyperparams(lam=0.7))
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-14)


def test_lambda_zero_drops_symmetry_terms():
    pi, ref, pair = random_instance(np.random.default_rng(5))
    hp = Hyperparams(lam=0.0)
    g = scpo_grad(pi, ref, pair, hp)
    # only the text-only row is untouched without the symmetry terms
    assert np.all(g[pi.context_index(pair.contexts()[2])] == 0)
    assert scpo_loss(pi, ref, pair, hp).l_total == pytest.approx(cco_loss(pi, ref, pair, 0.1)[2])


def _pairs_and_tables(rng, n_pairs=6, n_vocab=4):
    pairs, contexts = [], {}
    for k in range(n_pairs):
        yw, yl = rng.choice(n_vocab, 2, replace=False).tolist()
        p = PreferencePair(f"p{k}", f"q{k % 3}", f"w{k}", f"l{k}", yw, yl)
        pairs.append(p)
        for c in p.contexts():
            contexts.setdefault(c, None)
    ctx = list(contexts)
    vocab = list(range(n_vocab))
    pi = PolicyTable(ctx, vocab, rng.standard_normal((len(ctx), n_vocab)))
    ref = PolicyTable(ctx, vocab, rng.standard_normal((len(ctx), n_vocab)))
    return pairs, pi, ref


def test_batch_matches_scalar_definitions():
    rng = np.random.default_rng(7)
    pairs, pi, ref = _pairs_and_tables(rng)
    hp = Hyperparams(beta=0.3, beta1=0.2, beta2=0.4, lam=0.6)
    batch = PairBatch(pi, pairs)
    got = batch.loss(pi, ref, hp)
    want = [scpo_loss(pi, ref, p, hp) for p in pairs]
    for name in ("l_text", "l_image", "l_match_w", "l_contradict_l", "l_total"):
        assert getattr(got, name) == pytest.approx(np.mean([getattr(w, name) for w in want]), rel=1e-13)
    _, g = batch.loss_and_grad(pi, ref, hp)
    np.testing.assert_allclose(g, np.mean([scpo_grad(pi, ref, p, hp) for p in pairs], axis=0), atol=1e-15)
    sub = batch.subset(np.array([4, 1]))
    assert sub.loss(pi, ref, hp).l_total == pytest.approx((want[4].l_total + want[1].l_total) / 2, rel=1e-13)
    with pytest.raises(ValueError):
        batch.subset(np.array([], dtype=int)).loss(pi, ref, hp)


def test_population_gradient_finite_difference():
    rng = np.random.default_rng(8)
    ctx = [Context("a", "q"), Context(NULL_IMAGE, "q")]
    pi = PolicyTable(ctx, [0, 1, 2], rng.standard_normal((2, 3)))
    ref = PolicyTable(ctx, [0, 1, 2], rng.standard_normal((2, 3)))
    rows, ya, yb = np.array([0, 0, 1, 1]), np.array([0, 2, 1, 0]), np.array([1, 1, 2, 2])
    w = rng.uniform(0.1, 1.0, 4)
    _, g = population_dpo_loss_and_grad(pi, ref, rows, ya, yb, w, 0.7)
    fd = np.zeros_like(g)
    h = 1e-6
    for idx in np.ndindex(*g.shape):
        up, dn = pi.logits.copy(), pi.logits.copy()
        up[idx] += h
        dn[idx] -= h
        lu, _ = population_dpo_loss_and_grad(PolicyTable(ctx, [0, 1, 2], up), ref, rows, ya, yb, w, 0.7)
        ld, _ = population_dpo_loss_and_grad(PolicyTable(ctx, [0, 1, 2], dn), ref, rows, ya, yb, w, 0.7)
        fd[idx] = (lu - ld) / (2 * h)
    np.testing.assert_allclose(g, fd, atol=1e-9)


@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(0.01, 5.0))
def test_margin_factor_bounds(m, beta):
    f = margin_grad_factor(m, beta)
    assert -beta <= f <= 0.0
    assert margin_grad_factor(m + 1.0, beta) >= f


def test_dpo_asymptotes():
    ctx = [Context("w", "q")]
    ref = PolicyTable.uniform(ctx, [0, 1])
    for m, want in ((500.0, 0.0), (-500.0, 50.0)):
        pi = PolicyTable(ctx, [0, 1], np.array([[m, 0.0]]))
        got = dpo_loss(pi, ref, ctx[0], 0, 1, 0.1)
        assert got == pytest.approx(want, abs=1e-20 if want == 0 else 1e-12)


def _logratio(pi, ref, c, y):
    return pi.row_log_probs(c)[pi.response_index(y)] - ref.row_log_probs(c)[ref.response_index(y)]


def test_component_losses_match_dpo_substitutions():
    rng = np.random.default_rng(21)
    for _ in range(100):
        pi, ref, p = random_instance(rng)
        c_w, c_l, c_0 = p.contexts()
        yw, yl = p.chosen_response, p.rejected_response
        assert text_loss(pi, ref, p, 0.3) == dpo_loss(pi, ref, c_w, yw, yl, 0.3)
        image_margin = _logratio(pi, ref, c_w, yw) - _logratio(pi, ref, c_l, yw)
        assert image_loss(pi, ref, p, 0.3) == pytest.approx(neg_log_sigmoid(0.3 * image_margin), rel=1e-13)
        match_margin = _logratio(pi, ref, c_w, yw) - _logratio(pi, ref, c_0, yw)
        assert match_loss(pi, ref, "iw", yw, "q", 0.2) == pytest.approx(neg_log_sigmoid(0.2 * match_margin), rel=1e-13)
        contra_margin = _logratio(pi, ref, c_0, yw) - _logratio(pi, ref, c_l, yw)
        assert contradict_loss(pi, ref, "il", yw, "q", 0.2) == pytest.approx(
            neg_log_sigmoid(0.2 * contra_margin), rel=1e-13)
        lt, li, total = cco_loss(pi, ref, p, 0.3)
        assert total == lt + li and total >= 0
        # swapping the images negates the image margin
        swapped = image_loss(pi, ref, PreferencePair("s", "q", "il", "iw", yw, yl), 0.3)
        assert image_loss(pi, ref, p, 0.3) + swapped >= 2 * LN2 - 1e-15


def test_match_contradict_bound():
    rng = np.random.default_rng(22)
    for _ in range(50):
        pi, ref, p = random_instance(rng)
        total = match_loss(pi, ref, "iw", p.chosen_response, "q", 0.2) + contradict_loss(pi, ref, "iw", p.chosen_response, "q", 0.2)
        assert total >= 2 * LN2 - 1e-15


def test_monotone_in_chosen_logit():
    pi, ref, p = random_instance(np.random.default_rng(23))
    i, j = pi.context_index(p.contexts()[0]), pi.response_index(p.chosen_response)
    prev = text_loss(pi, ref, p, 0.1)
    for _ in range(5):
        logits = pi.logits.copy()
        logits[i, j] += 0.5
        pi.logits = logits
        cur = text_loss(pi, ref, p, 0.1)
        assert cur < prev
        prev = cur


def test_lambda_one_total_is_sum():
    pi, ref, p = random_instance(np.random.default_rng(24))
    bd = scpo_loss(pi, ref, p, Hyperparams(lam=1.0))
    assert bd.l_total == bd.l_cco + bd.l_cso


def test_reference_point_gradient():
    pi, _, p = random_instance(np.random.default_rng(25))
    ref = pi.copy()
    beta = 0.1
    g = PairBatch(pi, [p]).loss_and_grad(pi, ref, Hyperparams(beta=beta, lam=0.0))[1]
    # at zero margins each active term contributes -beta/2 * d(margin)/d(logits)
    probs = pi.probs()
    i_w, i_l = pi.context_index(p.contexts()[0]), pi.context_index(p.contexts()[1])
    yw, yl = pi.response_index(p.chosen_response), pi.response_index(p.rejected_response)
    want = np.zeros_like(g)
    want[i_w, yw] += -beta / 2 * 2  # text and image margins both raise log pi(y_w | I_w)
    want[i_w, yl] -= -beta / 2
    want[i_l, yw] -= -beta / 2
    # softmax coupling: subtract the row coefficient sum times the row probabilities
    want[i_w] -= want[i_w].sum() * probs[i_w]
    want[i_l] -= want[i_l].sum() * probs[i_l]
    np.testing.assert_allclose(g, want, atol=1e-15)
