import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oclttt import autodiff as ad
from oclttt.autodiff import Tensor
from oclttt.errors import ContractError, ShapeError
from oclttt.gradcheck import check_gradients
from oclttt.loss import (FLIPPED, ORIGINAL, PairSampling, PredictionMap, cosine_sim, entropy_loss,
                         mean_offdiag_similarity, negative_loss, ocl_total, ocl_unweighted, positive_loss,
                         reference_cl, verify_temperature_limit)

ALL = PairSampling(stride=1)


def pmap(rows, tag=ORIGINAL):
    """(1, W, C) prediction map from a list of C-vectors."""
    return PredictionMap(Tensor(np.asarray(rows, dtype=float)[None]), tag)


def random_map(rng, h=6, w=5, c=4, sharp=2.0):
    logits = rng.normal(0, sharp, (h, w, c))
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


# -- brute-force oracles ----------------------------------------------------

def cos(p, q):
    return float(np.dot(p, q) / (np.linalg.norm(p) * np.linalg.norm(q)))


def brute_positive(a, b):
    h, w, _ = a.shape
    return -np.mean([cos(a[i, j], b[i, j]) for i in range(h) for j in range(w)])


def brute_negative(a, b, stride):
    def one(m):
        pts = m[::stride, ::stride].reshape(-1, m.shape[-1])
        n = len(pts)
        return np.mean([cos(pts[i], pts[j]) for i in range(n) for j in range(n) if i != j])
    return 0.5 * (one(a) + one(b))


def brute_cl(points, pos, tau):
    n = len(points)
    s = np.array([[cos(points[i], points[j]) for j in range(n)] for i in range(n)])
    terms = []
    for i in range(n):
        denom = sum(math.exp(s[i, k] / tau) for k in range(n) if k != i)
        for j in pos[i]:
            terms.append(-math.log(math.exp(s[i, j] / tau) / denom))
    return float(np.mean(terms))


def brute_ocl(points, pos):
    n = len(points)
    s = np.array([[cos(points[i], points[j]) for j in range(n)] for i in range(n)])
    pos_term = np.mean([s[i, j] for i in range(n) for j in pos[i]])
    neg_term = np.mean([s[i, k] for i in range(n) for k in range(n) if k != i])
    return -pos_term + neg_term


# -- cosine similarity -------------------------------------------------------

@pytest.mark.parametrize("p,q,expected", [
    ([1, 0], [1, 0], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([0.6, 0.8], [0.8, 0.6], 0.96),
])
def test_cosine_examples(p, q, expected):
    assert cosine_sim(Tensor(p), Tensor(q)).item() == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(ContractError):
        cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=3, max_size=3), st.lists(st.floats(0.01, 10), min_size=3, max_size=3))
def test_cosine_symmetric_and_bounded(p, q):
    a = cosine_sim(Tensor(p), Tensor(q)).item()
    b = cosine_sim(Tensor(q), Tensor(p)).item()
    assert a == pytest.approx(b, abs=1e-15)
    assert -1.0 - 1e-12 <= a <= 1.0 + 1e-12


# -- positive / negative / total ----------------------------------------------

def test_positive_examples():
    v = pmap([[1, 0], [1, 0]])
    assert positive_loss(v, v, ALL).item() == pytest.approx(-1.0)
    assert positive_loss(pmap([[1, 0], [0, 1]]), pmap([[0, 1], [1, 0]]), ALL).item() == pytest.approx(0.0)
    assert positive_loss(pmap([[1, 0], [1, 0]]), pmap([[1, 0], [0, 1]]), ALL).item() == pytest.approx(-0.5)


def test_positive_realigns_flipped_view():
    rng = np.random.default_rng(0)
    a = random_map(rng)
    flipped = PredictionMap(Tensor(a[:, ::-1].copy()), FLIPPED)
    assert positive_loss(PredictionMap(Tensor(a)), flipped, ALL).item() == pytest.approx(-1.0)


def test_positive_shape_mismatch():
    with pytest.raises(ShapeError):
        positive_loss(pmap([[1, 0], [1, 0]]), pmap([[1, 0], [1, 0], [1, 0]]), ALL)


def test_negative_examples():
    same = pmap([[0.3, 0.7]] * 4)
    assert negative_loss(same, same, ALL).item() == pytest.approx(1.0)
    onehot = pmap(np.eye(3))
    assert negative_loss(onehot, onehot, ALL).item() == pytest.approx(0.0)
    two = pmap([[1, 0], [0, 1]])
    assert negative_loss(two, two, ALL).item() == pytest.approx(0.0)


def test_negative_needs_two_points():
    one = pmap([[1.0, 0.0]])
    with pytest.raises(ContractError):
        negative_loss(one, one, ALL)


def test_total_examples():
    degenerate = pmap([[1, 0]] * 3)
    assert ocl_total(degenerate, degenerate, 3.0, 1.0, ALL).item() == pytest.approx(-2.0)
    rng = np.random.default_rng(5)
    v1, v2 = PredictionMap(Tensor(random_map(rng))), PredictionMap(Tensor(random_map(rng)))
    assert ocl_total(v1, v2, 0.0, 0.0, ALL).item() == 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a, b = random_map(rng, 8, 8), random_map(rng, 8, 8)
        s = PairSampling(stride=3)
        got = ocl_total(PredictionMap(Tensor(a)), PredictionMap(Tensor(b)), 3.0, 1.0, s).item()
        assert got == pytest.approx(3.0 * brute_positive(a, b) + brute_negative(a, b, 3), abs=1e-12)


def test_sample_count():
    assert PairSampling(8).count(64, 64) == 64
    assert PairSampling(8).count(65, 60) == 9 * 8
    pts = PairSampling(8).take(Tensor(np.ones((65, 60, 3))))
    assert pts.shape == (72, 3)


@pytest.mark.parametrize("seed", range(10))
def test_view_swap_and_bounds(seed):
    rng = np.random.default_rng(seed)
    a, b = random_map(rng), random_map(rng)
    v1, v2 = PredictionMap(Tensor(a)), PredictionMap(Tensor(b))
    s = PairSampling(2)
    lp, lp_sw = positive_loss(v1, v2, s).item(), positive_loss(v2, v1, s).item()
    ln, ln_sw = negative_loss(v1, v2, s).item(), negative_loss(v2, v1, s).item()
    assert abs(lp - lp_sw) <= 1e-12 and abs(ln - ln_sw) <= 1e-12
    assert -1 <= lp <= 1 and -1 <= ln <= 1


@pytest.mark.parametrize("seed", range(10))
def test_ocl_gradient_wrt_logits(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(0, 1.5, (2, 6, 6, 4)), requires_grad=True)

    def f():
        p = ad.softmax(logits, axis=-1)
        return ocl_total(PredictionMap(p[0]), PredictionMap(p[1], FLIPPED), 3.0, 1.0, PairSampling(2))
    assert check_gradients(f, [logits]) < 1e-4


def test_offdiag_mean_matches_unordered_pairs():
    rng = np.random.default_rng(2)
    pts = rng.random((7, 3))
    pairs = [cos(pts[i], pts[j]) for i in range(7) for j in range(i + 1, 7)]
    assert mean_offdiag_similarity(Tensor(pts)).item() == pytest.approx(np.mean(pairs), abs=1e-14)


def test_negative_term_disperses():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(0, 0.3, (16, 4)), requires_grad=True)

    def sim():
        return mean_offdiag_similarity(ad.softmax(logits, axis=-1))
    before = sim().item()
    prev = before
    for _ in range(10):
        logits.grad = None
        ad.backward(sim())
        logits.data -= 0.5 * logits.grad
        now = sim().item()
        assert now < prev
        prev = now
    assert prev < before


# -- reference contrastive loss ------------------------------------------------

def test_reference_two_points_is_zero():
    pts = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert reference_cl(pts, {0: [1], 1: [0]}, 0.7).item() == pytest.approx(0.0, abs=1e-15)


def test_reference_matches_brute_force():
    rng = np.random.default_rng(11)
    pts = rng.random((10, 4))
    pos = {i: [i ^ 1] for i in range(10)}
    for tau in (0.1, 1.0, 5.0):
        assert reference_cl(pts, pos, tau).item() == pytest.approx(brute_cl(pts, pos, tau), rel=1e-12)
    assert ocl_unweighted(pts, pos).item() == pytest.approx(brute_ocl(pts, pos), abs=1e-14)


def test_reference_scale_invariant():
    rng = np.random.default_rng(3)
    pts = rng.random((8, 3))
    pos = {i: [(i + 4) % 8] for i in range(8)}
    base = reference_cl(pts, pos, 0.5).item()
    assert reference_cl(pts * 7.3, pos, 0.5).item() == pytest.approx(base, rel=1e-12)


def test_reference_rejects_bad_tau():
    with pytest.raises(ContractError):
        reference_cl(np.eye(3), {0: [1], 1: [0], 2: [0]}, 0.0)


def test_reference_high_tau_matches_ocl():
    rng = np.random.default_rng(16)
    pts = rng.random((16, 5))
    pos = {i: [i ^ 1] for i in range(16)}
    tau = 1e3
    lhs = tau * (brute_cl(pts, pos, tau) - math.log(15))
    assert abs(lhs - brute_ocl(pts, pos)) < 0.05


def test_reference_gradient():
    rng = np.random.default_rng(4)
    pts = Tensor(rng.random((6, 3)) + 0.1, requires_grad=True)
    pos = {i: [i ^ 1] for i in range(6)}
    assert check_gradients(lambda: reference_cl(pts, pos, 0.3), [pts]) < 1e-4


def test_temperature_limit_decreasing():
    rng = np.random.default_rng(21)
    pts = rng.dirichlet(np.ones(5) * 0.5, size=24)
    pos = {i: [i ^ 1] for i in range(24)}
    report = verify_temperature_limit(pts, pos)
    assert report.decreasing
    # truncation error ~ c / tau dominates: scaled residuals agree at the top of the schedule
    r3, r4 = report.residuals[2] * 1e3, report.residuals[3] * 1e4
    assert abs(r3 - r4) / r4 < 0.01
    assert report.residuals[-1] > 100 * report.noise_floor


def test_temperature_limit_degenerate():
    pts = np.tile([[0.2, 0.5, 0.3]], (6, 1))
    pos = {i: [i ^ 1] for i in range(6)}
    report = verify_temperature_limit(pts, pos)
    assert all(r < 1e-9 for r in report.residuals)


def test_schedule_must_increase():
    with pytest.raises(ContractError):
        verify_temperature_limit(np.eye(3), {0: [1], 1: [0], 2: [0]}, taus=(10, 1))


# -- entropy -------------------------------------------------------------------

def test_entropy_examples():
    assert entropy_loss(pmap(np.eye(3))).item() == 0.0
    assert entropy_loss(pmap([[0.25] * 4] * 2)).item() == pytest.approx(math.log(4))
    assert entropy_loss(pmap([[0.5, 0.5]])).item() == pytest.approx(0.6931, abs=1e-4)


@pytest.mark.parametrize("seed,n", [(0, 16), (1, 24), (2, 32), (3, 48), (4, 64)])
def test_temperature_limit_tolerance(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.dirichlet(np.ones(6) * 0.5, size=n)
    report = verify_temperature_limit(pts, {i: [i ^ 1] for i in range(n)})
    assert report.decreasing
    assert report.residuals[-1] < 1e-3 * abs(report.ocl_value)
