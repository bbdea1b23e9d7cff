import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphid import numerics as nm
from sphid import quantizer as qz
from sphid.errors import ConfigurationError


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)
    return np.max(np.abs(a - b)) / denom


def make_codebooks(rng, level_sizes, d):
    return [nm.parameter(rng.normal(size=(k, d))) for k in level_sizes]


GAMMA = nm.constant(30.0)


# --- cosine logits ---


def test_cosine_logits_parallel_row_scores_gamma():
    e = np.array([[0.6, 0.8], [1.0, 0.0]])
    s = qz.cosine_logits(np.array([1.2, 1.6]), nm.constant(e), GAMMA)
    assert abs(s.data[0] - 30.0) <= 1e-10
    assert s.data[1] < 30.0


def test_cosine_logits_orthogonal_and_antiparallel():
    e = np.array([[0.0, 1.0], [-1.0, 0.0]])
    s = qz.cosine_logits(np.array([2.0, 0.0]), nm.constant(e), GAMMA)
    np.testing.assert_allclose(s.data, [0.0, -30.0], atol=1e-10)


def test_cosine_logits_bounded():
    rng = np.random.default_rng(0)
    s = qz.cosine_logits(rng.normal(size=(5, 8)), nm.constant(rng.normal(size=(6, 8))), GAMMA)
    assert np.all(np.abs(s.data) <= 30.0 + 1e-9)


def test_cosine_logits_degenerate_raises():
    with pytest.raises(nm.DegenerateVectorError):
        qz.cosine_logits(np.zeros(4), nm.constant(np.eye(4)), GAMMA)


def test_dot_logits_norm_lever():
    e = np.array([[1.0, 0.0], [0.0, 1.0]])
    r = np.array([3.0, 0.0])
    s1 = qz.dot_logits(r, nm.constant(e))
    s2 = qz.dot_logits(r, nm.constant(2.0 * e))
    np.testing.assert_allclose(s2.data, 2.0 * s1.data)


# --- gumbel softmax ---


def test_gumbel_zero_noise_uniform_logits():
    p = qz.gumbel_softmax(np.zeros(8), tau=1.0, noise=np.zeros(8))
    np.testing.assert_allclose(p.data, np.full(8, 1 / 8), atol=1e-12)


def test_gumbel_zero_noise_two_class():
    p = qz.gumbel_softmax(np.array([1.0, 0.0]), tau=1.0, noise=np.zeros(2))
    sig = 1.0 / (1.0 + np.exp(-1.0))
    np.testing.assert_allclose(p.data, [sig, 1.0 - sig], atol=1e-12)


def test_gumbel_low_temperature_concentrates():
    # logits drawn from the quantizer's own regime: scaled cosines against a
    # k-means codebook over clustered points
    rng = np.random.default_rng(42)
    d, k = 16, 8
    centers = rng.normal(size=(k, d))
    pts = np.vstack([c + 0.25 * rng.normal(size=(40, d)) for c in centers])
    book = qz.kmeans_init(pts, [k], seed=1)[0]
    hits = 0
    for _ in range(1000):
        z = pts[rng.integers(len(pts))]
        logits = 30.0 * (z / np.linalg.norm(z)) @ book.T
        p = qz.gumbel_softmax(logits, tau=0.01, rng=rng)
        if p.data.max() >= 0.99:
            hits += 1
    assert hits >= 990


def test_gumbel_rejects_bad_tau():
    with pytest.raises(ConfigurationError):
        qz.gumbel_softmax(np.zeros(3), tau=0.0, noise=np.zeros(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 5.0))
def test_gumbel_output_on_simplex(seed, tau):
    rng = np.random.default_rng(seed)
    p = qz.gumbel_softmax(rng.normal(size=(3, 7)) * 10, tau=tau, rng=rng)
    assert np.all(p.data >= 0)
    np.testing.assert_allclose(p.data.sum(axis=1), np.ones(3), atol=1e-8)


# --- soft quantize ---


def test_soft_quantize_perfect_first_level():
    rng = np.random.default_rng(1)
    d = 8
    e = nm.l2_normalize(rng.normal(size=d))
    book = np.stack([e, -e, nm.l2_normalize(rng.normal(size=d))])
    books = [nm.parameter(book)]
    z = nm.constant(e[None, :])
    res = qz.soft_quantize(z, books, GAMMA, tau=0.01,
                           noise=[np.zeros((1, 3))])
    assert np.max(np.abs(res.soft_vectors[0].data[0] - e)) <= 1e-3
    assert np.max(np.abs(res.residuals[1].data)) <= 1e-3


def test_soft_quantize_gradient_reaches_base(seed=0):
    rng = np.random.default_rng(seed)
    d, sizes = 6, (4, 3)
    books = make_codebooks(rng, sizes, d)
    noise = [rng.gumbel(size=(2, k)) for k in sizes]
    x0 = rng.normal(size=2 * d)

    def build(x):
        z = nm.parameter(x.reshape(2, d))
        res = qz.soft_quantize(z, books, GAMMA, tau=0.7, noise=noise)
        total = nm.add(res.soft_vectors[0], res.soft_vectors[1])
        return z, nm.tsum(nm.mul(total, nm.constant(np.linspace(0.5, 1.5, 2 * d).reshape(2, d))))

    z, loss = build(x0)
    nm.backward(loss)
    assert np.linalg.norm(z.grad) > 1e-6
    fd = nm.finite_diff_grad(lambda x: float(build(x)[1].data), x0, h=1e-4)
    assert rel_err(z.grad.reshape(-1), fd) <= 1e-4


def test_sid_is_noise_invariant():
    rng = np.random.default_rng(2)
    d, sizes = 5, (4, 3)
    books = make_codebooks(rng, sizes, d)
    z = nm.constant(rng.normal(size=(4, d)))
    r1 = qz.soft_quantize(z, books, GAMMA, tau=1.0, rng=np.random.default_rng(10))
    r2 = qz.soft_quantize(z, books, GAMMA, tau=0.2, rng=np.random.default_rng(99))
    np.testing.assert_array_equal(r1.sid, r2.sid)


def test_probs_on_simplex_and_telescoping():
    rng = np.random.default_rng(3)
    d, sizes = 7, (5, 4, 3)
    books = make_codebooks(rng, sizes, d)
    z = nm.constant(rng.normal(size=(6, d)))
    res = qz.soft_quantize(z, books, GAMMA, tau=0.8, rng=rng)
    for p in res.probs:
        assert np.all(p.data >= 0)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-8)
    # left-to-right subtraction reproduces the last residual bit for bit
    acc = z.data.copy()
    for sv in res.soft_vectors:
        acc = acc - sv.data
    np.testing.assert_array_equal(acc, res.residuals[-1].data)


def test_degenerate_level_falls_back_to_uniform():
    d = 4
    e = np.zeros(d)
    e[0] = 1.0
    other = np.zeros(d)
    other[1] = 1.0
    books = [nm.constant(np.stack([e, -e])), nm.constant(np.stack([e, other]))]
    z = nm.constant(e[None, :])
    res = qz.soft_quantize(z, books, GAMMA, tau=0.001, noise=[np.zeros((1, 2))] * 2)
    assert res.degenerate_levels == 1
    np.testing.assert_allclose(res.probs[1].data[0], [0.5, 0.5], atol=1e-12)
    assert res.sid[0, 1] == 0


# --- hard assignment ---


def brute_force_sids(z, books):
    out = []
    for row in z:
        r = row.copy()
        codes = []
        for book in books:
            best, best_cos = 0, -np.inf
            rn = np.linalg.norm(r)
            for k, e in enumerate(book):
                c = 0.0 if rn < 1e-12 else (r @ e) / (rn * np.linalg.norm(e))
                if c > best_cos:
                    best, best_cos = k, c
            codes.append(best)
            r = r - book[best]
        out.append(codes)
    return np.array(out)


def test_hard_assign_matches_brute_force():
    rng = np.random.default_rng(4)
    books_np = [rng.normal(size=(4, 6)), rng.normal(size=(2, 6)), rng.normal(size=(2, 6))]
    z = rng.normal(size=(8, 6))
    got = qz.hard_assign(z, books_np)
    np.testing.assert_array_equal(got, brute_force_sids(z, books_np))


def test_hard_assign_deterministic_and_matches_soft_sid():
    rng = np.random.default_rng(5)
    books = make_codebooks(rng, (4, 3), 5)
    z = nm.constant(rng.normal(size=(3, 5)))
    codes = qz.hard_assign(z, books)
    np.testing.assert_array_equal(codes, qz.hard_assign(z, books))
    res = qz.soft_quantize(z, books, GAMMA, tau=0.5, rng=rng)
    np.testing.assert_array_equal(codes, res.sid)


def test_hard_assign_level1_scale_invariant():
    rng = np.random.default_rng(6)
    books = [rng.normal(size=(5, 4))]
    z = rng.normal(size=(10, 4))
    for alpha in (0.01, 3.0, 250.0):
        np.testing.assert_array_equal(
            qz.hard_assign(z, books)[:, 0], qz.hard_assign(alpha * z, books)[:, 0])


# --- straight-through variant ---


def test_ste_forward_is_hard():
    rng = np.random.default_rng(7)
    books = make_codebooks(rng, (4,), 5)
    z = nm.constant(rng.normal(size=(3, 5)))
    noise = [rng.gumbel(size=(3, 4))]
    res = qz.ste_quantize(z, books, GAMMA, tau=1.0, noise=noise)
    logits = res.logits[0].data + noise[0]
    picked = np.argmax(logits, axis=1)
    np.testing.assert_array_equal(res.soft_vectors[0].data, books[0].data[picked])


def test_ste_backward_is_nonzero():
    rng = np.random.default_rng(8)
    books = make_codebooks(rng, (4, 3), 5)
    z = nm.parameter(rng.normal(size=(2, 5)))
    res = qz.ste_quantize(z, books, GAMMA, tau=1.0, rng=rng)
    loss = nm.tsum(nm.add(res.soft_vectors[0], res.soft_vectors[1]))
    nm.backward(loss)
    assert np.linalg.norm(z.grad) > 1e-8


# --- k-means ---


def test_kmeans_separated_points():
    pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    cents, assign, inertia = qz.kmeans(pts, 4, rng=np.random.default_rng(0))
    assert inertia <= 1e-12
    assert sorted(map(tuple, np.round(cents, 9))) == sorted(map(tuple, pts))


def test_kmeans_init_k1_is_normalized_mean():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(20, 3)) + 2.0
    books = qz.kmeans_init(pts, [1], seed=0)
    np.testing.assert_allclose(books[0][0], nm.l2_normalize(pts.mean(axis=0)), atol=1e-9)


def test_kmeans_fit_beats_random_subset_init():
    # oracle: inertia induced by an unrefined random subset of the points
    rng_data = np.random.default_rng(10)
    pts = rng_data.normal(size=(200, 16))
    for seed in range(5):
        _, _, fitted = qz.kmeans(pts, 8, rng=np.random.default_rng(seed), init="plusplus")
        r = np.random.default_rng(seed)
        cents = pts[r.choice(200, size=8, replace=False)]
        dists = ((pts[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        assert fitted <= dists.min(axis=1).sum()


def test_kmeans_too_few_points():
    with pytest.raises(ConfigurationError):
        qz.kmeans(np.zeros((3, 2)), 4)


def test_kmeans_init_deterministic_and_normalized():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(60, 8))
    b1 = qz.kmeans_init(pts, (8, 4), seed=5)
    b2 = qz.kmeans_init(pts, (8, 4), seed=5)
    for a, b in zip(b1, b2):
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-10)
