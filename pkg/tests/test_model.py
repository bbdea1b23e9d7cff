import numpy as np
import pytest

from sphid import model as md
from sphid import numerics as nm


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)
    return np.max(np.abs(a - b)) / denom


@pytest.fixture
def params():
    return md.init_params(dim=6, level_sizes=(4, 3), vocab_size=12,
                          rng=np.random.default_rng(0))


def test_encode_item_single_token(params):
    z = md.encode_item(params, [3])
    emb = params.token_embedding.data[3]
    expect = md._mlp_apply(params.item_mlp, nm.constant(emb))
    np.testing.assert_allclose(z.data, expect.data, atol=1e-12)


def test_encode_item_order_free(params):
    a = md.encode_item(params, [1, 5, 7])
    b = md.encode_item(params, [7, 1, 5])
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_encode_item_rejects_empty(params):
    with pytest.raises(ValueError):
        md.encode_item(params, [])


def test_encode_item_gradient_matches_fd(params):
    tokens = [2, 4, 4]
    w = np.linspace(-1, 1, 6)
    x0 = params.token_embedding.data.copy()

    def value(x):
        params.token_embedding.data = x
        out = float(nm.dot(md.encode_item(params, tokens), nm.constant(w)).data)
        params.token_embedding.data = x0
        return out

    loss = nm.dot(md.encode_item(params, tokens), nm.constant(w))
    nm.backward(loss)
    fd = nm.finite_diff_grad(value, x0.copy(), h=1e-4)
    assert rel_err(params.token_embedding.grad, fd) <= 1e-4


def test_encode_query_unit_norm(params):
    z = md.encode_query(params, [0, 1], [[2, 3], [4]])
    assert abs(np.linalg.norm(z.data) - 1.0) <= 1e-10
    z_empty = md.encode_query(params, [0, 1], [])
    assert abs(np.linalg.norm(z_empty.data) - 1.0) <= 1e-10


def test_encode_query_deterministic(params):
    a = md.encode_query(params, [5, 6], [[1]])
    b = md.encode_query(params, [5, 6], [[1]])
    np.testing.assert_array_equal(a.data, b.data)


def test_encode_query_rejects_empty(params):
    with pytest.raises(ValueError):
        md.encode_query(params, [], [])


def test_batch_paths_match_single(params):
    queries = [[0, 1], [2], [3, 4, 5]]
    histories = [[[1, 2]], [], [[3], [4, 5]]]
    zb = md.encode_query_batch(params, queries, histories)
    for i, (q, h) in enumerate(zip(queries, histories)):
        np.testing.assert_allclose(zb.data[i], md.encode_query(params, q, h).data, atol=1e-12)

    items = [[0], [1, 2], [3, 4]]
    zi = md.encode_item_batch(params, items)
    for i, t in enumerate(items):
        np.testing.assert_allclose(zi.data[i], md.encode_item(params, t).data, atol=1e-12)


def test_decode_step_contracts(params):
    zq = nm.constant(np.ones(6) / np.sqrt(6))
    h1 = md.decode_step(params, zq, [], 1)
    assert h1.data.shape == (6,)
    with pytest.raises(ValueError):
        md.decode_step(params, zq, [nm.constant(np.zeros(6))], 1)
    with pytest.raises(ValueError):
        md.decode_step(params, zq, [], 3)


def test_decode_step_deterministic_and_batch_consistent(params):
    rng = np.random.default_rng(1)
    zq = rng.normal(size=(3, 6))
    prior = rng.normal(size=(3, 6))
    hb = md.decode_step_batch(params, nm.constant(zq), nm.constant(prior), 2)
    for i in range(3):
        hs = md.decode_step(params, nm.constant(zq[i]), [nm.constant(prior[i])], 2)
        np.testing.assert_allclose(hb.data[i], hs.data, atol=1e-12)


def test_decoder_gradient_flows_from_prior(params):
    """Perturbing the level-1 code vector changes h_2, finite-difference correct."""
    rng = np.random.default_rng(2)
    zq = nm.constant(rng.normal(size=6))
    w = np.linspace(0.3, 1.0, 6)
    x0 = rng.normal(size=6)

    def build(x):
        v = nm.parameter(x)
        h2 = md.decode_step(params, zq, [v], 2)
        return v, nm.dot(h2, nm.constant(w))

    v, loss = build(x0)
    nm.backward(loss)
    assert np.linalg.norm(v.grad) > 1e-8
    fd = nm.finite_diff_grad(lambda x: float(build(x)[1].data), x0, h=1e-4)
    assert rel_err(v.grad, fd) <= 1e-4


def test_head_logits_weight_sharing_identity(params):
    rng = np.random.default_rng(3)
    h = nm.constant(rng.normal(size=6))
    before = md.head_logits(params, h, 0).data.copy()
    params.codebooks[0].data[2] *= -1.0  # mutate through the quantizer handle
    after = md.head_logits(params, h, 0).data
    assert before[2] == -after[2] if abs(before[2]) > 0 else True
    assert not np.array_equal(before, after)

    params.clone_decoder_heads()
    before = md.head_logits(params, h, 0).data.copy()
    params.codebooks[0].data[1] *= 2.0
    after = md.head_logits(params, h, 0).data
    np.testing.assert_array_equal(before, after)


def test_head_logits_row_alignment_and_bound(params):
    row = params.codebooks[1].data[2].copy()
    logits = md.head_logits(params, nm.constant(row), 1)
    gamma = params.gamma_value()
    assert abs(logits.data[2] - gamma) <= 1e-9
    assert logits.data.argmax() == 2
    assert np.all(np.abs(logits.data) <= gamma + 1e-9)


def test_dot_head_logits_norm_lever(params):
    rng = np.random.default_rng(4)
    h = nm.constant(rng.normal(size=6))
    base = md.dot_head_logits(params, h, 0).data.copy()
    params.codebooks[0].data[1] *= 2.0
    doubled = md.dot_head_logits(params, h, 0).data
    assert abs(doubled[1] - 2.0 * base[1]) <= 1e-12


def test_dot_head_logits_orthogonal_rows(params):
    h = np.zeros(6)
    h[0] = 1.0
    params.codebooks[0].data[:, 0] = 0.0
    out = md.dot_head_logits(params, nm.constant(h), 0)
    np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)
