import numpy as np
import pytest

from sphid import corpus as cp
from sphid import gradcheck as gc
from sphid import model as md
from sphid import numerics as nm
from sphid import objective as ob
from sphid import quantizer as qz
from sphid.errors import ConfigurationError, DivergenceError


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6)
    return np.max(np.abs(a - b)) / denom


# --- ntp ---


def test_ntp_uniform_logits():
    logits = [nm.constant(np.zeros((3, 4))), nm.constant(np.zeros((3, 2))),
              nm.constant(np.zeros((3, 2)))]
    sid = np.zeros((3, 3), dtype=int)
    loss = ob.ntp_loss(logits, sid)
    assert abs(float(loss.data) - (np.log(4) + 2 * np.log(2))) <= 1e-12


def test_ntp_confident_logits_near_zero():
    big = np.full((2, 4), -1e3)
    big[:, 1] = 1e3
    loss = ob.ntp_loss([nm.constant(big)], np.full((2, 1), 1))
    assert float(loss.data) <= 1e-12


def test_ntp_matches_explicit_softmax_oracle():
    rng = np.random.default_rng(0)
    logits = [rng.normal(size=(5, 4)), rng.normal(size=(5, 3))]
    sid = np.stack([rng.integers(0, 4, size=5), rng.integers(0, 3, size=5)], axis=1)
    got = float(ob.ntp_loss([nm.constant(l) for l in logits], sid).data)
    expect = 0.0
    for i in range(5):
        for t, l in enumerate(logits):
            p = np.exp(l[i]) / np.exp(l[i]).sum()
            expect -= np.log(p[sid[i, t]])
    assert abs(got - expect / 5) <= 1e-10


# --- global reconstruction ---


def test_global_recon_parallel_and_antiparallel():
    z = nm.constant(np.array([[1.0, 0.0]]))
    par, _ = ob.global_recon_loss(z, [nm.constant(np.array([[2.5, 0.0]]))])
    anti, _ = ob.global_recon_loss(z, [nm.constant(np.array([[-0.3, 0.0]]))])
    assert abs(float(par.data)) <= 1e-12
    assert abs(float(anti.data) - 2.0) <= 1e-12


def test_global_recon_scale_free():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 6))
    for alpha in (0.2, 1.0, 7.0):
        loss, _ = ob.global_recon_loss(nm.constant(z), [nm.constant(alpha * z)])
        assert abs(float(loss.data)) <= 1e-12


def test_global_recon_skips_degenerate_rows():
    z = nm.constant(np.array([[1.0, 0.0], [0.0, 1.0]]))
    soft = nm.constant(np.array([[1.0, 0.0], [0.0, 0.0]]))
    loss, skipped = ob.global_recon_loss(z, [soft])
    assert skipped == 1
    assert abs(float(loss.data)) <= 1e-12  # only the healthy row counts


# --- local codebook loss ---


def test_local_loss_zero_at_exact_fit():
    r = np.array([[0.3, -0.4]])
    book = nm.parameter(np.array([[0.3, -0.4], [1.0, 0.0]]))
    loss = ob.local_codebook_loss([nm.constant(r)], [book], np.array([[0]]), beta=0.25)
    assert abs(float(loss.data)) <= 1e-15


def test_local_loss_gradients_split_by_stopgrad():
    rng = np.random.default_rng(2)
    r0 = rng.normal(size=(3, 4))
    book0 = rng.normal(size=(5, 4))
    sid = np.array([[1], [4], [1]])

    # codebook side: only term 1, gradient 2(e - r) per selection
    book = nm.parameter(book0.copy())
    r = nm.parameter(r0.copy())
    loss = ob.local_codebook_loss([r], [book], sid, beta=0.25)
    nm.backward(loss)
    expect = np.zeros_like(book0)
    for i, k in enumerate(sid[:, 0]):
        expect[k] += 2.0 * (book0[k] - r0[i]) / 3  # batch mean
    np.testing.assert_allclose(book.grad, expect, atol=1e-12)
    # residual side: only the beta term
    expect_r = np.stack([2.0 * 0.25 * (r0[i] - book0[k]) / 3 for i, k in enumerate(sid[:, 0])])
    np.testing.assert_allclose(r.grad, expect_r, atol=1e-12)


def test_local_loss_beta_zero_is_pure_attraction():
    rng = np.random.default_rng(3)
    r = nm.parameter(rng.normal(size=(2, 3)))
    book = nm.parameter(rng.normal(size=(4, 3)))
    loss = ob.local_codebook_loss([r], [book], np.array([[0], [2]]), beta=0.0)
    nm.backward(loss)
    assert r.grad is None or np.allclose(r.grad, 0.0)
    assert np.linalg.norm(book.grad) > 0


# --- infonce ---


def test_infonce_batch_of_one_is_zero():
    z = nm.constant(np.array([[1.0, 0.0]]))
    assert float(ob.infonce_loss(z, z, tau_cl=1.0).data) == 0.0


def test_infonce_orthogonal_negatives_closed_form():
    zq = nm.constant(np.eye(2))
    zb = nm.constant(np.eye(2))
    loss = ob.infonce_loss(zq, zb, tau_cl=1.0)
    expect = -np.log(np.e / (np.e + 1.0))
    assert abs(float(loss.data) - expect) <= 1e-12
    assert abs(expect - 0.3133) <= 1e-4


def test_infonce_matches_brute_force():
    rng = np.random.default_rng(4)
    zq = rng.normal(size=(6, 5))
    zq /= np.linalg.norm(zq, axis=1, keepdims=True)
    zb = rng.normal(size=(6, 5))
    zb /= np.linalg.norm(zb, axis=1, keepdims=True)
    got = float(ob.infonce_loss(nm.constant(zq), nm.constant(zb), tau_cl=0.07).data)
    expect = 0.0
    for i in range(6):
        s = zq[i] @ zb.T / 0.07
        expect -= np.log(np.exp(s[i]) / np.exp(s).sum())
    assert abs(got - expect / 6) <= 1e-9


def test_infonce_rejects_empty_and_unnormalized():
    with pytest.raises(ConfigurationError):
        ob.infonce_loss(nm.constant(np.zeros((0, 3))), nm.constant(np.zeros((0, 3))), 1.0)
    with pytest.raises(ValueError):
        ob.infonce_loss(nm.constant(np.ones((2, 3))), nm.constant(np.ones((2, 3))), 1.0)


# --- diversity ---


def test_diversity_uniform_usage_is_neg_log_k():
    probs = [nm.constant(np.full((4, 8), 1 / 8)), nm.constant(np.full((4, 4), 1 / 4))]
    loss = ob.diversity_loss(probs, eps=1e-10)
    assert abs(float(loss.data) - (-(np.log(8) + np.log(4)))) <= 1e-8


def test_diversity_collapse_is_penalized():
    collapsed = np.zeros((4, 8))
    collapsed[:, 3] = 1.0
    got = float(ob.diversity_loss([nm.constant(collapsed)], eps=1e-10).data)
    uniform = float(ob.diversity_loss([nm.constant(np.full((4, 8), 1 / 8))], eps=1e-10).data)
    assert abs(got) <= 1e-8
    assert got > uniform


def test_diversity_matches_direct_summation():
    rng = np.random.default_rng(5)
    p = rng.dirichlet(np.ones(6), size=5)
    got = float(ob.diversity_loss([nm.constant(p)], eps=1e-10).data)
    p_bar = p.mean(axis=0)
    expect = np.sum(p_bar * np.log(p_bar + 1e-10))
    assert abs(got - expect) <= 1e-12


# --- total ---


def test_total_loss_weighting():
    terms = tuple(nm.constant(float(v)) for v in (1.0, 2.0, 3.0, 4.0, 5.0))
    assert float(ob.total_loss(terms, (0, 0, 0, 0, 0)).data) == 0.0
    assert float(ob.total_loss(terms, (1, 0, 0, 0, 0)).data) == 1.0
    assert float(ob.total_loss(terms, (1, 1, 1, 1, 1)).data) == 15.0
    with pytest.raises(ConfigurationError):
        ob.total_loss(terms, (1, 1, 1, 1, -1))


# --- schedules ---


def test_tau_schedule_endpoints_and_midpoint():
    assert ob.anneal_tau(0, 100) == 1.0
    assert abs(ob.anneal_tau(100, 100) - 0.1) <= 1e-12
    assert abs(ob.anneal_tau(50, 100) - np.sqrt(0.1)) <= 1e-12
    taus = [ob.anneal_tau(s, 10) for s in range(11)]
    assert all(a > b for a, b in zip(taus, taus[1:]))
    with pytest.raises(ConfigurationError):
        ob.anneal_tau(5, 4)


def test_lr_schedule():
    assert ob.lr_at(1000, 2.0, 1000, 4000) == 2.0
    assert ob.lr_at(500, 2.0, 1000, 4000) == 1.0
    assert ob.lr_at(4000, 2.0, 1000, 4000) == 0.0
    assert ob.lr_at(2500, 2.0, 1000, 4000) == 1.0


# --- end-to-end gradient correctness of every term ---


def tiny_setup(seed, batch=4, dim=8, sizes=(4, 3), vocab=20):
    rng = np.random.default_rng(seed)
    params = md.init_params(dim, sizes, vocab, rng)
    items = [cp.ItemRecord(i, list(rng.integers(0, vocab, size=3))) for i in range(8)]
    inters = [cp.Interaction(t, list(rng.integers(0, vocab, size=3)),
                             [int(rng.integers(0, 8))], int(rng.integers(0, 8)))
              for t in range(batch)]
    tokens = {it.item_id: it.tokens for it in items}
    noise = [qz.sample_gumbel(rng, (batch, k)) for k in sizes]
    return params, inters, tokens, noise


def test_every_term_and_total_match_finite_differences():
    config = ob.TrainConfig(dim=8, level_sizes=(4, 3), vocab_size=20).validate()
    params, inters, tokens, noise = tiny_setup(seed=7)
    worst = gc.check_term_gradients(params, inters, tokens, 0.8, config, noise,
                                    probes_per_tensor=5, rng=np.random.default_rng(100))
    assert worst <= 1e-4


def test_frozen_closures_agree_with_live_graph():
    """gradcheck's frozen forms must reproduce the live gradients exactly."""
    config = ob.TrainConfig(dim=8, level_sizes=(4, 3), vocab_size=20).validate()
    params, inters, tokens, noise = tiny_setup(seed=13)

    terms, _ = ob.forward_batch(params, inters, tokens, 0.8, config, noise)
    nm.zero_grads(params.all_params())
    nm.backward(terms[2])  # the stop-gradient-bearing local term
    live = {n: (None if t.grad is None else t.grad.copy())
            for n, t in params.named_params().items()}

    closures, _ = gc.frozen_term_closures(params, inters, tokens, 0.8, config, noise)
    nm.zero_grads(params.all_params())
    nm.backward(closures["local"]())
    for name, tensor in params.named_params().items():
        a, b = live[name], tensor.grad
        if a is None and b is None:
            continue
        np.testing.assert_allclose(
            a if a is not None else np.zeros_like(tensor.data),
            b if b is not None else np.zeros_like(tensor.data), atol=1e-12)


def test_soft_path_reaches_item_encoder_detached_does_not():
    params, inters, tokens, noise = tiny_setup(seed=9)
    base = ob.TrainConfig(dim=8, level_sizes=(4, 3), vocab_size=20)

    for path, expect_nonzero in (("soft", True), ("detached", False)):
        config = ob.TrainConfig(**{**base.to_dict(), "gradient_path": path})
        config.validate()
        nm.zero_grads(params.all_params())
        terms, _ = ob.forward_batch(params, inters, tokens, 0.8, config, noise)
        nm.backward(terms[0])  # ntp only
        norm = ob.encoder_grad_norm(params)
        if expect_nonzero:
            assert norm > 1e-10
        else:
            assert norm == 0.0


# --- trainer ---


def toy_dataset(seed=0, n_items=30, n_inter=200):
    items, inters = cp.generate_corpus(n_items, 48, n_inter, 1.2, seed=seed)
    return items, inters


def smoke_config(**over):
    base = dict(dim=8, level_sizes=(8, 4), batch_size=16, epochs=4,
                lr_backbone=5e-3, lr_quantizer=5e-2, warmup_steps=10,
                kmeans_iterations=10, seed=1)
    base.update(over)
    return ob.TrainConfig(**base)


def test_train_smoke_loss_decreases():
    items, inters = toy_dataset()
    result = ob.train(smoke_config(), items, inters)
    first = np.mean([r.losses.ntp for r in result.trace[:5]])
    last = np.mean([r.losses.ntp for r in result.trace[-5:]])
    assert last < first


def test_train_deterministic():
    items, inters = toy_dataset()
    r1 = ob.train(smoke_config(epochs=2), items, inters)
    r2 = ob.train(smoke_config(epochs=2), items, inters)
    for a, b in zip(r1.trace, r2.trace):
        assert a.losses == b.losses and a.enc_grad_norm == b.enc_grad_norm
    for pa, pb in zip(r1.params.all_params(), r2.params.all_params()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_train_detached_ntp_never_reaches_encoder():
    items, inters = toy_dataset()
    config = smoke_config(epochs=1, gradient_path="detached",
                          loss_weights=(1.0, 0.0, 0.0, 0.0, 0.0))
    result = ob.train(config, items, inters)
    assert all(r.enc_grad_norm == 0.0 for r in result.trace)


def test_train_divergence_reports_step():
    items, inters = toy_dataset()
    config = smoke_config(epochs=2, lr_backbone=1e8, lr_quantizer=1e9,
                          warmup_steps=0, geometry="dot")
    with pytest.raises(DivergenceError) as err:
        ob.train(config, items, inters)
    assert err.value.step >= 0


# --- checkpoints and traces ---


def test_checkpoint_round_trip(tmp_path):
    items, inters = toy_dataset()
    result = ob.train(smoke_config(epochs=1), items, inters, out_dir=tmp_path)
    params, config, step = ob.load_checkpoint(result.checkpoint_path)
    assert step == len(result.trace)
    assert config.to_dict() == result.config.to_dict()
    for name, tensor in result.params.named_params().items():
        np.testing.assert_array_equal(tensor.data, params.named_params()[name].data)


def test_trace_csv_round_trip(tmp_path):
    items, inters = toy_dataset()
    result = ob.train(smoke_config(epochs=1), items, inters)
    path = ob.write_trace_csv(result.trace, tmp_path / "trace.csv")
    rows = ob.read_trace_csv(path)
    assert len(rows) == len(result.trace)
    assert rows[3]["ntp"] == result.trace[3].losses.ntp
    header = path.read_text().splitlines()[0]
    assert header == ob.TRACE_HEADER


def test_gradient_stability_window():
    flat = ob.gradient_stability(np.ones(50), window=10)
    assert np.all(flat == 0.0)
    noisy = ob.gradient_stability(np.r_[np.zeros(50), np.ones(50) * 5], window=10)
    assert noisy.max() > 0
