"""Finite-difference verification harness for the training objective.

The analytic gradients flow through stop-gradients and hard supervision
codes, so the difference oracle must hold those pieces fixed at the base
point: the codes are constants by definition, and a stop-gradient means
"treat this input as a constant". The closures here rebuild each loss term
from current parameter values with exactly those pieces frozen, which makes
central differences a valid oracle for the live gradients.
"""

from __future__ import annotations

import numpy as np

from . import model as md
from . import numerics as nm
from . import objective as ob
from . import quantizer as qz


def frozen_term_closures(params, batch, item_tokens, tau, config, noise):
    """Return ({name: closure}, aux) evaluating each term at current params.

    Closures recompute the forward pass from scratch, so mutating parameter
    data between calls (as the difference probe does) is reflected, while
    supervision codes and stop-gradient inputs stay pinned to the base point.
    """
    quantize = qz.ste_quantize if config.gradient_path == "ste" else qz.soft_quantize

    base, _ = md.encode_batch_shared(params, batch, item_tokens)
    qres0 = quantize(base, params.codebooks, params.gamma(), tau, noise=noise,
                     geometry=config.geometry)
    sid = qres0.sid.copy()
    frozen_residuals = [r.data.copy() for r in qres0.residuals[:-1]]
    frozen_rows = [params.codebooks[j].data[sid[:, j]].copy()
                   for j in range(params.n_levels)]

    def forward():
        z_base, z_q = md.encode_batch_shared(params, batch, item_tokens)
        qres = quantize(z_base, params.codebooks, params.gamma(), tau, noise=noise,
                        geometry=config.geometry)
        prior = nm.constant(np.zeros_like(z_q.data))
        logits = []
        for t in range(1, params.n_levels + 1):
            h_t = md.decode_step_batch(params, z_q, prior, t)
            logits.append(md.head_logits(params, h_t, t - 1, geometry=config.geometry))
            cond = qres.soft_vectors[t - 1]
            if config.gradient_path == "detached":
                cond = nm.stopgrad(cond)
            prior = nm.add(prior, cond)
        return z_base, qres, z_q, logits

    def frozen_local():
        _, qres, _, _ = forward()
        per_sample = None
        for j, book in enumerate(params.codebooks):
            rows = nm.gather_rows(book, sid[:, j])
            d1 = nm.sub(nm.constant(frozen_residuals[j]), rows)
            d2 = nm.sub(qres.residuals[j], nm.constant(frozen_rows[j]))
            term = nm.add(nm.sum_axis(nm.mul(d1, d1), axis=1),
                          nm.mul(nm.constant(config.beta), nm.sum_axis(nm.mul(d2, d2), axis=1)))
            per_sample = term if per_sample is None else nm.add(per_sample, term)
        return nm.tmean(per_sample)

    closures = {
        "ntp": lambda: ob.ntp_loss(forward()[3], sid),
        "global": lambda: _global(forward),
        "local": frozen_local,
        "infonce": lambda: _infonce(forward, config.tau_cl),
        "div": lambda: ob.diversity_loss(forward()[1].probs, config.eps),
    }

    def total():
        weights = config.effective_weights()
        terms = [closures[n]() for n in ob.TERM_NAMES]
        return ob.total_loss(terms, weights)

    closures["total"] = total
    return closures, {"sid": sid}


def _soft(forward):
    return forward()[1].soft_vectors


def _global(forward):
    z_base, qres, _, _ = forward()
    return ob.global_recon_loss(z_base, qres.soft_vectors)[0]


def _infonce(forward, tau_cl):
    z_base, _, z_q, _ = forward()
    return ob.infonce_loss(z_q, nm.normalize(z_base), tau_cl)


def fd_probe(tensor, value_fn, indices, h=1e-4):
    """Central differences of value_fn at selected flat indices of a tensor."""
    flat = tensor.data.reshape(-1)
    out = {}
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(value_fn().data)
        flat[idx] = orig - h
        down = float(value_fn().data)
        flat[idx] = orig
        out[idx] = (up - down) / (2.0 * h)
    return out


def check_term_gradients(params, batch, item_tokens, tau, config, noise,
                         probes_per_tensor=6, rng=None, h=1e-4):
    """Compare live gradients of every term (and the total) to differences.

    Returns the worst relative error found, over a sample of coordinates in
    each major parameter tensor.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    closures, _ = frozen_term_closures(params, batch, item_tokens, tau, config, noise)
    checked = {
        "token_embedding": params.token_embedding,
        "item_w1": params.item_mlp["w1"],
        "query_w1": params.query_mlp["w1"],
        "decoder_w2": params.decoder_mlp["w2"],
        "codebook0": params.codebooks[0],
        "step_embeddings": params.step_embeddings,
        "log_gamma": params.log_gamma,
    }
    worst = 0.0
    for name in list(ob.TERM_NAMES) + ["total"]:
        if name == "div" and config.diversity == "off":
            continue
        loss = closures[name]()
        nm.zero_grads(params.all_params())
        nm.backward(loss)
        grads = {k: (np.zeros_like(v.data) if v.grad is None else v.grad.copy())
                 for k, v in checked.items()}
        for key, tensor in checked.items():
            size = tensor.data.size
            idxs = rng.choice(size, size=min(probes_per_tensor, size), replace=False)
            fd = fd_probe(tensor, closures[name], idxs, h=h)
            for idx, est in fd.items():
                ad = grads[key].reshape(-1)[idx]
                err = abs(ad - est) / max(abs(ad), abs(est), 1e-6)
                worst = max(worst, err)
    return worst
