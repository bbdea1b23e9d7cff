"""Hierarchical residual quantization on the unit sphere.

Assignment scores are scaled cosines between the running residual and
codebook rows. Training uses a Gumbel-Softmax relaxation whose soft vectors
stay on the gradient tape; supervision codes always come from the
noise-free, temperature-free hard ladder that inference uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigurationError
from .numerics import DEGENERATE_NORM, Tensor

GAMMA_INIT = 30.0


@dataclass
class QuantizeResult:
    """Per-level outputs of one quantization pass over a batch."""

    logits: list          # per level: (B, K_j) Tensor, noise-free scores
    probs: list           # per level: (B, K_j) Tensor on the simplex
    soft_vectors: list    # per level: (B, d) Tensor
    residuals: list       # r_0 .. r_m, each (B, d) Tensor
    sid: np.ndarray       # (B, m) int codes from the hard ladder
    degenerate_levels: int = 0


def _as_batch(z):
    z = nm.as_tensor(z)
    if z.data.ndim == 1:
        raise ValueError("quantizer expects a (batch, dim) matrix; stack single vectors")
    return z


def sample_gumbel(rng, shape):
    u = np.clip(rng.random(size=shape), 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def cosine_logits(residual, codebook, gamma):
    """Scaled cosine scores gamma * <r_hat, e_hat_k> for every codebook row.

    Raises DegenerateVectorError when a residual row has (near-)zero norm;
    soft_quantize pre-masks such rows instead of calling this.
    """
    residual = nm.as_tensor(residual)
    codebook = nm.as_tensor(codebook)
    r_hat = nm.normalize(residual)
    e_hat = nm.normalize(codebook)
    if r_hat.data.ndim == 1:
        return nm.mul(gamma, nm.matmul(e_hat, r_hat))
    return nm.mul(gamma, nm.matmul(r_hat, nm.transpose(e_hat)))


def dot_logits(residual, codebook):
    """Unnormalized inner-product scores; the norm-sensitive baseline."""
    residual = nm.as_tensor(residual)
    codebook = nm.as_tensor(codebook)
    if residual.data.ndim == 1:
        return nm.matmul(codebook, residual)
    return nm.matmul(residual, nm.transpose(codebook))


def gumbel_softmax(logits, tau, rng=None, noise=None):
    """Temperature-scaled softmax over noised logits, differentiable in logits.

    The noise is treated as a constant; pass `noise` explicitly for
    reproducible finite-difference checks, or an rng to draw fresh noise.
    """
    if tau <= 0:
        raise ConfigurationError("temperature must be positive")
    logits = nm.as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ValueError("provide either noise or an rng")
        noise = sample_gumbel(rng, logits.data.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != logits.data.shape:
        raise ValueError("noise shape must match logits")
    return nm.softmax(nm.mul(nm.add(logits, nm.constant(noise)), nm.constant(1.0 / tau)))


def _degenerate_mask(data):
    return np.linalg.norm(data, axis=1) < DEGENERATE_NORM


def _safe_rows(shape):
    safe = np.zeros(shape)
    safe[:, 0] = 1.0
    return safe


def hard_assign(z_base, codebooks, gamma=None, geometry="cosine"):
    """Noise-free, temperature-free per-level argmax with hard residuals.

    Pure numpy; never on the gradient tape. Degenerate residual rows fall
    back to code 0 (the uniform-probability argmax). Returns (B, m) codes.
    """
    z = z_base.data if isinstance(z_base, Tensor) else np.asarray(z_base, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    books = [c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
             for c in codebooks]
    residual = z.copy()
    codes = np.zeros((z.shape[0], len(books)), dtype=np.int64)
    for j, book in enumerate(books):
        norms = np.linalg.norm(residual, axis=1)
        mask = norms < DEGENERATE_NORM
        if geometry == "cosine":
            safe_norms = np.where(mask, 1.0, norms)
            r_hat = residual / safe_norms[:, None]
            e_hat = book / np.linalg.norm(book, axis=1, keepdims=True)
            scores = r_hat @ e_hat.T
        else:
            scores = residual @ book.T
        level_codes = np.argmax(scores, axis=1)
        level_codes[mask] = 0
        codes[:, j] = level_codes
        residual = residual - book[level_codes]
    return codes


def _soft_pass(z_base, codebooks, gamma, tau, rng, noise, hard_forward, geometry):
    z = _as_batch(z_base)
    batch = z.data.shape[0]
    if np.any(np.linalg.norm(z.data, axis=1) < DEGENERATE_NORM):
        raise nm.DegenerateVectorError("base embedding has (near-)zero norm")
    if noise is not None and len(noise) != len(codebooks):
        raise ValueError("need one noise array per level")

    sid = hard_assign(z, codebooks, geometry=geometry)
    logits_per_level, probs_per_level, soft_per_level = [], [], []
    residuals = [z]
    degenerate = 0
    residual = z
    for j, book in enumerate(codebooks):
        k = book.data.shape[0]
        mask = _degenerate_mask(residual.data)
        if mask.any():
            degenerate += int(mask.sum())
            residual_in = nm.where_rows(mask, _safe_rows(residual.data.shape), residual)
        else:
            residual_in = residual
        if geometry == "cosine":
            logits = cosine_logits(residual_in, book, gamma)
        else:
            logits = dot_logits(residual_in, book)
        level_noise = noise[j] if noise is not None else sample_gumbel(rng, (batch, k))
        probs = gumbel_softmax(logits, tau, noise=level_noise)
        if mask.any():
            probs = nm.where_rows(mask, np.full((batch, k), 1.0 / k), probs)
        if hard_forward:
            # Hard one-hot forward, soft Jacobian backward (straight-through).
            hard_idx = np.argmax(logits.data + level_noise, axis=1)
            onehot = np.zeros((batch, k))
            onehot[np.arange(batch), hard_idx] = 1.0
            selection = nm.add(nm.constant(onehot - probs.data), probs)
        else:
            selection = probs
        soft_vec = nm.matmul(selection, book)
        residual = nm.sub(residual, soft_vec)
        logits_per_level.append(logits)
        probs_per_level.append(probs)
        soft_per_level.append(soft_vec)
        residuals.append(residual)
    return QuantizeResult(logits_per_level, probs_per_level, soft_per_level,
                          residuals, sid, degenerate)


def soft_quantize(z_base, codebooks, gamma, tau, rng=None, noise=None, geometry="cosine"):
    """Relaxed quantization: expected code vectors stay on the gradient path."""
    return _soft_pass(z_base, codebooks, gamma, tau, rng, noise,
                      hard_forward=False, geometry=geometry)


def ste_quantize(z_base, codebooks, gamma, tau, rng=None, noise=None, geometry="cosine"):
    """Straight-through variant: hard code vectors forward, soft gradients back."""
    return _soft_pass(z_base, codebooks, gamma, tau, rng, noise,
                      hard_forward=True, geometry=geometry)


# --- K-means initialization ---


def kmeans(points, k, iterations=25, rng=None, init="plusplus"):
    """Lloyd's algorithm with plusplus or random-subset seeding.

    Empty clusters re-seed from the point farthest from its assigned
    centroid. Returns (centroids, assignments, inertia).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ConfigurationError(f"k-means needs at least {k} points, got {n}")
    if rng is None:
        rng = np.random.default_rng(0)

    if init == "plusplus":
        centroids = [points[int(rng.integers(n))]]
        d2 = np.sum((points - centroids[0]) ** 2, axis=1)
        for _ in range(k - 1):
            total = d2.sum()
            if total <= 0:
                idx = int(rng.integers(n))
            else:
                idx = int(rng.choice(n, p=d2 / total))
            centroids.append(points[idx])
            d2 = np.minimum(d2, np.sum((points - centroids[-1]) ** 2, axis=1))
        centroids = np.array(centroids)
    elif init == "random":
        centroids = points[rng.choice(n, size=k, replace=False)].copy()
    else:
        raise ConfigurationError(f"unknown init {init!r}")

    assign = None
    for _ in range(max(1, iterations)):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        point_d2 = dists[np.arange(n), new_assign]
        for j in range(k):
            members = new_assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                centroids[j] = points[far]
                new_assign[far] = j
                point_d2[far] = 0.0
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign

    dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = dists.argmin(axis=1)
    inertia = float(dists[np.arange(n), assign].sum())
    return centroids, assign, inertia


def kmeans_init(base_embeddings, level_sizes, iterations=25, seed=0):
    """Fit one codebook per level on the hard-assignment residual ladder.

    Level 1 clusters the base embeddings; level j clusters the residuals
    left by level j-1. Centroids are L2-normalized after fitting.
    """
    rng = np.random.default_rng(seed)
    residual = np.asarray(base_embeddings, dtype=np.float64).copy()
    books = []
    for k in level_sizes:
        centroids, _, _ = kmeans(residual, k, iterations=iterations, rng=rng)
        norms = np.linalg.norm(centroids, axis=1, keepdims=True)
        if np.any(norms < DEGENERATE_NORM):
            raise nm.DegenerateVectorError("k-means produced a zero centroid")
        centroids = centroids / norms
        books.append(centroids)
        codes = hard_assign(residual, [centroids])[:, 0]
        residual = residual - centroids[codes]
    return books
