"""The compound training objective, schedules, trainer, and checkpoint I/O.

Five loss terms are combined as a weighted sum (all weights default to 1):
next-code prediction through the soft-teacher-forced decoder, cosine-distance
global reconstruction, the two-sided stop-gradient codebook loss, in-batch
InfoNCE alignment, and a negative-entropy code-usage regularizer.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import model as md
from . import numerics as nm
from . import quantizer as qz
from .errors import ConfigurationError, DivergenceError, ParseError

TERM_NAMES = ("ntp", "global", "local", "infonce", "div")
TRACE_HEADER = "step,tau,lr,ntp,global,local,infonce,div,total,enc_grad_norm"
GRADIENT_PATHS = ("soft", "ste", "detached")
GEOMETRIES = (md.COSINE, md.DOT)
SHARING_MODES = (md.SHARED, md.SEPARATE)


@dataclass
class TrainConfig:
    dim: int = 64
    level_sizes: tuple = (64, 32, 16)
    batch_size: int = 128
    epochs: int = 30
    lr_backbone: float = 1e-3
    lr_quantizer: float = 1e-2
    warmup_steps: int = 1000
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_cl: float = 0.07
    beta: float = 0.25
    eps: float = 1e-10
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    gradient_path: str = "soft"
    geometry: str = md.COSINE
    weight_sharing: str = md.SHARED
    diversity: str = "on"
    kmeans_iterations: int = 25
    vocab_size: int | None = None
    seed: int = 0

    def validate(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ConfigurationError("need tau_start >= tau_end > 0")
        if self.lr_backbone <= 0 or self.lr_quantizer <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.tau_cl <= 0 or self.beta < 0:
            raise ConfigurationError("tau_cl must be positive, beta nonnegative")
        if len(self.loss_weights) != 5 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError("need 5 nonnegative loss weights")
        if self.gradient_path not in GRADIENT_PATHS:
            raise ConfigurationError(f"gradient_path must be one of {GRADIENT_PATHS}")
        if self.geometry not in GEOMETRIES:
            raise ConfigurationError(f"geometry must be one of {GEOMETRIES}")
        if self.weight_sharing not in SHARING_MODES:
            raise ConfigurationError(f"weight_sharing must be one of {SHARING_MODES}")
        if self.diversity not in ("on", "off"):
            raise ConfigurationError("diversity must be 'on' or 'off'")
        if any(k < 2 for k in self.level_sizes):
            raise ConfigurationError("every level size must be at least 2")
        return self

    def effective_weights(self):
        w = list(self.loss_weights)
        if self.diversity == "off":
            w[4] = 0.0
        return tuple(w)

    def to_dict(self):
        d = asdict(self)
        d["level_sizes"] = list(self.level_sizes)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "level_sizes" in d:
            d["level_sizes"] = tuple(d["level_sizes"])
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


@dataclass
class LossBreakdown:
    ntp: float
    global_recon: float
    local_codebook: float
    infonce: float
    diversity: float
    total: float

    def as_row(self):
        return [self.ntp, self.global_recon, self.local_codebook,
                self.infonce, self.diversity, self.total]


@dataclass
class TraceRecord:
    step: int
    tau: float
    lr_backbone: float
    lr_quantizer: float
    losses: LossBreakdown
    enc_grad_norm: float
    usage: list = field(default_factory=list)  # per level: code-count histogram


@dataclass
class TrainResult:
    params: md.ModelParams
    config: TrainConfig
    trace: list
    checkpoint_path: Path | None = None
    degenerate_levels: int = 0


# --- loss terms ---


def ntp_loss(level_logits, sid):
    """Mean over the batch of summed per-level cross-entropies."""
    total = None
    for t, logits in enumerate(level_logits):
        picked = nm.select_per_row(nm.log_softmax(logits), sid[:, t])
        total = picked if total is None else nm.add(total, picked)
    return nm.neg(nm.tmean(total))


def global_recon_loss(z_base, soft_vectors):
    """Batch-mean cosine distance between z_base and the summed soft vectors.

    Rows whose soft sum is degenerate are skipped and counted, not averaged.
    """
    total = soft_vectors[0]
    for sv in soft_vectors[1:]:
        total = nm.add(total, sv)
    norms = np.linalg.norm(total.data, axis=1)
    mask = norms < nm.DEGENERATE_NORM
    n_keep = int((~mask).sum())
    if n_keep == 0:
        return nm.constant(0.0), int(mask.sum())
    if mask.any():
        safe = np.zeros_like(total.data)
        safe[:, 0] = 1.0
        total = nm.where_rows(mask, safe, total)
    cos = nm.sum_axis(nm.mul(nm.normalize(total), nm.normalize(z_base)), axis=1)
    one_minus = nm.sub(nm.constant(np.ones(cos.data.shape[0])), cos)
    keep = (~mask).astype(np.float64)
    loss = nm.mul(nm.tsum(nm.mul(one_minus, nm.constant(keep))), nm.constant(1.0 / n_keep))
    return loss, int(mask.sum())


def local_codebook_loss(residuals, codebooks, sid, beta):
    """Two-sided quantization loss with stop-gradients.

    The first term moves only the selected codebook rows toward the (frozen)
    residual; the beta-weighted term moves only the residual path toward the
    (frozen) rows.
    """
    per_sample = None
    for j, book in enumerate(codebooks):
        r_prev = residuals[j]
        rows = nm.gather_rows(book, sid[:, j])
        d1 = nm.sub(nm.stopgrad(r_prev), rows)
        d2 = nm.sub(r_prev, nm.stopgrad(rows))
        term = nm.add(nm.sum_axis(nm.mul(d1, d1), axis=1),
                      nm.mul(nm.constant(beta), nm.sum_axis(nm.mul(d2, d2), axis=1)))
        per_sample = term if per_sample is None else nm.add(per_sample, term)
    return nm.tmean(per_sample)


def infonce_loss(zq_hat, zb_hat, tau_cl):
    """In-batch contrastive alignment; positives sit on the diagonal."""
    n = zq_hat.data.shape[0]
    if n == 0:
        raise ConfigurationError("infonce needs a non-empty batch")
    for z in (zq_hat, zb_hat):
        dev = np.abs(np.linalg.norm(z.data, axis=1) - 1.0)
        # non-finite rows fall through to the trainer's divergence check
        if np.any(np.isfinite(dev) & (dev > 1e-6)):
            raise ValueError("infonce inputs must be unit-normalized")
    scores = nm.mul(nm.matmul(zq_hat, nm.transpose(zb_hat)), nm.constant(1.0 / tau_cl))
    return nm.neg(nm.tmean(nm.select_per_row(nm.log_softmax(scores), np.arange(n))))


def diversity_loss(level_probs, eps=1e-10):
    """Negative entropy of batch-mean code usage, summed over levels."""
    total = None
    for p in level_probs:
        p_bar = nm.mean_axis(p, axis=0)
        term = nm.tsum(nm.mul(p_bar, nm.log(nm.add(p_bar, nm.constant(eps)))))
        total = term if total is None else nm.add(total, term)
    return total


def total_loss(terms, weights):
    """Weighted sum in the fixed term order; zero-weight terms are skipped."""
    if len(terms) != 5 or len(weights) != 5:
        raise ConfigurationError("expected 5 terms and 5 weights")
    if any(w < 0 for w in weights):
        raise ConfigurationError("loss weights must be nonnegative")
    total = None
    for term, w in zip(terms, weights):
        if w == 0:
            continue
        piece = term if w == 1 else nm.mul(nm.constant(float(w)), term)
        total = piece if total is None else nm.add(total, piece)
    if total is None:
        total = nm.constant(0.0)
    return total


# --- schedules ---


def anneal_tau(step, total_steps, tau_start=1.0, tau_end=0.1):
    """Exponential interpolation from tau_start at step 0 to tau_end at the end."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ConfigurationError("need 0 <= step <= total_steps, total_steps > 0")
    if not tau_start >= tau_end > 0:
        raise ConfigurationError("need tau_start >= tau_end > 0")
    return tau_start * (tau_end / tau_start) ** (step / total_steps)


def lr_at(step, base_lr, warmup_steps, total_steps):
    """Linear ramp to base_lr over the warmup, then linear decay to 0."""
    if step < 0:
        raise ConfigurationError("step must be nonnegative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = max(total_steps - warmup_steps, 1)
    return base_lr * (total_steps - step) / span


# --- one training step's forward graph ---


def forward_batch(params, batch, item_tokens, tau, config, noise):
    """Build the full loss graph for one batch of interactions.

    Returns (terms, aux) where terms is the 5-tuple of loss Tensors in
    canonical order and aux carries sids, probs, and diagnostics.
    """
    z_base, z_q = md.encode_batch_shared(params, batch, item_tokens)
    quantize = qz.ste_quantize if config.gradient_path == "ste" else qz.soft_quantize
    qres = quantize(z_base, params.codebooks, params.gamma(), tau, noise=noise,
                    geometry=config.geometry)

    prior = nm.constant(np.zeros_like(z_q.data))
    level_logits = []
    for t in range(1, params.n_levels + 1):
        h_t = md.decode_step_batch(params, z_q, prior, t)
        level_logits.append(md.head_logits(params, h_t, t - 1, geometry=config.geometry))
        cond = qres.soft_vectors[t - 1]
        if config.gradient_path == "detached":
            cond = nm.stopgrad(cond)
        prior = nm.add(prior, cond)

    ntp = ntp_loss(level_logits, qres.sid)
    glob, skipped = global_recon_loss(z_base, qres.soft_vectors)
    local = local_codebook_loss(qres.residuals, params.codebooks, qres.sid, config.beta)
    nce = infonce_loss(z_q, nm.normalize(z_base), config.tau_cl)
    div = diversity_loss(qres.probs, config.eps)

    aux = {"sid": qres.sid, "probs": qres.probs,
           "degenerate_levels": qres.degenerate_levels, "skipped_recon": skipped}
    return (ntp, glob, local, nce, div), aux


# --- trainer ---


def _usage_histograms(sid, level_sizes):
    return [np.bincount(sid[:, j], minlength=k) for j, k in enumerate(level_sizes)]


def encoder_grad_norm(params):
    sq = 0.0
    for p in params.item_encoder_params():
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return math.sqrt(sq)


def train(config, items, interactions, out_dir=None):
    """Mini-batch gradient descent with per-group learning rates.

    Fully deterministic per (config, data). Raises DivergenceError with the
    offending step when any loss term goes non-finite.
    """
    config.validate()
    if not interactions:
        raise ConfigurationError("training set is empty")
    top_token = max(max(i.tokens) for i in items)
    for inter in interactions:
        top_token = max(top_token, max(inter.query))
    vocab = config.vocab_size or top_token + 1
    if top_token >= vocab:
        raise ConfigurationError(f"token id {top_token} outside vocabulary {vocab}")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[2])
    noise_rng = np.random.default_rng(seeds[3])

    params = md.init_params(config.dim, config.level_sizes, vocab, init_rng)
    base = md.encode_item_batch(params, [it.tokens for it in items]).data
    params.set_codebooks(qz.kmeans_init(base, config.level_sizes,
                                        iterations=config.kmeans_iterations,
                                        seed=seeds[1]))
    if config.weight_sharing == md.SEPARATE:
        params.clone_decoder_heads()

    item_tokens = {it.item_id: it.tokens for it in items}
    n = len(interactions)
    bs = min(config.batch_size, n)
    n_batches = (n + bs - 1) // bs
    total_steps = config.epochs * n_batches
    weights = config.effective_weights()
    backbone = params.backbone_params()
    quant_group = params.quantizer_params()
    every = params.all_params()

    trace = []
    degenerate = 0
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for b in range(n_batches):
            batch = [interactions[i] for i in order[b * bs:(b + 1) * bs]]
            tau = anneal_tau(step, total_steps, config.tau_start, config.tau_end)
            lr_b = lr_at(step, config.lr_backbone, config.warmup_steps, total_steps)
            lr_q = lr_at(step, config.lr_quantizer, config.warmup_steps, total_steps)
            noise = [qz.sample_gumbel(noise_rng, (len(batch), k))
                     for k in config.level_sizes]

            nm.zero_grads(every)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                terms, aux = forward_batch(params, batch, item_tokens, tau, config, noise)
                total = total_loss(terms, weights)
                values = [float(t.data) for t in terms] + [float(total.data)]
                if not all(np.isfinite(values)):
                    raise DivergenceError(step)
                nm.backward(total)

            degenerate += aux["degenerate_levels"]
            trace.append(TraceRecord(
                step=step, tau=tau, lr_backbone=lr_b, lr_quantizer=lr_q,
                losses=LossBreakdown(*values),
                enc_grad_norm=encoder_grad_norm(params),
                usage=_usage_histograms(aux["sid"], config.level_sizes)))

            for p in backbone:
                if p.grad is not None:
                    p.data -= lr_b * p.grad
            for p in quant_group:
                if p.grad is not None:
                    p.data -= lr_q * p.grad
            step += 1

    result = TrainResult(params, config, trace, degenerate_levels=degenerate)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out_dir / "model.ckpt"
        save_checkpoint(params, config, step, result.checkpoint_path)
        write_trace_csv(trace, out_dir / "trace.csv")
    return result


# --- trace CSV ---


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(TRACE_HEADER + "\n")
        for rec in trace:
            row = [rec.step, rec.tau, rec.lr_backbone] + rec.losses.as_row() + [rec.enc_grad_norm]
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    return path


def read_trace_csv(path):
    """Parse a trace CSV into a list of dict rows (floats except step)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = TRACE_HEADER.split(",")
        if reader.fieldnames != expected:
            raise ParseError(f"{path}:1: expected header {TRACE_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                parsed = {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad trace row") from exc
            rows.append(parsed)
    return rows


def gradient_stability(values, window=100):
    """Sliding-window standard deviations of a gradient-norm series."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigurationError("empty trace")
    w = min(window, values.size)
    return np.array([values[max(0, i - w + 1):i + 1].std() for i in range(values.size)])


# --- checkpoint container: JSON header + raw little-endian float64 payload ---

MAGIC = b"SPHIDCKPT1\n"


def save_checkpoint(params, config, step, path):
    named = params.named_params()
    names = sorted(named)
    header = {
        "config": config.to_dict(),
        "step": int(step),
        "vocab_size": int(params.vocab_size),
        "tensors": [{"name": n, "shape": list(named[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(named[n].data, dtype="<f8").tobytes())
    return Path(path)


def load_checkpoint(path):
    """Rebuild (params, config, step) from a checkpoint file."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ParseError(f"{path}:1: not a checkpoint file")
        (hlen,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
        params = md.init_params(config.dim, config.level_sizes,
                                header["vocab_size"], np.random.default_rng(0))
        if config.weight_sharing == md.SEPARATE:
            params.clone_decoder_heads()
        named = params.named_params()
        for spec in header["tensors"]:
            name, shape = spec["name"], tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            if name not in named:
                raise ParseError(f"{path}: unknown tensor {name!r}")
            if named[name].data.shape != raw.shape:
                raise ParseError(f"{path}: shape mismatch for {name!r}")
            named[name].data = raw.astype(np.float64).copy()
    return params, config, header["step"]
