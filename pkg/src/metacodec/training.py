"""Training: stage-1 generalization, meta fine-tuning with a latent-overfitting
inner loop, inference-time latent overfitting, and decoder-bias adaptation
(per-patch overfitting + k-means codebook).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from . import probmodel as pm
from .codec import (
    Codec,
    CodecConfig,
    get_bias_vector,
    importance_constraint,
    quantize_pair,
    substituted_biases,
)
from .metrics import ms_ssim


@dataclass
class LossWeights:
    lambda_d1: float = 1.0   # negative MS-SSIM
    lambda_d2: float = 10.0  # MSE
    lambda_d3: float = 0.0   # perceptual (disabled unless an extractor is plugged)
    lambda_r: float = 0.05   # rate, applied to bits/pixel
    lambda_m: float = 1.0    # importance-map constraint
    perceptual_extractor: object = None

    def __post_init__(self):
        for name in ("lambda_d1", "lambda_d2", "lambda_d3", "lambda_r", "lambda_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class MetaConfig:
    inner_iters_n: int = 4
    inner_lr_alpha: float = 0.1
    outer_lr_beta: float = 1e-4
    second_order: bool = True
    batch_size: int = 12

    def __post_init__(self):
        if self.inner_iters_n < 1:
            raise ValueError("inner_iters_n must be >= 1")
        # beta == 0 is allowed: a no-op outer update leaves checkpoints unchanged
        if self.inner_lr_alpha <= 0 or self.outer_lr_beta < 0:
            raise ValueError("learning rates must be positive")


class MetaDivergenceError(RuntimeError):
    pass


def perceptual_loss(x, xhat, extractor) -> torch.Tensor:
    """Sum of l1 feature differences over the extractor's layer list."""
    feats_x = extractor(x)
    feats_h = extractor(xhat)
    return sum((fx - fh).abs().mean() for fx, fh in zip(feats_x, feats_h))


def rd_loss(x, xhat, rate_bits_per_item, tau, w: LossWeights, zeta: float):
    """Weighted rate-distortion objective; returns (scalar, term dict).

    MS-SSIM enters negated; the rate term is bits/pixel so lambda_r is
    resolution-independent.
    """
    num_px = x.shape[-2] * x.shape[-1]
    zero = x.new_zeros(())
    d1 = -ms_ssim(xhat, x) if w.lambda_d1 > 0 else zero
    d2 = torch.mean((xhat - x) ** 2) if w.lambda_d2 > 0 else zero
    d3 = (
        perceptual_loss(x, xhat, w.perceptual_extractor)
        if w.lambda_d3 > 0 and w.perceptual_extractor is not None
        else zero
    )
    bpp = rate_bits_per_item.mean() / num_px if w.lambda_r > 0 else zero
    mterm = importance_constraint(tau, zeta) if w.lambda_m > 0 else zero
    total = (
        w.lambda_d1 * d1 + w.lambda_d2 * d2 + w.lambda_d3 * d3 + w.lambda_r * bpp + w.lambda_m * mterm
    )
    _f = lambda t: float(t.detach())
    terms = {
        "ms_ssim": _f(-d1) if w.lambda_d1 > 0 else float("nan"),
        "mse": _f(d2),
        "bpp_est": _f(bpp),
        "im_constraint": _f(mterm),
        "loss": _f(total),
    }
    return total, terms


def pipeline_loss(codec: Codec, x, w: LossWeights, bits: int | None = None):
    """Full forward pass x -> loss; returns (loss, terms, state dict)."""
    bits = bits or codec.cfg.bits_b
    y_tilde, tau, tau_q, m = codec.masked_latent(x)
    return _loss_from_latent(codec, x, y_tilde, tau, w, bits) + (
        {"y_tilde": y_tilde, "tau": tau, "mask": m},
    )


def _loss_from_latent(codec: Codec, x, y_tilde, tau, w: LossWeights, bits: int):
    u, z = quantize_pair(y_tilde, bits)
    xhat = codec.decode_image(u)
    rate = pm.rate_bits(codec.probmodel, u, z, bits, codec.pcfg.num_scales_M)
    loss, terms = rd_loss(x, xhat, rate, tau, w, codec.cfg.zeta)
    return loss, terms


def distortion_loss(x, xhat, w: LossWeights) -> torch.Tensor:
    """Distortion-only objective (bias adaptation: biases cannot change the rate)."""
    d = w.lambda_d2 * torch.mean((xhat - x) ** 2)
    if w.lambda_d1 > 0:
        d = d + w.lambda_d1 * (-ms_ssim(xhat, x))
    if w.lambda_d3 > 0 and w.perceptual_extractor is not None:
        d = d + w.lambda_d3 * perceptual_loss(x, xhat, w.perceptual_extractor)
    return d


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_stage1(
    codec: Codec,
    images: np.ndarray,
    w: LossWeights,
    epochs: int,
    batch_size: int = 12,
    lr: float = 1e-4,
    seed: int = 0,
    bits: int | None = None,
    log_path=None,
    progress=None,
):
    """Conventional rate-distortion training of all four networks.

    images: (N, H, W, 3) float array in [0, 1].  Seeded and reproducible.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(
        torch.get_default_dtype()
    )
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        agg, count = {}, 0
        for idx in _batches(len(data), batch_size, gen):
            x = data[idx]
            loss, terms, _ = pipeline_loss(codec, x, w, bits)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in terms.items():
                agg[k] = agg.get(k, 0.0) + v
            count += 1
        row = {"epoch": epoch, **{k: v / count for k, v in agg.items()}}
        history.append(row)
        if progress:
            progress(row)
    if log_path:
        write_metrics_log(log_path, history)
    return history


def write_metrics_log(path, history):
    if not history:
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def inner_adapt(latent, loss_fn, n: int, alpha: float, second_order: bool = False, mask=None):
    """n latent gradient-descent steps; networks untouched.

    With second_order=True the update graph is kept so outer gradients flow
    through the inner trajectory; otherwise inner gradients are constants.
    Returns (adapted latent, list of pre-update losses).
    """
    y = latent
    trace = []
    for _ in range(n):
        loss = loss_fn(y)
        trace.append(float(loss.detach()))
        (g,) = torch.autograd.grad(loss, y, create_graph=second_order)
        if not second_order:
            g = g.detach()
        y = y - alpha * g
        if mask is not None:
            y = y * mask
    return y, trace


def overfit_latent(codec: Codec, x, n: int, alpha: float, w: LossWeights, bits: int | None = None):
    """Inference-time latent overfitting: gradient descent on the masked latent
    with every network frozen.  Mask and importance map stay fixed from step 0.

    Returns (adapted latent tensor, loss trace of length n + 1).
    """
    bits = bits or codec.cfg.bits_b
    with torch.no_grad():
        y0, tau, tau_q, m = codec.masked_latent(x)
    tau = tau.detach()
    m = m.detach()
    latent = y0.detach().clone().requires_grad_(True)

    def loss_fn(lat):
        return _loss_from_latent(codec, x, lat, tau, w, bits)[0]

    if n == 0:
        with torch.no_grad():
            base = float(loss_fn(latent.detach()))
        return latent.detach(), [base]
    y_n, trace = inner_adapt(latent, loss_fn, n, alpha, second_order=False, mask=m)
    with torch.no_grad():
        trace.append(float(loss_fn(y_n)))
    return y_n.detach(), trace


def meta_finetune(
    codec: Codec,
    images: np.ndarray,
    mcfg: MetaConfig,
    w: LossWeights,
    epochs: int = 5,
    seed: int = 0,
    bits: int | None = None,
    log_path=None,
    progress=None,
):
    """MAML-style fine-tuning: the inner loop overfits each image's latent,
    the outer loop updates all networks on the post-overfitting loss."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    bits = bits or codec.cfg.bits_b
    data = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(
        torch.get_default_dtype()
    )
    opt = torch.optim.Adam(codec.parameters(), lr=mcfg.outer_lr_beta)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for epoch in range(epochs):
        epoch_loss, count = 0.0, 0
        for idx in _batches(len(data), mcfg.batch_size, gen):
            outer_total = None
            for i in idx:
                x = data[i : i + 1]
                y0, tau, tau_q, m = codec.masked_latent(x)

                def loss_fn(lat, x=x, tau=tau):
                    return _loss_from_latent(codec, x, lat, tau, w, bits)[0]

                y_n, _ = inner_adapt(
                    y0, loss_fn, mcfg.inner_iters_n, mcfg.inner_lr_alpha,
                    second_order=mcfg.second_order, mask=m,
                )
                outer_i = loss_fn(y_n)
                outer_total = outer_i if outer_total is None else outer_total + outer_i
            if not torch.isfinite(outer_total):
                raise MetaDivergenceError(f"outer loss diverged at epoch {epoch}")
            opt.zero_grad()
            outer_total.backward()
            opt.step()
            epoch_loss += float(outer_total.detach()) / len(idx)
            count += 1
        row = {"epoch": epoch, "outer_loss": epoch_loss / count}
        history.append(row)
        if progress:
            progress(row)
    if log_path:
        write_metrics_log(log_path, history)
    return history


# ---------------------------------------------------------------------------
# decoder-bias adaptation


RESERVED_DEFAULT_INDEX = 255


@dataclass
class BiasCodebook:
    centroids: np.ndarray  # (n, D) float32, n <= 255
    seed: int = 0
    n_iter: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if len(self.centroids) > RESERVED_DEFAULT_INDEX:
            raise ValueError("at most 255 centroids (index 255 is reserved)")

    def __len__(self):
        return len(self.centroids)


def overfit_biases(
    codec: Codec, patch, iters: int = 50, lr: float = 1e-3, w: LossWeights | None = None,
    bits: int | None = None,
) -> np.ndarray:
    """Plain gradient descent on decoder conv biases only; returns the adapted
    bias vector and leaves the model untouched."""
    w = w or LossWeights()
    bits = bits or codec.cfg.bits_b
    with torch.no_grad():
        y_tilde, *_ = codec.masked_latent(patch)
        u, _ = quantize_pair(y_tilde, bits)
    biases = [p for name, p in codec.decoder.named_parameters() if name.endswith(".bias")]
    saved = [b.detach().clone() for b in biases]
    try:
        for _ in range(iters):
            xhat = codec.decoder(u)
            loss = distortion_loss(patch, xhat, w)
            grads = torch.autograd.grad(loss, biases)
            with torch.no_grad():
                for b, g in zip(biases, grads):
                    b -= lr * g
        vec = get_bias_vector(codec.decoder)
    finally:
        with torch.no_grad():
            for b, s in zip(biases, saved):
                b.copy_(s)
    return vec


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 50):
    """Lloyd's algorithm with seeded k-means++ init.

    Returns (centroids, assignments, per-iteration objectives); stops at the
    assignment fixpoint.  Objectives are non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("empty point set")
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j:] = centroids[0]
            break
        centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    assignments = None
    objectives = []
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        objectives.append(float(dists[np.arange(n), new_assign].sum()))
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            sel = points[assignments == j]
            if len(sel):
                centroids[j] = sel.mean(axis=0)
    return centroids, assignments, objectives


def build_bias_clusters(vectors, k: int = RESERVED_DEFAULT_INDEX, seed: int = 0, max_iter: int = 50) -> BiasCodebook:
    """k-means codebook over overfitted bias vectors; exact duplicates collapse
    first, and the codebook never exceeds the number of distinct vectors."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise ValueError("need a non-empty (N, D) array of bias vectors")
    unique = np.unique(vectors, axis=0)
    if len(unique) <= k:
        return BiasCodebook(centroids=unique, seed=seed, n_iter=0)
    centroids, _, objectives = kmeans(unique, k, seed=seed, max_iter=max_iter)
    return BiasCodebook(centroids=centroids.astype(np.float32), seed=seed, n_iter=len(objectives))


def select_bias_cluster(
    codec: Codec, x_patch, latent_u, codebook: BiasCodebook | None, w: LossWeights | None = None
) -> int:
    """Index of the centroid minimizing decode distortion; 255 keeps defaults.

    Ties break toward 255, then the lower centroid index, so selection never
    does worse than the default biases.
    """
    w = w or LossWeights()
    with torch.no_grad():
        default_loss = float(distortion_loss(x_patch, codec.decode_image(latent_u), w))
        if codebook is None or len(codebook) == 0:
            return RESERVED_DEFAULT_INDEX
        losses = np.empty(len(codebook))
        for j, vec in enumerate(codebook.centroids):
            losses[j] = float(distortion_loss(x_patch, codec.decode_image(latent_u, biases=vec), w))
    best = int(losses.argmin())
    if losses[best] < default_loss:
        return best
    return RESERVED_DEFAULT_INDEX
