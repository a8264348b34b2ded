"""Adversarial losses, the gradient penalty, and the auxiliary label loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import N_LABELS, as_labels


@dataclass(frozen=True)
class GradientPenaltyConfig:
    lam: float = 10.0
    beta: float = 1.0
    norm_eps: float = 1e-16

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be >= 0")
        if self.beta <= 0:
            raise ValueError("target gradient magnitude must be > 0")


@dataclass
class LatentSampler:
    """Seedable prior for generator inputs (``normal`` or ``uniform`` on [-1, 1])."""

    latent_dim: int
    kind: str = "normal"
    dtype: type = np.float32

    def __post_init__(self):
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"unknown latent distribution {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "normal":
            z = rng.standard_normal((n, self.latent_dim))
        else:
            z = rng.uniform(-1.0, 1.0, (n, self.latent_dim))
        return z.astype(self.dtype)


def _probs(p, name: str) -> Tensor:
    p = ad.Tensor(p) if not isinstance(p, Tensor) else p
    if not ((p.data > 0) & (p.data < 1)).all():
        raise ValueError(f"{name}: probabilities must lie strictly inside (0, 1)")
    return p


def _finite(x, name: str) -> Tensor:
    x = ad.Tensor(x) if not isinstance(x, Tensor) else x
    if not np.isfinite(x.data).all():
        raise ValueError(f"{name}: non-finite scores")
    return x


def gan_value(d_real, d_fake) -> Tensor:
    """Minimax GAN value: mean log D(x) + mean log(1 - D(G(z)))."""
    d_real = _probs(d_real, "d_real")
    d_fake = _probs(d_fake, "d_fake")
    return ad.add(ad.mean(ad.log(d_real)), ad.mean(ad.log(ad.add_scalar(ad.neg(d_fake), 1.0))))


def g_loss_nonsaturating(d_fake) -> Tensor:
    """-mean log D(G(z))."""
    d_fake = _probs(d_fake, "d_fake")
    return ad.neg(ad.mean(ad.log(d_fake)))


def wgan_losses(f_real, f_fake) -> tuple[Tensor, Tensor]:
    """``(critic_loss, gen_loss)``; the critic minimises mean f_fake - mean f_real."""
    f_real = _finite(f_real, "f_real")
    f_fake = _finite(f_fake, "f_fake")
    fake_mean = ad.mean(f_fake)
    return ad.sub(fake_mean, ad.mean(f_real)), ad.neg(fake_mean)


def sample_interpolates(x_real, x_fake, rng: np.random.Generator, gamma=None) -> Tensor:
    """Per-item random convex combinations of real and fake images.

    The result is a fresh leaf with gradient tracking enabled. ``gamma`` may
    be supplied (one value per item) instead of drawn from ``rng``.
    """
    xr = x_real.data if isinstance(x_real, Tensor) else np.asarray(x_real)
    xf = x_fake.data if isinstance(x_fake, Tensor) else np.asarray(x_fake)
    if xr.shape != xf.shape:
        raise ad.ShapeError(f"interpolates: shape mismatch {xr.shape} vs {xf.shape}")
    n = xr.shape[0]
    if gamma is None:
        gamma = rng.uniform(0.0, 1.0, n)
    gamma = np.asarray(gamma, dtype=xr.dtype).reshape((n,) + (1,) * (xr.ndim - 1))
    one = xr.dtype.type(1)
    return Tensor(gamma * xr + (one - gamma) * xf, requires_grad=True)


def input_gradient_norms(score_fn, x_hat: Tensor, eps: float = 1e-16) -> Tensor:
    """Per-item L2 norm of d(score)/d(x_hat), recorded for double backprop."""
    score = score_fn(x_hat)
    (g,) = ad.grad(ad.tsum(score), [x_hat], create_graph=True)
    axes = tuple(range(1, g.ndim))
    return ad.sqrt(ad.add_scalar(ad.tsum(ad.square(g), axis=axes), eps))


def gradient_penalty(score_fn, x_hat: Tensor, cfg: GradientPenaltyConfig) -> tuple[Tensor, Tensor]:
    """``lam * mean((||grad f(x_hat)|| - beta)^2)`` and the per-item norms.

    ``score_fn`` maps an image batch to per-item critic scores, e.g.
    ``lambda x: critic(x, fade)[0]``.
    """
    norms = input_gradient_norms(score_fn, x_hat, cfg.norm_eps)
    pen = ad.mean(ad.square(ad.add_scalar(norms, -cfg.beta)))
    return ad.scale(pen, cfg.lam), norms


def label_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[N, 2]`` logits against view ids."""
    logits = ad.Tensor(logits) if not isinstance(logits, Tensor) else logits
    n, k = logits.shape
    if k != N_LABELS:
        raise ad.ShapeError(f"label head must emit {N_LABELS} logits, got {k}")
    lab = as_labels(labels, n)
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = ad.sub(logits, ad.expand(m, logits.shape))
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=1))
    onehot = Tensor(np.eye(k, dtype=logits.dtype)[lab])
    picked = ad.tsum(ad.mul(shifted, onehot), axis=1)
    return ad.mean(ad.sub(lse, picked))


def drift_penalty(f_real: Tensor, eps: float = 1e-3) -> Tensor:
    return ad.scale(ad.mean(ad.square(f_real)), eps)


def monitored_bce(f_real, f_fake) -> float:
    """Discriminator binary cross-entropy of sigmoid(scores); diagnostic only."""
    r = np.asarray(f_real.data if isinstance(f_real, Tensor) else f_real, dtype=np.float64)
    f = np.asarray(f_fake.data if isinstance(f_fake, Tensor) else f_fake, dtype=np.float64)
    # -log sigmoid(s) = softplus(-s)
    return float(np.mean(np.logaddexp(0.0, -r)) + np.mean(np.logaddexp(0.0, f)))


def label_accuracy(logits, labels) -> float:
    lg = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    lab = as_labels(labels, lg.shape[0])
    return float(np.mean(lg.argmax(axis=1) == lab))
