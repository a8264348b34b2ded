"""Image-set metrics: SSIM / MS-SSIM diversity and multi-scale sliced Wasserstein.

All computation is float64 numpy; images are 2-D arrays (or stacks of
them) with pixel values in [0, 1].
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol, Sequence

import numpy as np

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def _ssim_maps(x: np.ndarray, y: np.ndarray, win: np.ndarray, data_range: float,
               k1: float, k2: float) -> tuple[np.ndarray, np.ndarray]:
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx = _filter_valid(x, win)
    my = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def _check_pair(x, y, min_extent: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = x.reshape(x.shape[-2:]) if x.ndim > 2 else x
    y = y.reshape(y.shape[-2:]) if y.ndim > 2 else y
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < min_extent:
        raise ValueError(f"image {x.shape} smaller than required extent {min_extent}")
    return x, y


def ssim(x, y, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean structural similarity over all valid Gaussian windows."""
    x, y = _check_pair(x, y, win_size)
    lum, cs = _ssim_maps(x, y, gaussian_window(win_size, sigma), data_range, k1, k2)
    return float(np.mean(lum * cs))


def _signed_pow(v: float, w: float) -> float:
    return math.copysign(abs(v) ** w, v)


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2])


def msssim_weights(scales: int) -> np.ndarray:
    if not 1 <= scales <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MSSSIM_WEIGHTS)}")
    w = np.array(MSSSIM_WEIGHTS[:scales])
    return w / w.sum()


def ms_ssim(x, y, scales: int = 5, win_size: int = 11, sigma: float = 1.5,
            k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Multi-scale SSIM with dyadic 2x2 average pooling between scales.

    Contrast-structure terms come from every scale but the coarsest, which
    contributes the full SSIM.  With fewer than five scales the standard
    weights are truncated and renormalised.  Negative terms keep their sign
    under the fractional power, so the result stays in [-1, 1].
    """
    x, y = _check_pair(x, y, (2 ** (scales - 1)) * win_size)
    weights = msssim_weights(scales)
    win = gaussian_window(win_size, sigma)
    out = 1.0
    for j in range(scales):
        lum, cs = _ssim_maps(x, y, win, data_range, k1, k2)
        if j == scales - 1:
            out *= _signed_pow(float(np.mean(lum * cs)), weights[j])
        else:
            out *= _signed_pow(float(np.mean(cs)), weights[j])
            x, y = _pool2(x), _pool2(y)
    return out


def max_msssim_scales(height: int, width: int, win_size: int = 11) -> int:
    s = 1
    while s < len(MSSSIM_WEIGHTS) and min(height, width) >= (2 ** s) * win_size:
        s += 1
    return s


def _as_stack(images) -> np.ndarray:
    a = np.asarray(images, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[1] != 1:
            raise ValueError("expected single-channel images")
        a = a[:, 0]
    if a.ndim != 3:
        raise ValueError(f"expected a stack of 2-D images, got shape {a.shape}")
    return a


def _random_distinct_pairs(n: int, count: int, rng) -> np.ndarray:
    i = rng.integers(0, n, count)
    j = (i + rng.integers(1, n, count)) % n
    return np.stack([i, j], axis=1)


def msssim_diversity_report(real_set, fake_set, rng: np.random.Generator, n_pairs: int | None = None,
                            scales: int | None = None, pairing: str = "random") -> dict[str, float]:
    """Mean MS-SSIM over random cross-set pairs and random within-set pairs.

    ``pairing="identity"`` pairs item i of each set with item i of the
    other for the cross term.  Lower within-set means indicate more diverse
    sets; a within-set mean near 1 is the mode-collapse signature.
    """
    real = _as_stack(real_set)
    fake = _as_stack(fake_set)
    if len(real) < 2 or len(fake) < 2:
        raise ValueError("both sets need at least 2 images")
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError("sets have different resolutions")
    if scales is None:
        scales = max_msssim_scales(*real.shape[1:])
    n_pairs = n_pairs or max(len(real), len(fake))

    if pairing == "identity":
        m = min(len(real), len(fake))
        cross_pairs = np.stack([np.arange(m), np.arange(m)], axis=1)
    elif pairing == "random":
        cross_pairs = np.stack([rng.integers(0, len(real), n_pairs), rng.integers(0, len(fake), n_pairs)], axis=1)
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    within_real = _random_distinct_pairs(len(real), n_pairs, rng)
    within_fake = _random_distinct_pairs(len(fake), n_pairs, rng)

    def avg(a, b, pairs):
        return float(np.mean([ms_ssim(a[i], b[j], scales=scales) for i, j in pairs]))

    return {
        "msssim_cross": avg(real, fake, cross_pairs),
        "msssim_within_real": avg(real, real, within_real),
        "msssim_within_fake": avg(fake, fake, within_fake),
    }


# ---------------------------------------------------------------------------
# Laplacian pyramid and sliced Wasserstein


def _down2(x: np.ndarray) -> np.ndarray:
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 0::2] + x[..., 1::2, 1::2])


def _up2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def laplacian_pyramid(image, levels: int) -> list[np.ndarray]:
    """Band-pass levels (finest first) followed by the low-pass residual.

    Works on a single image or a stack (last two axes are spatial).  For
    float32-representable inputs the float64 arithmetic is exact, so
    :func:`reconstruct_pyramid` returns the input bit-for-bit.
    """
    cur = np.asarray(image, dtype=np.float64)
    h, w = cur.shape[-2:]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ValueError(f"extents {h}x{w} not divisible by {f} for {levels} levels")
    bands = []
    for _ in range(levels - 1):
        low = _down2(cur)
        bands.append(cur - _up2(low))
        cur = low
    bands.append(cur)
    return bands


def reconstruct_pyramid(bands: Sequence[np.ndarray]) -> np.ndarray:
    cur = bands[-1]
    for band in reversed(bands[:-1]):
        cur = _up2(cur) + band
    return cur


def auto_levels(height: int, width: int, min_resolution: int = 16) -> int:
    levels = 1
    while (min(height, width) >> levels) >= min_resolution and height % (2 ** levels) == 0 \
            and width % (2 ** levels) == 0:
        levels += 1
    return levels


@dataclass
class PatchDescriptorSet:
    descriptors: np.ndarray  # (patches, k*k)
    scale: int = 0

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise ValueError("descriptors must be a 2-D matrix")

    def __len__(self):
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def extract_descriptors(images, scale: int, patches_per_image: int, rng: np.random.Generator,
                        k: int = 7, eps: float = 1e-8) -> PatchDescriptorSet:
    """Random ``k x k`` patches from each band image, each normalised to zero mean / unit std."""
    band = _as_stack(images)
    n, h, w = band.shape
    if h < k or w < k:
        raise ValueError(f"band {h}x{w} smaller than patch size {k}")
    ys = rng.integers(0, h - k + 1, (n, patches_per_image))
    xs = rng.integers(0, w - k + 1, (n, patches_per_image))
    win = np.lib.stride_tricks.sliding_window_view(band, (k, k), axis=(1, 2))
    img_idx = np.repeat(np.arange(n), patches_per_image)
    d = win[img_idx, ys.ravel(), xs.ravel()].reshape(-1, k * k)
    flat = np.ptp(d, axis=1) == 0
    d = d - d.mean(axis=1, keepdims=True)
    d = d / (d.std(axis=1, keepdims=True) + eps)
    d[flat] = 0.0  # exact zeros, free of mean round-off
    return PatchDescriptorSet(d, scale)


def random_directions(dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((dim, count))
    return d / np.sqrt(np.sum(d * d, axis=0, keepdims=True))


def sliced_wasserstein(a, b, n_projections: int = 512, rng: np.random.Generator | None = None,
                       directions: np.ndarray | None = None) -> float:
    """Average over unit directions of the 1-D Wasserstein-1 distance of projections.

    The larger set is randomly subsampled to the size of the smaller.
    ``directions`` (``dim x P`` unit columns) overrides the random draw.
    """
    A = a.descriptors if isinstance(a, PatchDescriptorSet) else np.asarray(a, dtype=np.float64)
    B = b.descriptors if isinstance(b, PatchDescriptorSet) else np.asarray(b, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("empty descriptor set")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if rng is None:
        rng = np.random.default_rng(0)
    if len(A) > len(B):
        A = A[np.sort(rng.choice(len(A), len(B), replace=False))]
    elif len(B) > len(A):
        B = B[np.sort(rng.choice(len(B), len(A), replace=False))]
    if directions is None:
        directions = random_directions(A.shape[1], n_projections, rng)
    pa = np.sort(A @ directions, axis=0)
    pb = np.sort(B @ directions, axis=0)
    return float(np.mean(np.abs(pa - pb)))


@dataclass
class SWDConfig:
    patch_size: int = 7
    patches_per_image: int = 128
    n_projections: int = 512
    levels: int | None = None
    min_resolution: int = 16


@dataclass
class MetricReport:
    swd_per_scale: list[float] = field(default_factory=list)
    swd_mean: float = float("nan")
    msssim_cross: float = float("nan")
    msssim_within_real: float = float("nan")
    msssim_within_fake: float = float("nan")

    @staticmethod
    def columns() -> list[str]:
        return [f.name for f in fields(MetricReport)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.columns())
        row = []
        for name in self.columns():
            v = getattr(self, name)
            row.append(";".join(repr(float(x)) for x in v) if isinstance(v, list) else repr(float(v)))
        wr.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text)))
        rec = dict(zip(rows[0], rows[1]))
        per = [float(x) for x in rec["swd_per_scale"].split(";") if x]
        return cls(per, *(float(rec[c]) for c in cls.columns()[1:]))

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2)


def swd_multiscale(real_images, fake_images, cfg: SWDConfig | None = None,
                   rng: np.random.Generator | None = None) -> MetricReport:
    """Per-scale SWD between Laplacian-pyramid patch descriptors of two image sets.

    Both sets are sampled at the same patch locations on each level, so a
    set compared with an identical copy scores exactly zero.
    """
    cfg = cfg or SWDConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    real = _as_stack(real_images)
    fake = _as_stack(fake_images)
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"resolutions differ: {real.shape[1:]} vs {fake.shape[1:]}")
    levels = cfg.levels or auto_levels(*real.shape[1:], cfg.min_resolution)
    pr = laplacian_pyramid(real, levels)
    pf = laplacian_pyramid(fake, levels)
    per_scale = []
    for lvl in range(levels):
        loc_seed = int(rng.integers(2 ** 63))
        da = extract_descriptors(pr[lvl], lvl, cfg.patches_per_image, np.random.default_rng(loc_seed), cfg.patch_size)
        db = extract_descriptors(pf[lvl], lvl, cfg.patches_per_image, np.random.default_rng(loc_seed), cfg.patch_size)
        per_scale.append(sliced_wasserstein(da, db, cfg.n_projections, rng))
    return MetricReport(per_scale, float(np.mean(per_scale)))


# ---------------------------------------------------------------------------
# learned-feature metrics (no extractor ships)


class FeatureExtractor(Protocol):
    def __call__(self, images: np.ndarray) -> np.ndarray:
        """Map ``(N, H, W)`` images in [0, 1] to ``(N, D)`` features."""


def frechet_distance(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two feature matrices."""
    from scipy import linalg

    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    ca = np.cov(feat_a, rowvar=False)
    cb = np.cov(feat_b, rowvar=False)
    covmean = linalg.sqrtm(ca @ cb).real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(ca + cb - 2.0 * covmean))
