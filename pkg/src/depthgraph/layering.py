"""Depth layers: k-means on depth values, Elbow choice of k, layer-wise bilateral pre-filter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .forward import DepthImage, NoiseModel, noise_std

__all__ = [
    "LayerStats",
    "LayerMap",
    "kmeans_1d",
    "elbow_k",
    "noise_variance",
    "bilateral_prefilter",
    "bilateral_filter",
    "segment_layers",
    "layer_variance",
]

DOMAIN_SIGMA = 3.0
ELBOW_REL = 0.10
ELBOW_ABS = 0.005
NOISE_MULT = 2.0  # clusters tighter than this many noise variances are not split further
# E[d^2 | |d| <= q90] / E[d^2] for Gaussian d, used to undo the trimming in noise_variance
_TRIM_GAIN = 0.6232
KMEANS_MAXITER = 100


@dataclass
class LayerStats:
    mean_depth: float
    count: int
    variance: float | None = None  # sigma_bar^2 (mm^2), set by layer_variance

    @property
    def sigma(self) -> float | None:
        return None if self.variance is None else math.sqrt(self.variance)


@dataclass
class LayerMap:
    """Per-pixel layer labels (``-1`` for missing pixels) and per-layer statistics."""

    labels: np.ndarray
    stats: list[LayerStats]
    prefiltered: np.ndarray | None = None
    wcss: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.stats)

    def sigma_map(self) -> np.ndarray:
        """Per-pixel noise SD from the layer variances (NaN on missing pixels)."""
        sig = np.full(self.labels.shape, np.nan)
        for z, st in enumerate(self.stats):
            if st.variance is None:
                raise ValueError("layer variances not set; call layer_variance first")
            sig[self.labels == z] = st.sigma
        return sig


def kmeans_1d(values, k: int, seed: int = 0, maxiter: int = KMEANS_MAXITER):
    """Lloyd's k-means on scalars with seeded farthest-point initialization.

    Returns ``(labels, centroids, wcss)`` with centroids sorted ascending.
    """
    v = np.asarray(values, dtype=float).ravel()
    uniq = np.unique(v)
    k = min(k, uniq.size)
    rng = np.random.default_rng(seed)
    centers = [v[rng.integers(v.size)]]
    for _ in range(1, k):
        d = np.min(np.abs(v[:, None] - np.array(centers)[None, :]), axis=1)
        centers.append(v[int(np.argmax(d))])
    c = np.sort(np.array(centers))
    labels = np.zeros(v.size, dtype=np.int64)
    for _ in range(maxiter):
        # 1-D: nearest centroid via midpoints between sorted centroids
        labels = np.searchsorted((c[1:] + c[:-1]) / 2.0, v, side="right")
        new = np.array([v[labels == j].mean() if np.any(labels == j) else c[j] for j in range(c.size)])
        new = np.sort(new)
        if np.array_equal(new, c):
            break
        c = new
    labels = np.searchsorted((c[1:] + c[:-1]) / 2.0, v, side="right")
    # drop centroids that lost all members
    used = np.unique(labels)
    remap = -np.ones(c.size, dtype=np.int64)
    remap[used] = np.arange(used.size)
    labels, c = remap[labels], c[used]
    wcss = float(sum(np.sum((v[labels == j] - c[j]) ** 2) for j in range(c.size)))
    return labels, c, wcss


def elbow_k(wcss, floor: float = 0.0) -> int:
    """Smallest ``k`` after which one more cluster stops paying off.

    Adding a cluster "stops paying off" when it removes less than
    ``ELBOW_REL`` of the current within-cluster sum of squares, or less than
    ``ELBOW_ABS`` of the one-cluster sum of squares, or when the current sum
    is already at or below ``floor`` (what noise alone would leave).
    """
    w = list(wcss)
    for k in range(1, len(w)):
        gain = w[k - 1] - w[k]
        if w[k - 1] <= max(floor, 0.0) or gain < ELBOW_REL * w[k - 1] or gain < ELBOW_ABS * w[0]:
            return k
    return len(w)


def noise_variance(values, mask) -> float:
    """Per-pixel noise variance from differences of 4-connected available neighbours.

    Half the mean squared difference over the smallest 90% of pairs,
    rescaled for the trimming, so depth edges barely contribute.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    d = np.concatenate([
        (values[:, 1:] - values[:, :-1])[mask[:, 1:] & mask[:, :-1]],
        (values[1:] - values[:-1])[mask[1:] & mask[:-1]],
    ])
    if d.size == 0:
        return 0.0
    d2 = np.sort(d * d)[: max(1, int(math.ceil(0.9 * d.size)))]
    return float(0.5 * d2.mean() / _TRIM_GAIN)


def _segment(values, mask, k_max, seed):
    v = values[mask]
    floor = NOISE_MULT * noise_variance(values, mask) * v.size
    runs = []
    for k in range(1, k_max + 1):
        runs.append(kmeans_1d(v, k, seed))
        if runs[-1][1].size < k:
            break
    wcss = [r[2] for r in runs]
    k = elbow_k(wcss, floor)
    lab, cen, _ = runs[k - 1]
    labels = np.full(values.shape, -1, dtype=np.int64)
    labels[mask] = lab
    return labels, wcss


def _layer_stats(values, labels):
    stats = []
    for z in range(labels.max() + 1):
        sel = values[labels == z]
        stats.append(LayerStats(float(sel.mean()), int(sel.size)))
    return stats


def bilateral_filter(values, mask, sigma_range, sigma_domain=DOMAIN_SIGMA, groups=None):
    """Bilateral filter restricted to available pixels (and to equal ``groups`` labels if given).

    ``sigma_range`` is a scalar or a per-pixel array.  The spatial kernel is
    truncated at three standard deviations.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    H, W = values.shape
    rad = int(math.ceil(3 * sigma_domain))
    sr = np.broadcast_to(np.asarray(sigma_range, dtype=float), values.shape)
    pad = lambda a, fill: np.pad(a, rad, mode="constant", constant_values=fill)
    vp, mp = pad(values, 0.0), pad(mask, False)
    gp = pad(groups, -2) if groups is not None else None
    num = np.zeros_like(values)
    den = np.zeros_like(values)
    inv2r = 1.0 / (2.0 * np.maximum(sr, 1e-12) ** 2)
    for dy in range(-rad, rad + 1):
        for dx in range(-rad, rad + 1):
            ws = math.exp(-(dy * dy + dx * dx) / (2.0 * sigma_domain**2))
            sl = (slice(rad + dy, rad + dy + H), slice(rad + dx, rad + dx + W))
            nb, ok = vp[sl], mp[sl]
            if gp is not None:
                ok = ok & (gp[sl] == groups)
            w = ws * np.exp(-((nb - values) ** 2) * inv2r) * ok
            num += w * nb
            den += w
    out = np.where(mask & (den > 0), num / np.where(den > 0, den, 1.0), 0.0)
    return out


def bilateral_prefilter(img: DepthImage, layers: LayerMap) -> DepthImage:
    """Layer-by-layer bilateral filter; range parameter = the layer's depth SD."""
    sr = np.ones(img.values.shape)
    passthrough = np.zeros(img.values.shape, dtype=bool)
    for z in range(layers.labels.max() + 1):
        sel = (layers.labels == z) & img.mask
        if sel.sum() < 2:
            passthrough |= sel
            continue
        sd = float(np.std(img.values[sel]))
        # constant layers: any positive range parameter leaves them unchanged
        sr[sel] = sd if sd > 0 else 1.0
    out = bilateral_filter(img.values, img.mask, sr, DOMAIN_SIGMA, groups=layers.labels)
    out[passthrough] = img.values[passthrough]
    return img.with_values(out, img.mask)


def segment_layers(img: DepthImage, k_max: int = 10, seed: int = 0) -> LayerMap:
    """Two-pass layering: segment, pre-filter layer by layer, segment again.

    The returned map carries the pre-filtered depth and the second-pass
    labels; layer means are taken over the observed (unfiltered) depths.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if not img.mask.any():
        raise ValueError("image has no available pixels")
    labels, _ = _segment(img.values, img.mask, k_max, seed)
    first = LayerMap(labels, _layer_stats(img.values, labels))
    pre = bilateral_prefilter(img, first)
    labels2, wcss = _segment(pre.values, img.mask, k_max, seed)
    return LayerMap(labels2, _layer_stats(img.values, labels2), pre.values, wcss)


def layer_variance(layers: LayerMap, m: NoiseModel, strict: bool = True) -> LayerMap:
    """Attach ``sigma_bar^2 = (alpha (x_bar + mu)^2 + kappa)^2`` to every layer."""
    for st in layers.stats:
        st.variance = float(noise_std(st.mean_depth, m, strict=strict)) ** 2
    return layers
