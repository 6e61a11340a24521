"""Depth-sensor image formation: log-domain quantization plus signal-dependent noise.

A clean depth ``x`` (mm) is observed as ``y = Q(x + n)`` where ``n`` is
zero-mean noise whose standard deviation grows quadratically with depth and
``Q`` reconstructs the log-centre of the quantization bin selected by ``R``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "QuantizerParams",
    "NoiseFamily",
    "NoiseModel",
    "DepthImage",
    "quantization_mapping",
    "dequantize",
    "bin_edges",
    "noise_std",
    "noise_bounds",
    "corrupt",
    "row_generator",
    "DEFAULT_QUANTIZER",
    "DEFAULT_NOISE",
]


def round_half_away(v):
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class QuantizerParams:
    """Parameters of the log quantizer.

    Build with :meth:`from_bits` (``phi`` derived so there are exactly
    ``2**bits`` levels) or :meth:`from_phi` (``phi`` given directly, level
    count derived).  ``bits`` is ``None`` when ``phi`` was supplied.
    """

    theta: float
    rho: float
    x_min: float
    x_max: float
    phi: float
    bits: int | None = None

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min ({self.x_min}) must be below x_max ({self.x_max})")
        if self.theta * self.x_min + self.rho < 1:
            raise ValueError("theta * x_min + rho must be >= 1")
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if self.bits is not None and self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")

    @classmethod
    def from_bits(cls, theta, rho, x_min, x_max, bits):
        span = math.log(theta * x_max + rho) - math.log(theta * x_min + rho)
        return cls(theta, rho, x_min, x_max, 2.0**bits / span, int(bits))

    @classmethod
    def from_phi(cls, theta, rho, x_min, x_max, phi):
        return cls(theta, rho, x_min, x_max, float(phi), None)

    @property
    def r0(self) -> float:
        return self.phi * math.log(self.theta * self.x_min + self.rho)

    @property
    def n_levels(self) -> int:
        """Number of bins covering ``[x_min, x_max)``."""
        if self.bits is not None:
            return 2**self.bits
        top = self.phi * math.log(self.theta * self.x_max + self.rho) - self.r0
        return int(math.ceil(top - 1e-9))

    @property
    def given(self) -> str:
        return "bits" if self.bits is not None else "phi"

    def edge(self, m):
        """Depth at log-level ``m``: the upper edge of bin ``m`` and lower edge of bin ``m + 1``."""
        m = np.asarray(m, dtype=float)
        return (np.exp((m + self.r0) / self.phi) - self.rho) / self.theta

    def bin_width(self, k):
        return self.edge(k) - self.edge(np.asarray(k) - 1)


class NoiseFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class NoiseModel:
    """Quadratic standard-deviation law ``sigma(x) = alpha (x + mu)^2 + kappa``."""

    alpha: float
    mu: float
    kappa: float
    family: NoiseFamily = NoiseFamily.GAUSSIAN

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.mu < 0:
            raise ValueError(f"mu must be negative, got {self.mu}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        object.__setattr__(self, "family", NoiseFamily(self.family))


# Values fitted to an Intel RealSense D435.  The fit leaves x_max implicit;
# 5 m covers the sensor's working range.
DEFAULT_QUANTIZER = QuantizerParams.from_phi(theta=500.0, rho=200.0, x_min=10.0, x_max=5000.0, phi=500.0)
DEFAULT_NOISE = NoiseModel(alpha=1e-5, mu=-528.0, kappa=1.4)


@dataclass
class DepthImage:
    """An ``H x N`` depth map in millimetres with an availability mask."""

    values: np.ndarray
    mask: np.ndarray
    focal: float
    baseline: float
    cx: float | None = None
    cy: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ValueError("values and mask must be 2-D arrays of equal shape")
        if not (self.focal > 0 and self.baseline > 0):
            raise ValueError("focal and baseline must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def principal_point(self) -> tuple[float, float]:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return cx, cy

    def with_values(self, values, mask=None) -> "DepthImage":
        return replace(
            self,
            values=np.asarray(values, dtype=float),
            mask=self.mask.copy() if mask is None else np.asarray(mask, dtype=bool),
            meta=dict(self.meta),
        )

    def check_range(self, q: QuantizerParams):
        v = self.values[self.mask]
        if v.size and (v.min() < q.x_min or v.max() >= q.x_max):
            raise ValueError(
                f"available depths span [{v.min()}, {v.max()}], outside [{q.x_min}, {q.x_max})"
            )


def _check_range(x, q: QuantizerParams):
    x = np.asarray(x, dtype=float)
    if np.any(x < q.x_min):
        raise ValueError(f"depth below x_min={q.x_min}: {np.min(x)}")
    if np.any(x >= q.x_max):
        raise ValueError(f"depth at or above x_max={q.x_max}: {np.max(x)}")
    return x


def _levels(x, q):
    return round_half_away(q.phi * np.log(q.theta * x + q.rho) - q.r0 + 0.5)


def quantization_mapping(x, q: QuantizerParams):
    """Bin index ``R(x)`` in ``{1, ..., n_levels}``."""
    x = _check_range(x, q)
    r = np.clip(_levels(x, q), 1, q.n_levels).astype(np.int64)
    return r if r.ndim else int(r)


def _center(r, q):
    return (np.exp((np.asarray(r, dtype=float) + q.r0 - 0.5) / q.phi) - q.rho) / q.theta


def dequantize(x, q: QuantizerParams):
    """Quantization function ``Q(x)``: the log-centre of the bin containing ``x``."""
    out = _center(quantization_mapping(x, q), q)
    return out if np.ndim(out) else float(out)


def bin_edges(r, q: QuantizerParams):
    """Lower and upper depth edges ``(z-, z+)`` of bin ``r``."""
    r = np.asarray(r)
    return q.edge(r - 1), q.edge(r)


def noise_bounds(y, x, q: QuantizerParams):
    """Admissible noise interval ``[n-, n+)`` for observation ``y`` of depth ``x``."""
    z_lo, z_hi = bin_edges(quantization_mapping(y, q), q)
    x = np.asarray(x, dtype=float)
    return z_lo - x, z_hi - x


def noise_std(x, m: NoiseModel, strict: bool = True):
    """Noise standard deviation at depth ``x``.

    The law only holds for ``x >= -mu``.  With ``strict=False`` depths below
    the vertex are assigned the vertex value ``kappa`` instead of raising.
    """
    x = np.asarray(x, dtype=float)
    below = x < -m.mu
    if strict and np.any(below):
        raise ValueError(f"noise law undefined for depth {np.min(x)} < -mu = {-m.mu}")
    d = np.where(below, 0.0, x + m.mu)
    s = m.alpha * d**2 + m.kappa
    return s if s.ndim else float(s)


def row_generator(seed: int, row: int, stage: int = 0) -> np.random.Generator:
    """PCG64 stream for one image row, derived from ``(seed, stage, row)``.

    Streams are independent of evaluation order, so row-parallel and serial
    execution draw identical numbers.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stage), int(row)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_noise(rng: np.random.Generator, sigma, family: NoiseFamily):
    sigma = np.asarray(sigma, dtype=float)
    if NoiseFamily(family) is NoiseFamily.LAPLACIAN:
        # Laplace(b) has variance 2 b^2.
        return rng.laplace(0.0, 1.0, size=sigma.shape) * (sigma / math.sqrt(2.0))
    return rng.standard_normal(size=sigma.shape) * sigma


def quantize_clamped(v, q: QuantizerParams):
    """``Q`` applied after clamping to ``[x_min, x_max)``."""
    v = np.clip(np.asarray(v, dtype=float), q.x_min, np.nextafter(q.x_max, -np.inf))
    r = np.clip(_levels(v, q), 1, q.n_levels)
    return _center(r, q)


def corrupt(
    img: DepthImage,
    q: QuantizerParams,
    m: NoiseModel,
    seed: int,
    dropout: float = 0.0,
    stage: int = 0,
) -> DepthImage:
    """Add signal-dependent noise and quantize every available pixel.

    ``dropout`` marks a random fraction of available pixels as missing, drawn
    from the same per-row stream after the noise.
    """
    img.check_range(q)
    out = np.zeros_like(img.values)
    mask = img.mask.copy()
    for i in range(img.height):
        cols = np.flatnonzero(img.mask[i])
        if cols.size == 0:
            continue
        rng = row_generator(seed, i, stage)
        x = img.values[i, cols]
        n = sample_noise(rng, noise_std(x, m, strict=False), m.family)
        out[i, cols] = quantize_clamped(x + n, q)
        if dropout > 0:
            drop = rng.random(cols.size) < dropout
            mask[i, cols[drop]] = False
    out[~mask] = 0.0
    res = img.with_values(out, mask)
    res.meta.update({"seed": int(seed), "quantizer": q, "noise": m})
    return res
