"""Latent-space analyses for a trained flow.

Everything here treats the flow as a fixed bijection: codes are
encoded, manipulated with plain vector arithmetic, and decoded back to
spectrogram pixels.  Includes Gaussianity diagnostics of encoded
corpora, mean-displacement denoising, linear interpolation sweeps and a
two-direction LDA probe of class structure.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, prior_logprob
from .numerics import Rng, ShapeError

DEFAULT_INTERP_ALPHAS = tuple(np.linspace(0.1, 0.9, 9))
DEFAULT_DENOISE_BETAS = tuple(np.linspace(0.0, 0.8, 9))
LDA_SHRINKAGE = 1e-3


class DegenerateProbeError(ValueError):
    """LDA cannot be fit: the two classes have identical means."""


# ---------------------------------------------------------------------------
# encode / decode / sample


def encode_batch(model: FlowModel, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, C, H, W) pixels -> codes (N, d) and log likelihoods (N,)."""
    parts, logdet, _ = model.forward(pixels)
    z = model.flatten_parts(parts)
    return z, prior_logprob(z) + logdet


def decode_batch(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """Codes (N, d) or (d,) -> pixels; the exact inverse of encoding."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    out = model.inverse(model.unflatten_code(z))
    return out[0] if single else out


def sample(
    model: FlowModel, rng: Rng, n: int, temperature: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Draw codes z = temperature * eps, eps ~ N(0, I); decode to pixels."""
    if n < 1:
        raise ValueError("need at least one sample")
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    z = temperature * rng.standard_normal((n, model.code_size))
    return z, decode_batch(model, z)


# ---------------------------------------------------------------------------
# interpolation


@dataclass
class InterpolationResult:
    alphas: np.ndarray
    codes: np.ndarray
    images: np.ndarray


def interpolate(
    model: FlowModel,
    code_a: np.ndarray,
    code_b: np.ndarray,
    alphas=None,
) -> InterpolationResult:
    """Decode z = (1 - alpha) z_a + alpha z_b over the weight sweep.

    The default sweep runs alpha from 0.1 to 0.9 in steps of 0.1,
    excluding both endpoints.
    """
    za = np.asarray(code_a, dtype=np.float64).reshape(-1)
    zb = np.asarray(code_b, dtype=np.float64).reshape(-1)
    if za.shape != zb.shape or za.shape != (model.code_size,):
        raise ShapeError(
            f"codes must both have length {model.code_size}, "
            f"got {za.shape} and {zb.shape}"
        )
    alphas = np.asarray(
        DEFAULT_INTERP_ALPHAS if alphas is None else alphas, dtype=np.float64
    )
    codes = (1.0 - alphas)[:, None] * za[None, :] + alphas[:, None] * zb[None, :]
    return InterpolationResult(
        alphas=alphas, codes=codes, images=decode_batch(model, codes)
    )


# ---------------------------------------------------------------------------
# displacement denoising


@dataclass
class DisplacementVector:
    """Mean latent offset from clean codes to their noisy counterparts."""

    vector: np.ndarray
    n_clean: int
    n_noisy: int
    snr_db: float | None = None

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


def noise_displacement(
    z_clean: np.ndarray, z_noisy: np.ndarray, snr_db: float | None = None
) -> DisplacementVector:
    """xi = mean(noisy codes) - mean(clean codes).

    The two sets must share the code dimension but may differ in size;
    both must be non-empty.
    """
    z_clean = np.asarray(z_clean, dtype=np.float64)
    z_noisy = np.asarray(z_noisy, dtype=np.float64)
    if (
        z_clean.ndim != 2
        or z_noisy.ndim != 2
        or z_clean.shape[1] != z_noisy.shape[1]
        or z_clean.shape[0] < 1
        or z_noisy.shape[0] < 1
    ):
        raise ShapeError(
            f"need non-empty (N, d) arrays of equal d, "
            f"got {z_clean.shape} and {z_noisy.shape}"
        )
    vector = z_noisy.mean(axis=0) - z_clean.mean(axis=0)
    return DisplacementVector(
        vector=vector,
        n_clean=z_clean.shape[0],
        n_noisy=z_noisy.shape[0],
        snr_db=snr_db,
    )


@dataclass
class DenoiseResult:
    betas: np.ndarray
    codes: np.ndarray
    images: np.ndarray


def denoise(
    model: FlowModel,
    code_noisy: np.ndarray,
    displacement: DisplacementVector,
    betas=None,
) -> DenoiseResult:
    """Decode z = z_noisy - beta * xi for each beta in the sweep.

    The default sweep runs beta from 0.0 to 0.8 in steps of 0.1; beta 0
    reproduces the noisy input exactly.
    """
    zn = np.asarray(code_noisy, dtype=np.float64).reshape(-1)
    if zn.shape != (model.code_size,):
        raise ShapeError(f"code must have length {model.code_size}, got {zn.shape}")
    if displacement.vector.shape != zn.shape:
        raise ShapeError(
            f"displacement length {displacement.vector.shape} does not match code"
        )
    betas = np.asarray(
        DEFAULT_DENOISE_BETAS if betas is None else betas, dtype=np.float64
    )
    codes = zn[None, :] - betas[:, None] * displacement.vector[None, :]
    return DenoiseResult(betas=betas, codes=codes, images=decode_batch(model, codes))


# ---------------------------------------------------------------------------
# gaussianity diagnostics


def skewness(x: np.ndarray, axis: int = 0) -> np.ndarray | float:
    """Biased sample skewness m3 / m2^1.5 (population-moment convention)."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean(axis=axis, keepdims=True)
    m2 = np.mean(c**2, axis=axis)
    m3 = np.mean(c**3, axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        return m3 / m2**1.5


def excess_kurtosis(x: np.ndarray, axis: int = 0) -> np.ndarray | float:
    """Biased excess kurtosis m4 / m2^2 - 3; 0 for a normal population."""
    x = np.asarray(x, dtype=np.float64)
    c = x - x.mean(axis=axis, keepdims=True)
    m2 = np.mean(c**2, axis=axis)
    m4 = np.mean(c**4, axis=axis)
    with np.errstate(divide="ignore", invalid="ignore"):
        return m4 / m2**2 - 3.0


@dataclass
class GaussianityReport:
    """Per-dimension shape statistics of a code population."""

    skewness: np.ndarray
    excess_kurtosis: np.ndarray
    degenerate: np.ndarray
    n_samples: int
    dims: np.ndarray

    @property
    def mean_abs_skewness(self) -> float:
        ok = ~self.degenerate
        return float(np.mean(np.abs(self.skewness[ok]))) if ok.any() else math.nan

    @property
    def mean_abs_excess_kurtosis(self) -> float:
        ok = ~self.degenerate
        return float(np.mean(np.abs(self.excess_kurtosis[ok]))) if ok.any() else math.nan


def gaussianity_report(z: np.ndarray, dims=None) -> GaussianityReport:
    """Skewness and excess kurtosis per code dimension.

    `dims` optionally restricts the report to a subset of dimension
    indices (useful when d is large).  Dimensions with exactly zero
    variance are flagged degenerate, carry NaN statistics and stay out
    of the aggregate means.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeError(f"need an (N >= 2, d) code array, got {z.shape}")
    if dims is None:
        dims = np.arange(z.shape[1])
    else:
        dims = np.asarray(dims, dtype=np.intp)
        if dims.size < 1 or dims.min() < 0 or dims.max() >= z.shape[1]:
            raise ShapeError(f"dimension indices out of range for d={z.shape[1]}")
        z = z[:, dims]
    c = z - z.mean(axis=0, keepdims=True)
    m2 = np.mean(c**2, axis=0)
    degenerate = m2 == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.mean(c**3, axis=0) / m2**1.5
        kurt = np.mean(c**4, axis=0) / m2**2 - 3.0
    skew[degenerate] = math.nan
    kurt[degenerate] = math.nan
    return GaussianityReport(
        skewness=skew,
        excess_kurtosis=kurt,
        degenerate=degenerate,
        n_samples=z.shape[0],
        dims=dims,
    )


@dataclass
class ScatterPair:
    dim_i: int
    dim_j: int
    points: np.ndarray


def scatter_pair(z: np.ndarray, rng: Rng) -> ScatterPair:
    """Project codes onto two randomly selected distinct dimensions."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"need an (N, d >= 2) code array, got {z.shape}")
    i, j = (int(v) for v in rng.permutation(z.shape[1])[:2])
    return ScatterPair(dim_i=i, dim_j=j, points=z[:, (i, j)])


# ---------------------------------------------------------------------------
# LDA probe


@dataclass
class LdaProbe:
    """Two discriminative directions between a pair of code classes.

    direction_1 solves the shrinkage-regularized LDA problem
    (S_w + lambda I) w = mu_b - mu_a; direction_2 is the leading
    principal component of the pooled within-class residuals after the
    first direction is projected out.  Both are unit length and
    mutually orthogonal.  fisher_ratio is the between/within scatter
    quotient along direction_1 with the raw (unregularized) S_w; it is
    inf when the classes have zero within-class spread along it.
    """

    direction_1: np.ndarray
    direction_2: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    labels: tuple[str, str]
    shrinkage: float
    fisher_ratio: float


def _within_scatter(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    ca = z_a - z_a.mean(axis=0, keepdims=True)
    cb = z_b - z_b.mean(axis=0, keepdims=True)
    return ca.T @ ca + cb.T @ cb


def _deterministic_sign(v: np.ndarray) -> np.ndarray:
    pivot = int(np.argmax(np.abs(v)))
    return -v if v[pivot] < 0 else v


def lda_fit(
    z_a: np.ndarray, z_b: np.ndarray, labels: tuple[str, str] = ("a", "b")
) -> LdaProbe:
    """Fit the two-direction probe from two (N >= 2, d) code arrays."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.ndim != 2 or z_b.ndim != 2 or z_a.shape[1] != z_b.shape[1]:
        raise ShapeError(f"need (N, d) arrays of equal d, got {z_a.shape}, {z_b.shape}")
    if z_a.shape[0] < 2 or z_b.shape[0] < 2:
        raise ShapeError("each class needs at least two samples")
    d = z_a.shape[1]
    mean_a = z_a.mean(axis=0)
    mean_b = z_b.mean(axis=0)
    diff = mean_b - mean_a
    if not np.any(diff):
        raise DegenerateProbeError("class means are identical")

    sw = _within_scatter(z_a, z_b)
    lam = LDA_SHRINKAGE * float(np.trace(sw)) / d
    if lam > 0:
        w1 = np.linalg.solve(sw + lam * np.eye(d), diff)
    else:
        # all points sit on their class means; the mean gap is the answer
        w1 = diff.copy()
    w1 /= np.linalg.norm(w1)

    pooled = np.concatenate(
        [z_a - mean_a[None, :], z_b - mean_b[None, :]], axis=0
    )
    residual = pooled - np.outer(pooled @ w1, w1)
    cov = residual.T @ residual
    eigvals, eigvecs = np.linalg.eigh(cov)
    w2 = eigvecs[:, -1]
    if eigvals[-1] <= 1e-12 * max(float(np.trace(cov)), 1.0):
        # no residual variance: fall back to any unit vector orthogonal to w1
        w2 = None
        for k in range(d):
            cand = np.zeros(d)
            cand[k] = 1.0
            cand -= (cand @ w1) * w1
            norm = np.linalg.norm(cand)
            if norm > 1e-9:
                w2 = cand / norm
                break
        assert w2 is not None
    else:
        w2 = w2 - (w2 @ w1) * w1
        w2 /= np.linalg.norm(w2)
    gap = float(w1 @ diff)
    within = float(w1 @ sw @ w1)
    if within == 0.0:
        ratio = math.inf if gap != 0.0 else 0.0
    else:
        ratio = gap * gap / within
    return LdaProbe(
        direction_1=w1,
        direction_2=_deterministic_sign(w2),
        mean_a=mean_a,
        mean_b=mean_b,
        labels=tuple(labels),
        shrinkage=lam,
        fisher_ratio=ratio,
    )


def fisher_ratio(z_a: np.ndarray, z_b: np.ndarray, direction: np.ndarray) -> float:
    """Between-class over within-class scatter along one direction.

    Uses the raw (unregularized) within-class scatter; a zero
    denominator with separated means yields inf.
    """
    w = np.asarray(direction, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(w)
    if norm == 0:
        raise ValueError("direction must be non-zero")
    w = w / norm
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    gap = float(w @ (z_b.mean(axis=0) - z_a.mean(axis=0)))
    between = gap * gap
    within = float(w @ _within_scatter(z_a, z_b) @ w)
    if within == 0.0:
        return math.inf if between > 0.0 else 0.0
    return between / within


def project_scatter(probe: LdaProbe, z: np.ndarray) -> np.ndarray:
    """Codes (N, d) -> coordinates (N, 2) on the probe's two directions."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != probe.direction_1.shape[0]:
        raise ShapeError(f"need (N, {probe.direction_1.shape[0]}) codes, got {z.shape}")
    return np.stack([z @ probe.direction_1, z @ probe.direction_2], axis=1)


# ---------------------------------------------------------------------------
# artifact export


def write_csv(path: str | os.PathLike, header: list[str], rows, comment=None) -> None:
    """Plain CSV with %.10g floats; identical inputs give identical bytes.

    `comment` becomes a leading `#` line (used for config echoes)."""

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.10g}"
        return str(v)

    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_pgm(path: str | os.PathLike, image: np.ndarray, lo=None, hi=None) -> None:
    """Binary 8-bit PGM (P5).  Grey levels span [lo, hi]; defaults to the
    image's own range so the full contrast is used."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"need a single-channel image, got shape {image.shape}")
    lo = float(img.min()) if lo is None else float(lo)
    hi = float(img.max()) if hi is None else float(hi)
    if hi <= lo:
        levels = np.zeros(img.shape, dtype=np.uint8)
    else:
        scaled = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
        levels = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def write_image_strip(path: str | os.PathLike, images: np.ndarray) -> None:
    """Horizontal strip of equally sized images in one PGM, shared scale."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4 and imgs.shape[1] == 1:
        imgs = imgs[:, 0]
    if imgs.ndim != 3:
        raise ShapeError(f"need (N, H, W) images, got shape {images.shape}")
    strip = np.concatenate(list(imgs), axis=1)
    write_pgm(path, strip)
