"""Distributions, quantiles, sampling and sample moments.

Quantiles start from the inverse regularized incomplete gamma/beta functions
and are polished with safeguarded Newton steps on the forward CDF, so they stay
accurate at the extreme tail probabilities used for the concentration bounds
(confidence levels down to 1e-5 and below).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DegenerateDofError, DegenerateSamplesError, DomainError

PD_RATIO = 1e-12
PSD_TOL = 1e-10


def _check_prob(p):
    if not (0.0 < p < 1.0) or not np.isfinite(p):
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")


def _check_dof(k, name="k"):
    if int(k) != k or k < 1:
        raise DomainError(f"{name} must be a positive integer, got {k!r}")


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = symmetrize(np.atleast_2d(np.asarray(self.covariance, dtype=float)))
        if cov.shape != (mean.size, mean.size):
            raise DomainError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if np.linalg.eigvalsh(cov).min() < -PSD_TOL * max(1.0, np.abs(cov).max()):
            raise DomainError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True)
class SampleSet:
    """N_s x n matrix; row i is sample d_i."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 2:
            raise DomainError("a sample set needs at least two rows")
        if not np.all(np.isfinite(s)):
            raise DomainError("sample set contains non-finite entries")
        object.__setattr__(self, "samples", s)

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class MomentEstimate:
    """Sample mean/covariance of a random vector.

    ``fixed`` marks coordinates known to be deterministic (their sample
    variance is exactly zero and a ridge was added to keep ``cov_hat``
    positive definite). Concentration bounds only account for the random
    coordinates.
    """

    mean_hat: np.ndarray
    cov_hat: np.ndarray
    sample_count: int
    fixed: np.ndarray | None = field(default=None)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean_hat, dtype=float))
        cov = symmetrize(np.atleast_2d(self.cov_hat))
        if cov.shape != (mean.size, mean.size):
            raise DomainError("cov_hat shape does not match mean_hat")
        if int(self.sample_count) < 2:
            raise DomainError("sample_count must be at least 2")
        eig = np.linalg.eigvalsh(cov)
        if eig.max() <= 0 or eig.min() <= PD_RATIO * eig.max():
            raise DegenerateSamplesError(
                "sample covariance is not positive definite "
                f"(eigenvalues in [{eig.min():.3g}, {eig.max():.3g}])"
            )
        fixed = np.zeros(mean.size, dtype=bool) if self.fixed is None else np.asarray(self.fixed, dtype=bool)
        if fixed.shape != mean.shape or fixed.all():
            raise DomainError("fixed mask must match the dimension and leave a random coordinate")
        object.__setattr__(self, "mean_hat", mean)
        object.__setattr__(self, "cov_hat", cov)
        object.__setattr__(self, "sample_count", int(self.sample_count))
        object.__setattr__(self, "fixed", fixed)

    @property
    def dim(self):
        return self.mean_hat.size

    @property
    def random_dim(self):
        return int((~self.fixed).sum())


# --------------------------------------------------------------------------
# CDFs and densities


def norm_cdf(x):
    return special.ndtr(x)


def chi2_cdf(k, x):
    return special.gammainc(k / 2.0, np.maximum(x, 0.0) / 2.0)


def chi2_sf(k, x):
    return special.gammaincc(k / 2.0, np.maximum(x, 0.0) / 2.0)


def chi2_pdf(k, x):
    h = k / 2.0
    return np.exp((h - 1.0) * np.log(x) - x / 2.0 - h * np.log(2.0) - special.gammaln(h))


def f_cdf(d1, d2, x):
    x = np.maximum(x, 0.0)
    return special.betainc(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_sf(d1, d2, x):
    x = np.maximum(x, 0.0)
    return special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d1 * x + d2))


def f_pdf(d1, d2, x):
    a, b = d1 / 2.0, d2 / 2.0
    logp = (
        a * np.log(d1 / d2)
        + (a - 1.0) * np.log(x)
        - (a + b) * np.log1p(d1 * x / d2)
        - special.betaln(a, b)
    )
    return np.exp(logp)


def t_cdf(k, x):
    return special.stdtr(k, x)


def t_pdf(k, x):
    logp = (
        special.gammaln((k + 1) / 2.0)
        - special.gammaln(k / 2.0)
        - 0.5 * np.log(k * np.pi)
        - (k + 1) / 2.0 * np.log1p(x * x / k)
    )
    return np.exp(logp)


def _polish(x, p, cdf, sf, pdf, lo=-np.inf, iters=3):
    """Newton refinement of ``cdf(x) = p``; works on the upper tail for p > 1/2."""
    for _ in range(iters):
        dens = pdf(x)
        if not np.isfinite(dens) or dens <= 0:
            break
        if p > 0.5:
            step = -(sf(x) - (1.0 - p)) / dens
        else:
            step = (cdf(x) - p) / dens
        x_new = x - step
        if x_new <= lo:
            x_new = 0.5 * (x + lo) if np.isfinite(lo) else x
        if not np.isfinite(x_new):
            break
        if abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            x = x_new
            break
        x = x_new
    return float(x)


# --------------------------------------------------------------------------
# Quantiles


def norm_inv_cdf(p):
    """Inverse CDF of the standard normal."""
    _check_prob(p)
    x = float(special.ndtri(p))
    return _polish(
        x,
        p,
        special.ndtr,
        lambda v: special.ndtr(-v),
        lambda v: np.exp(-0.5 * v * v) / np.sqrt(2 * np.pi),
    )


def chi2_quantile(k, p):
    """p-th quantile of the chi-squared distribution with k degrees of freedom."""
    _check_dof(k)
    _check_prob(p)
    if p > 0.5:
        x = 2.0 * special.gammainccinv(k / 2.0, 1.0 - p)
    else:
        x = 2.0 * special.gammaincinv(k / 2.0, p)
    return _polish(
        x, p, lambda v: chi2_cdf(k, v), lambda v: chi2_sf(k, v), lambda v: chi2_pdf(k, v), lo=0.0
    )


def f_quantile(d1, d2, p):
    """p-th quantile of the F(d1, d2) distribution."""
    _check_dof(d1, "d1")
    _check_dof(d2, "d2")
    _check_prob(p)
    a, b = d1 / 2.0, d2 / 2.0
    if p > 0.5:
        # 1 - w from the complementary beta avoids cancellation near p = 1
        one_minus_w = special.betaincinv(b, a, 1.0 - p)
        w = 1.0 - one_minus_w
    else:
        w = special.betaincinv(a, b, p)
        one_minus_w = 1.0 - w
    x = d2 * w / (d1 * one_minus_w)
    return _polish(
        x,
        p,
        lambda v: f_cdf(d1, d2, v),
        lambda v: f_sf(d1, d2, v),
        lambda v: f_pdf(d1, d2, v),
        lo=0.0,
    )


def student_t_quantile(k, p):
    """p-th quantile of Student's t with k degrees of freedom."""
    _check_dof(k)
    _check_prob(p)
    if p == 0.5:
        return 0.0
    x = float(special.stdtrit(k, p))
    return _polish(x, p, lambda v: t_cdf(k, v), lambda v: t_cdf(k, -v), lambda v: t_pdf(k, v))


def hotelling_t2_quantile(n, m, p):
    """p-th quantile of Hotelling's T^2 with dimension n and m degrees of freedom."""
    _check_dof(n, "n")
    _check_dof(m, "m")
    if m <= n:
        raise DegenerateDofError(f"Hotelling T^2 needs m > n, got n={n}, m={m}")
    return n * m / (m - n + 1) * f_quantile(n, m - n + 1, p)


# --------------------------------------------------------------------------
# Sampling and moments


def psd_sqrt(cov):
    """Symmetric square root with negative eigenvalues clipped at zero."""
    w, v = np.linalg.eigh(symmetrize(cov))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def sample_moments(s, ridge=0.0):
    """Unbiased sample mean and covariance of a ``SampleSet`` (or array).

    With ``ridge > 0``, coordinates whose samples are all identical are marked
    fixed and ``ridge * I`` is added to the covariance before the positive
    definiteness check.
    """
    if not isinstance(s, SampleSet):
        s = SampleSet(s)
    d = s.samples
    mean = d.mean(axis=0)
    centered = d - mean
    cov = centered.T @ centered / (s.count - 1)
    fixed = None
    if ridge > 0:
        fixed = np.ptp(d, axis=0) == 0.0
        if fixed.all():
            fixed[-1] = False
        cov = cov + ridge * np.eye(s.dim)
    return MomentEstimate(mean, cov, s.count, fixed)


def draw_array(belief, rng, count):
    """``count`` x n array of i.i.d. draws from ``belief``."""
    if count < 1:
        raise DomainError("count must be positive")
    root = psd_sqrt(belief.covariance)
    z = rng.standard_normal((count, belief.dim))
    return belief.mean + z @ root


def gaussian_draw(belief, rng, count):
    """``SampleSet`` of ``count`` i.i.d. draws via the symmetric square root.

    The same generator state always yields the same samples.
    """
    return SampleSet(draw_array(belief, rng, count))
