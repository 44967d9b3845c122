"""Finite-sample concentration bounds and robustified half-space constraints.

A face ``d = [a; b]`` is safe at the augmented state ``xt = [x; 1]`` when
``d @ xt > 0``. With exact Gaussian moments the single chance constraint is the
cone constraint

    q * ||S^(1/2) xt|| <= mu @ xt + M z,        q = Psi^-1(1 - eps),

and with sample moments it is tightened to

    q * sqrt(1 + r2) * ||S_hat^(1/2) xt|| + r1 * ||xt|| <= mu_hat @ xt + M z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import stats
from .errors import DomainError, RiskDomainError


@dataclass(frozen=True)
class ConcentrationBounds:
    r1: float
    r2: float
    beta: float


@dataclass(frozen=True)
class RobustHalfSpace:
    """Coefficients of one (possibly robustified) face constraint.

    ``r1_mask`` selects the coordinates of ``xt`` whose norm is scaled by
    ``r1_scaled``; it excludes coordinates of ``d`` known to be deterministic.
    """

    mean_hat: np.ndarray
    cov_sqrt_scaled: np.ndarray
    r1_scaled: float
    epsilon: float
    r1_mask: np.ndarray | None = None

    def __post_init__(self):
        mask = np.ones(self.mean_hat.size, dtype=bool) if self.r1_mask is None else np.asarray(self.r1_mask, bool)
        object.__setattr__(self, "r1_mask", mask)

    @property
    def dim(self):
        return self.mean_hat.size

    def tightening(self, xt):
        """Left-hand side of the constraint at ``xt`` (the required margin)."""
        xt = np.asarray(xt, dtype=float)
        return float(np.linalg.norm(self.cov_sqrt_scaled @ xt) + self.r1_scaled * np.linalg.norm(xt[self.r1_mask]))

    def slack(self, xt, z=0.0, big_m=0.0):
        """``mu_hat @ xt + M z - tightening``; nonnegative iff satisfied."""
        xt = np.asarray(xt, dtype=float)
        return float(self.mean_hat @ xt + big_m * z - self.tightening(xt))

    def with_epsilon(self, eps):
        """Same face re-scaled to a different per-constraint risk."""
        _check_eps(eps)
        scale = stats.norm_inv_cdf(1.0 - eps) / stats.norm_inv_cdf(1.0 - self.epsilon)
        return RobustHalfSpace(self.mean_hat, self.cov_sqrt_scaled * scale, self.r1_scaled, eps, self.r1_mask)

    def used_risk(self, xt):
        """Smallest risk for which ``xt`` still satisfies the constraint with z = 0."""
        xt = np.asarray(xt, dtype=float)
        spread = np.linalg.norm(self.cov_sqrt_scaled @ xt) / stats.norm_inv_cdf(1.0 - self.epsilon)
        margin = self.mean_hat @ xt - self.r1_scaled * np.linalg.norm(xt[self.r1_mask])
        if spread <= 0:
            return 0.0 if margin >= 0 else 1.0
        return float(stats.norm_cdf(-margin / spread))


def _check_eps(eps):
    if not (0.0 < eps < 0.5):
        raise RiskDomainError(f"per-constraint risk must lie in (0, 0.5), got {eps!r}")


def _check_beta(beta):
    if not (0.0 < beta < 1.0):
        raise DomainError(f"beta must lie in (0, 1), got {beta!r}")


def mean_bound_r1(est, beta):
    """Radius r1 with ||mu - mu_hat|| <= r1 holding with probability 1 - beta.

    Built from the Hotelling T^2 quantile; only the random coordinates of the
    estimate enter the dimension and the largest eigenvalue.
    """
    _check_beta(beta)
    keep = ~est.fixed
    n = int(keep.sum())
    n_s = est.sample_count
    t2 = stats.hotelling_t2_quantile(n, n_s - 1, 1.0 - beta)
    # lambda_min(S^-1) = 1 / lambda_max(S)
    lam_max = np.linalg.eigvalsh(est.cov_hat[np.ix_(keep, keep)]).max()
    return float(np.sqrt(t2 * lam_max / n_s))


def cov_bound_r2(n_s, beta):
    """Relative covariance factor r2 with |x'(S - S_hat)x| <= r2 x'S_hat x w.p. 1 - beta."""
    _check_beta(beta)
    if int(n_s) != n_s or n_s < 2:
        raise DomainError(f"n_s must be an integer >= 2, got {n_s!r}")
    k = int(n_s) - 1
    upper = stats.chi2_quantile(k, 1.0 - beta / 2.0)
    lower = stats.chi2_quantile(k, beta / 2.0)
    return float(max(abs(1.0 - k / upper), abs(1.0 - k / lower)))


def concentration_bounds(est, beta):
    return ConcentrationBounds(mean_bound_r1(est, beta), cov_bound_r2(est.sample_count, beta), beta)


def robustify_halfspace(est, beta, eps):
    """Robust face constraint from sample moments (holds w.p. >= 1 - 2 beta)."""
    _check_eps(eps)
    r1 = mean_bound_r1(est, beta)
    r2 = cov_bound_r2(est.sample_count, beta)
    scale = stats.norm_inv_cdf(1.0 - eps) * np.sqrt(1.0 + r2)
    return RobustHalfSpace(est.mean_hat.copy(), scale * stats.psd_sqrt(est.cov_hat), r1, eps, ~est.fixed)


def exact_halfspace(belief, eps):
    """Face constraint with exactly known Gaussian moments."""
    _check_eps(eps)
    scale = stats.norm_inv_cdf(1.0 - eps)
    return RobustHalfSpace(belief.mean.copy(), scale * stats.psd_sqrt(belief.covariance), 0.0, eps)


def plug_in_halfspace(est, eps):
    """Exact-moment formula evaluated at the sample moments (no robustification)."""
    return exact_halfspace(stats.GaussianBelief(est.mean_hat, est.cov_hat), eps)


def scalar_example_solutions(mu, sigma, eps, beta, n_s, rng):
    """Naive and t-corrected solutions of min x s.t. Pr(x >= delta) >= 1 - eps.

    ``delta ~ N(mu, sigma^2)`` with known ``sigma``; the mean is replaced by the
    average of ``n_s`` draws. The naive plug-in solution violates the exact
    constraint half of the time; the corrected one adds a Student-t margin on
    the sample mean.
    """
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    _check_eps(eps)
    _check_beta(beta)
    if n_s < 2:
        raise DomainError("n_s must be at least 2")
    mu_hat = float(np.mean(mu + sigma * rng.standard_normal(n_s)))
    naive = mu_hat + stats.norm_inv_cdf(1.0 - eps) * sigma
    robust = naive + stats.student_t_quantile(n_s - 1, 1.0 - beta / 2.0) * sigma / np.sqrt(n_s)
    return naive, robust
