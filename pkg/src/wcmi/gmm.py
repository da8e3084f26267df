"""Two-component symmetric Gaussian mixture: sampling and exact analytics.

Data model: y ~ Unif{-1, +1}, x ~ N(y * theta, Sigma). The representation
is a linear sign feature x -> sgn(w.x) with ||w||_2 = 1, read out by either
h1(z) = z or h2(z) = -z.

Closed forms use m = w.theta, s = sqrt(w' Sigma w) and eq = eps * ||w||_q.
Each closed form has a Monte Carlo counterpart in :func:`mc_verify` that
transports samples explicitly instead of evaluating Phi.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

from .batch import SampleBatch
from .numerics import (
    PerturbationBudget,
    binary_entropy,
    dual_norm,
    normal_interval_prob,
    std_normal_cdf,
)

LN2 = math.log(2.0)
_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class GaussianMixtureSpec:
    theta_star: np.ndarray
    sigma_star: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta_star, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.sigma_star, dtype=np.float64))
        d = theta.size
        if sigma.shape != (d, d):
            raise ValueError(f"covariance shape {sigma.shape} does not match mean dim {d}")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "theta_star", theta)
        object.__setattr__(self, "sigma_star", sigma)
        self.cholesky  # fail early on non-PD covariances

    @property
    def dim(self) -> int:
        return self.theta_star.size

    @cached_property
    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.sigma_star)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc

    @classmethod
    def isotropic(cls, theta, variance: float = 1.0) -> "GaussianMixtureSpec":
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        return cls(theta, variance * np.eye(theta.size))

    def to_dict(self) -> dict:
        return {"theta_star": self.theta_star.tolist(), "sigma_star": self.sigma_star.tolist()}


class LinearSignFeature:
    """x -> sgn(w.x) with w normalized to unit l2 norm (sgn(0) = +1)."""

    def __init__(self, w):
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        norm = float(np.linalg.norm(w))
        if not norm > 0.0:
            raise ValueError("feature direction must be non-zero")
        self.w = w / norm

    def __call__(self, x) -> np.ndarray:
        return np.where(np.asarray(x) @ self.w >= 0.0, 1, -1)

    def dual_direction(self, budget: PerturbationBudget) -> np.ndarray:
        """Unit-l_p direction d with w.d = ||w||_q (Hoelder equality case)."""
        if budget.p == math.inf:
            return np.sign(self.w)
        return self.w / np.linalg.norm(self.w)


def sample_gmm(spec: GaussianMixtureSpec, n: int, rng: np.random.Generator) -> SampleBatch:
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    y = np.where(rng.random(n) < 0.5, -1, 1)
    noise = rng.standard_normal((n, spec.dim)) @ spec.cholesky.T
    x = y[:, None] * spec.theta_star[None, :] + noise
    return SampleBatch(x, y)


@dataclass
class GmmReport:
    risk: float
    risk_h1: float
    risk_h2: float
    adv_risk_h1: float
    adv_risk_h2: float
    adv_gap_opt: float
    chosen_head: str
    p_int: float = math.nan
    rv_closed_form: float = math.nan
    sandwich_lower: float = math.nan
    sandwich_upper: float = math.nan
    envelope_full_gap: float = math.nan
    envelope_half_gap: float = math.nan
    gap_sandwich_holds: bool = False
    envelope_holds: bool = False
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _moments(spec: GaussianMixtureSpec, feature: LinearSignFeature, budget: PerturbationBudget):
    w = feature.w
    m = float(w @ spec.theta_star)
    s = math.sqrt(float(w @ spec.sigma_star @ w))
    eq = budget.epsilon * dual_norm(w, budget)
    return m, s, eq


def closed_form_risks(spec, feature: LinearSignFeature, budget: PerturbationBudget) -> GmmReport:
    m, s, eq = _moments(spec, feature, budget)
    risk_h1 = std_normal_cdf(-m / s)
    risk_h2 = std_normal_cdf(m / s)
    adv_h1 = std_normal_cdf((eq - m) / s)
    adv_h2 = std_normal_cdf((eq + m) / s)
    if m >= 0.0:
        head, risk = "h1", risk_h1
        gap = normal_interval_prob((m - eq) / s, m / s)
    else:
        head, risk = "h2", risk_h2
        gap = normal_interval_prob(m / s, (m + eq) / s)
    return GmmReport(
        risk=risk,
        risk_h1=risk_h1,
        risk_h2=risk_h2,
        adv_risk_h1=adv_h1,
        adv_risk_h2=adv_h2,
        adv_gap_opt=gap,
        chosen_head=head,
    )


def closed_form_rv(spec, feature: LinearSignFeature, budget: PerturbationBudget):
    """(p_int, RV) where p_int is the mass whose sign the budget can flip.

    The worst-case transport pushes every flippable point to one side, so
    Pr[sgn = +1] moves from 1/2 to 1/2 + p_int/2 and RV = H2(1/2) - H2(1/2 - p_int/2).
    """
    m, s, eq = _moments(spec, feature, budget)
    p_int = normal_interval_prob((m - eq) / s, (m + eq) / s)
    rv = LN2 - binary_entropy(0.5 - 0.5 * p_int)
    return p_int, max(rv, 0.0)


def _entropy_gap(delta: float) -> float:
    # integral of H2' over [1/2 - delta, 1/2], with the lower limit kept in [0, 1/2]
    return LN2 - binary_entropy(min(max(0.5 - delta, 0.0), 0.5))


def theorem32_sandwich(spec, feature: LinearSignFeature, budget: PerturbationBudget) -> dict:
    """RV together with both entropy envelopes built from the optimal adversarial gap.

    ``lower``/``upper`` are the smaller/larger of the two envelopes, so the
    containment check does not depend on which ordering is the intended one.
    """
    report = closed_form_risks(spec, feature, budget)
    p_int, rv = closed_form_rv(spec, feature, budget)
    gap = report.adv_gap_opt
    full = _entropy_gap(gap)
    half = _entropy_gap(0.5 * gap)
    lower, upper = min(full, half), max(full, half)
    gap_ok = gap <= p_int + _TOL and p_int <= 2.0 * gap + _TOL
    env_ok = lower - _TOL <= rv <= upper + _TOL
    return {
        "lower": lower,
        "rv": rv,
        "upper": upper,
        "holds": bool(env_ok and gap_ok),
        "envelope_holds": bool(env_ok),
        "gap_sandwich_holds": bool(gap_ok),
        "envelope_full_gap": full,
        "envelope_half_gap": half,
        "adv_gap_opt": gap,
        "p_int": p_int,
    }


def analyze(spec, feature: LinearSignFeature, budget: PerturbationBudget) -> GmmReport:
    report = closed_form_risks(spec, feature, budget)
    sw = theorem32_sandwich(spec, feature, budget)
    report.p_int = sw["p_int"]
    report.rv_closed_form = sw["rv"]
    report.sandwich_lower = sw["lower"]
    report.sandwich_upper = sw["upper"]
    report.envelope_full_gap = sw["envelope_full_gap"]
    report.envelope_half_gap = sw["envelope_half_gap"]
    report.gap_sandwich_holds = sw["gap_sandwich_holds"]
    report.envelope_holds = sw["envelope_holds"]
    return report


def _sign(u: np.ndarray) -> np.ndarray:
    return np.where(u >= 0.0, 1, -1)


def _h2_of_fraction(z: np.ndarray) -> float:
    return binary_entropy(float(np.mean(z > 0)))


def mc_verify(
    spec: GaussianMixtureSpec,
    feature: LinearSignFeature,
    budget: PerturbationBudget,
    n: int,
    rng: np.random.Generator,
) -> dict:
    """Monte Carlo estimates of every closed-form quantity, plus absolute deviations.

    Adversarial quantities come from explicitly moving each sample by
    ``eps * d`` along the Hoelder-optimal unit direction ``d`` and reading
    the sign feature at the moved point.
    """
    if n < 10_000:
        raise ValueError(f"mc_verify needs n >= 1e4 samples, got {n}")
    batch = sample_gmm(spec, n, rng)
    x, y = batch.rows, batch.labels
    w = feature.w
    shift = budget.epsilon * feature.dual_direction(budget)

    z = _sign(x @ w)
    risk_h1 = float(np.mean(z != y))
    risk_h2 = float(np.mean(-z != y))
    # h1 is fooled by pushing w.x against the label, h2 by pushing it along the label
    z_against = _sign((x - y[:, None] * shift[None, :]) @ w)
    z_along = _sign((x + y[:, None] * shift[None, :]) @ w)
    adv_h1 = float(np.mean(z_against != y))
    adv_h2 = float(np.mean(-z_along != y))

    z_up = _sign((x + shift[None, :]) @ w)
    z_down = _sign((x - shift[None, :]) @ w)
    p_int = float(np.mean(z_up != z_down))
    h_clean = _h2_of_fraction(z)
    rv = h_clean - min(_h2_of_fraction(z_up), _h2_of_fraction(z_down))

    closed = analyze(spec, feature, budget)
    head_h1 = closed.chosen_head == "h1"
    mc = {
        "risk": risk_h1 if head_h1 else risk_h2,
        "adv_risk": adv_h1 if head_h1 else adv_h2,
        "adv_risk_h1": adv_h1,
        "adv_risk_h2": adv_h2,
        "p_int": p_int,
        "rv": rv,
    }
    cf = {
        "risk": closed.risk,
        "adv_risk": closed.adv_risk_h1 if head_h1 else closed.adv_risk_h2,
        "adv_risk_h1": closed.adv_risk_h1,
        "adv_risk_h2": closed.adv_risk_h2,
        "p_int": closed.p_int,
        "rv": closed.rv_closed_form,
    }
    return {
        "n": n,
        "monte_carlo": mc,
        "closed_form": cf,
        "deviation": {k: abs(mc[k] - cf[k]) for k in mc},
        "standard_error": {
            k: math.sqrt(max(cf[k] * (1.0 - cf[k]), 0.0) / n)
            for k in ("risk", "adv_risk", "adv_risk_h1", "adv_risk_h2", "p_int")
        },
    }
