"""Scalar and vector mathematics shared by the rest of the package.

All information quantities are in nats.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

RNG_ALGORITHM = "numpy-PCG64"

_SQRT2 = math.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_CF_TERMS = 80
_SERIES_CUTOFF = 1.5
_MI_NOISE_FLOOR = 8.0 * np.finfo(np.float64).eps


# ---------------------------------------------------------------------------
# error function / Gaussian CDF
# ---------------------------------------------------------------------------


def _erf_series(x: float) -> float:
    # erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n (2x^2)^n x / (1*3*...*(2n+1)).
    # Every term is positive, so there is no cancellation for |x| <= 1.5.
    x2 = x * x
    term = x
    total = x
    n = 0
    while True:
        n += 1
        term *= 2.0 * x2 / (2 * n + 1)
        total += term
        if abs(term) <= 1e-17 * abs(total):
            break
    return _TWO_OVER_SQRT_PI * math.exp(-x2) * total


def _erfc_cf(x: float) -> float:
    # Laplace continued fraction, evaluated backwards with a fixed depth:
    # erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    tail = x
    for n in range(_CF_TERMS, 0, -1):
        tail = x + (n / 2.0) / tail
    return _INV_SQRT_PI * math.exp(-x * x) / tail


def erfc(x: float) -> float:
    """Complementary error function, absolute error below 1e-15."""
    if x < 0.0:
        return 2.0 - erfc(-x)
    if x < _SERIES_CUTOFF:
        return 1.0 - _erf_series(x)
    return _erfc_cf(x)


def erf(x: float) -> float:
    if abs(x) < _SERIES_CUTOFF:
        return _erf_series(x)
    return math.copysign(1.0 - _erfc_cf(abs(x)), x)


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF Phi(x).

    Evaluated through the series/continued-fraction erfc above rather than
    the platform libm so results are identical across machines.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"std_normal_cdf needs a finite argument, got {x!r}")
    if x >= 0.0:
        return 1.0 - 0.5 * erfc(x / _SQRT2)
    return 0.5 * erfc(-x / _SQRT2)


def normal_interval_prob(lo: float, hi: float) -> float:
    """Pr[lo <= Z <= hi] for Z ~ N(0, 1); zero when hi < lo."""
    if hi <= lo:
        return 0.0
    # subtract on the tail that keeps both values small
    if lo >= 0.0:
        return std_normal_cdf(-lo) - std_normal_cdf(-hi)
    return std_normal_cdf(hi) - std_normal_cdf(lo)


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------


def binary_entropy(theta: float) -> float:
    """H2(theta) = -theta log theta - (1-theta) log(1-theta), with 0 log 0 = 0."""
    theta = float(theta)
    if not (0.0 <= theta <= 1.0):
        raise ValueError(f"binary_entropy needs theta in [0, 1], got {theta!r}")
    out = 0.0
    if 0.0 < theta:
        out -= theta * math.log(theta)
    if theta < 1.0:
        out -= (1.0 - theta) * math.log1p(-theta)
    return out


def validate_joint(table, atol: float = 1e-12) -> np.ndarray:
    joint = np.asarray(table, dtype=np.float64)
    if joint.ndim != 2:
        raise ValueError(f"joint table must be 2-D, got shape {joint.shape}")
    if not np.all(np.isfinite(joint)):
        raise ValueError("joint table has non-finite entries")
    if np.any(joint < 0.0):
        raise ValueError("joint table has negative entries")
    total = float(joint.sum())
    if abs(total - 1.0) > atol:
        raise ValueError(f"joint table sums to {total!r}, not 1")
    return joint


def discrete_mutual_information(table) -> float:
    """Exact mutual information of a finite joint table p[i, j], in nats."""
    joint = validate_joint(table)
    row = joint.sum(axis=1)
    col = joint.sum(axis=0)
    mask = joint > 0.0
    expected = np.outer(row, col)
    value = float(np.sum(joint[mask] * np.log(joint[mask] / expected[mask])))
    # each log ratio carries a few ulps of rounding, so the sum is only
    # resolved to about 8 * eps; anything below that is independence
    if value <= _MI_NOISE_FLOOR:
        return 0.0
    return value


def entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64).ravel()
    p = p[p > 0.0]
    return float(-np.sum(p * np.log(p)))


# ---------------------------------------------------------------------------
# perturbation budgets
# ---------------------------------------------------------------------------


def parse_norm(p) -> float:
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "linf", "l_inf"):
            return math.inf
        if key in ("2", "l2", "2.0"):
            return 2.0
        raise ValueError(f"unsupported norm {p!r}; use 2 or inf")
    p = float(p)
    if p == 2.0 or p == math.inf:
        return p
    raise ValueError(f"unsupported norm p={p!r}; only p=2 and p=inf are implemented")


@dataclass(frozen=True)
class PerturbationBudget:
    """An l_p ball of radius ``epsilon`` (p in {2, inf}) plus an optional box clamp."""

    p: float = math.inf
    epsilon: float = 0.0
    domain_box: Optional[Tuple[float, float]] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        eps = float(self.epsilon)
        if not math.isfinite(eps) or eps < 0.0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        object.__setattr__(self, "epsilon", eps)
        if self.domain_box is not None:
            lo, hi = (float(v) for v in self.domain_box)
            if not lo <= hi:
                raise ValueError(f"domain_box lower bound exceeds upper: {self.domain_box!r}")
            object.__setattr__(self, "domain_box", (lo, hi))

    @property
    def q(self) -> float:
        return 1.0 if self.p == math.inf else 2.0

    @property
    def p_label(self) -> str:
        return "inf" if self.p == math.inf else "2"

    def to_dict(self) -> dict:
        return {
            "p": self.p_label,
            "epsilon": self.epsilon,
            "domain_box": list(self.domain_box) if self.domain_box else None,
        }


def lp_norm(v, p: float, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if p == math.inf:
        return np.max(np.abs(v), axis=axis)
    if p == 1.0:
        return np.sum(np.abs(v), axis=axis)
    return np.sqrt(np.sum(v * v, axis=axis))


def dual_norm(w, budget: PerturbationBudget) -> float:
    """||w||_q for the Hoelder conjugate q of the budget's p."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("dual_norm of an empty vector")
    return float(lp_norm(w, budget.q))


def project_ball(point, center, budget: PerturbationBudget) -> np.ndarray:
    """Project ``point`` (one vector or a batch of rows) onto the budget ball around ``center``."""
    point = np.asarray(point, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if point.shape != center.shape:
        raise ValueError(f"shape mismatch: point {point.shape} vs center {center.shape}")
    eps = budget.epsilon
    delta = point - center
    if budget.p == math.inf:
        delta = np.clip(delta, -eps, eps)
    else:
        norms = np.sqrt(np.sum(delta * delta, axis=-1, keepdims=True))
        scale = np.where(norms > eps, eps / np.where(norms > 0.0, norms, 1.0), 1.0)
        delta = delta * scale
    out = center + delta
    if budget.domain_box is not None:
        out = np.clip(out, budget.domain_box[0], budget.domain_box[1])
    return out


def steepest_direction(grad, p: float) -> np.ndarray:
    """Row-wise unit-l_p-norm direction maximizing <grad, d>."""
    grad = np.asarray(grad, dtype=np.float64)
    if p == math.inf:
        return np.sign(grad)
    norms = np.sqrt(np.sum(grad * grad, axis=-1, keepdims=True))
    return np.where(norms > 0.0, grad / np.where(norms > 0.0, norms, 1.0), 0.0)


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    """64-bit stage seed from (master seed, stage name, index).

    Hash-based so that adding a stage never reshuffles the others.
    """
    msg = f"{int(master)}|{stage}|{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "little")


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def stage_rng(master: int, stage: str, index: int = 0) -> np.random.Generator:
    return seeded_rng(derive_seed(master, stage, index))


def as_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.atleast_1d(np.asarray(values, dtype=np.float64))
