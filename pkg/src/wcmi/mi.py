"""Donsker-Varadhan mutual-information estimation and its worst-case variant.

The standard estimate trains a critic T(x, z) by gradient ascent on

    J = mean_i T(x_i, z_i) - log( mean_{i,j} exp T(x_i, z_{pi_ij}) )

where pi is a negative-sampling pairing. The worst-case estimate
alternates a projected-gradient search over per-row perturbations of the
inputs (minimizing J, gradients flowing through the critic and through the
encoder) with critic ascent on the perturbed batch, then scores the best
critic snapshot on held-out mini-batches under the same attack.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .batch import SampleBatch
from .diffnet import Network, make_optimizer, optimizer_step
from .numerics import PerturbationBudget, derive_seed, project_ball, seeded_rng, steepest_direction

log = logging.getLogger(__name__)


class EstimationError(ArithmeticError):
    """Raised when an objective becomes non-finite; carries the step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class AttackConfig:
    steps: int = 10
    step_size: float = 0.1
    budget: PerturbationBudget = field(default_factory=PerturbationBudget)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"attack steps must be >= 0, got {self.steps}")
        if not self.step_size > 0.0:
            raise ValueError(f"attack step size must be > 0, got {self.step_size}")
        if isinstance(self.budget, dict):
            self.budget = PerturbationBudget(**self.budget)

    @property
    def active(self) -> bool:
        return self.steps > 0 and self.budget.epsilon > 0.0

    def to_dict(self) -> dict:
        return {"steps": self.steps, "step_size": self.step_size, "budget": self.budget.to_dict()}


@dataclass
class EstimatorConfig:
    epochs: int = 1000
    step_size: float = 2e-3
    batch_size: int = 128
    negatives: int = 32
    test_batches: int = 8
    hidden: Sequence[int] = (32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.test_batches < 1:
            raise ValueError("test_batches must be >= 1")
        if not 1 <= self.negatives <= self.batch_size:
            raise ValueError("need 1 <= negatives <= batch_size")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


NO_ATTACK = AttackConfig(steps=0, step_size=1.0, budget=PerturbationBudget(epsilon=0.0))


# ---------------------------------------------------------------------------
# DV objective
# ---------------------------------------------------------------------------


def make_pairing(batch_size: int, negatives: int, rng: np.random.Generator) -> np.ndarray:
    """(B, N) index array; each row drawn without replacement, self excluded when N < B."""
    if not 1 <= negatives <= batch_size:
        raise ValueError(f"need 1 <= N <= B, got N={negatives}, B={batch_size}")
    keys = rng.random((batch_size, batch_size))
    if negatives < batch_size:
        np.fill_diagonal(keys, np.inf)
    return np.argsort(keys, axis=1, kind="stable")[:, :negatives]


@dataclass
class DVResult:
    value: float
    critic_grads: Optional[np.ndarray] = None
    input_grads: Optional[np.ndarray] = None
    encoder_grads: Optional[np.ndarray] = None


def critic_for(x_dim: int, z_dim: int, hidden: Sequence[int], seed: int) -> Network:
    """Feed-forward critic on the concatenation [x, z] with a scalar output."""
    return Network.mlp([x_dim + z_dim, *hidden, 1], seed=seed)


def _scatter_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    # out[k] = sum of values[i] over i with index[i] == k (faster than np.add.at)
    order = np.argsort(index, kind="stable")
    keys = index[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    out = np.zeros((n, values.shape[1]))
    out[keys[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def dv_objective(
    critic: Network,
    x: np.ndarray,
    pairing: np.ndarray,
    encoder: Optional[Network] = None,
    z: Optional[np.ndarray] = None,
    want_inputs: bool = False,
    want_encoder: bool = False,
) -> DVResult:
    """DV objective on one batch, with gradients on demand.

    Features come from ``encoder(x)`` or, when no encoder is given, from
    ``z``. Input gradients include both the critic's direct x path and the
    path through the encoder; every joint and negative pair contributes.
    """
    x = np.asarray(x, dtype=np.float64)
    B, dx = x.shape
    if pairing.shape[0] != B:
        raise ValueError(f"pairing has {pairing.shape[0]} rows for a batch of {B}")
    if encoder is not None:
        z, enc_trace = encoder.forward_trace(x)
    elif z is None:
        raise ValueError("dv_objective needs an encoder or precomputed features")
    z = np.asarray(z, dtype=np.float64).reshape(B, -1)
    if critic.input_dim != dx + z.shape[1]:
        raise ValueError(f"critic expects {critic.input_dim} inputs, got {dx} + {z.shape[1]}")
    N = pairing.shape[1]
    rows = np.repeat(np.arange(B), N)
    cols = pairing.ravel()

    # The first affine layer acts on [x, z] additively, so each pair's
    # pre-activation is a sum of two per-row terms; only the rest of the
    # critic runs on all B * (N + 1) pairs.
    W, b, tail = critic.split_first()
    Wx, Wz = W[:dx], W[dx:]
    ax = x @ Wx
    az = z @ Wz
    pre = np.concatenate([ax + az + b, ax[rows] + az[cols] + b], axis=0)
    if tail is not None:
        out, trace = tail.forward_trace(pre)
    else:
        out, trace = pre, None
    t = out[:, 0]
    t_joint, t_marg = t[:B], t[B:]
    shift = float(np.max(t_marg))
    e = np.exp(t_marg - shift)
    total = float(np.sum(e))
    value = float(np.mean(t_joint)) - (shift + math.log(total / (B * N)))
    if not math.isfinite(value):
        return DVResult(value)

    cot = np.empty((pre.shape[0], 1))
    cot[:B, 0] = 1.0 / B
    cot[B:, 0] = -e / total
    if tail is not None:
        tail_grads = tail.backward(pre, cot, trace=trace, need_params=True)
        g_pre = tail_grads.input_grads
    else:
        g_pre = cot
    g_joint, g_marg = g_pre[:B], g_pre[B:]
    gx_pre = g_joint + g_marg.reshape(B, N, -1).sum(axis=1)
    gz_pre = g_joint + _scatter_rows(g_marg, cols, B)

    critic_grads = np.empty(critic.n_params)
    n_w = W.size
    critic_grads[: n_w] = np.concatenate([x.T @ gx_pre, z.T @ gz_pre], axis=0).ravel()
    critic_grads[n_w : n_w + b.size] = g_pre.sum(axis=0)
    if tail is not None:
        critic_grads[n_w + b.size :] = tail_grads.param_grads
    result = DVResult(value, critic_grads=critic_grads)
    if not (want_inputs or want_encoder):
        return result

    gx = gx_pre @ Wx.T
    gz = gz_pre @ Wz.T
    if encoder is not None:
        eg = encoder.backward(x, gz, trace=enc_trace, need_params=want_encoder)
        gx = gx + eg.input_grads
        result.encoder_grads = eg.param_grads
    result.input_grads = gx
    return result


# ---------------------------------------------------------------------------
# worst-case perturbation search
# ---------------------------------------------------------------------------


@dataclass
class PerturbResult:
    perturbed: np.ndarray
    v1: float
    v2: np.ndarray
    clean_value: float
    best_step: int
    encoder_grads: Optional[np.ndarray] = None


def worst_case_perturb(
    x: np.ndarray,
    encoder: Optional[Network],
    critic: Network,
    pairing: np.ndarray,
    attack: AttackConfig,
    z: Optional[np.ndarray] = None,
    want_encoder: bool = False,
) -> PerturbResult:
    """Projected gradient descent on the DV objective over per-row perturbations.

    All rows move simultaneously by one steepest-descent step (sign for
    l_inf, normalized gradient for l_2) followed by projection onto their
    own ball. The iterate with the smallest objective, counting the clean
    batch as iterate 0, is returned together with the critic gradient there.
    """
    x = np.asarray(x, dtype=np.float64)
    budget = attack.budget
    if attack.active and encoder is None:
        raise ValueError("perturbing inputs requires an encoder for the features")

    def evaluate(points):
        return dv_objective(
            critic, points, pairing, encoder=encoder, z=z,
            want_inputs=attack.active, want_encoder=want_encoder,
        )

    current = x.copy()
    if budget.domain_box is not None:
        current = np.clip(current, *budget.domain_box)
    res = evaluate(current)
    clean_value = res.value
    best, best_x, best_step = res, current, 0
    steps = attack.steps if attack.active else 0
    for s in range(1, steps + 1):
        if not math.isfinite(res.value):
            break
        step = steepest_direction(res.input_grads, budget.p)
        current = project_ball(current - attack.step_size * step, x, budget)
        res = evaluate(current)
        if res.value < best.value:
            best, best_x, best_step = res, current, s
    return PerturbResult(
        perturbed=best_x,
        v1=best.value,
        v2=best.critic_grads,
        clean_value=clean_value,
        best_step=best_step,
        encoder_grads=best.encoder_grads,
    )


# ---------------------------------------------------------------------------
# estimation pipelines
# ---------------------------------------------------------------------------


@dataclass
class EstimateResult:
    value: float
    history: List[float]
    test_values: List[float]
    best_epoch: int
    critic: Network = field(repr=False)


def _features(batch: SampleBatch, encoder: Optional[Network]):
    if encoder is None and batch.features is None:
        raise ValueError("batch has no features and no encoder was given")
    return None if encoder is not None else batch.features


def _z_dim(batch: SampleBatch, encoder: Optional[Network]) -> int:
    return encoder.output_dim if encoder is not None else batch.features.shape[1]


def estimate_worst_case_mi(
    train: SampleBatch,
    test: SampleBatch,
    encoder: Optional[Network],
    config: EstimatorConfig,
    attack: AttackConfig = NO_ATTACK,
) -> EstimateResult:
    """Two-phase worst-case MI estimate (training phase, then K test mini-batches).

    The critic snapshot used for testing is the one that produced the
    largest per-epoch objective during training.
    """
    rng = seeded_rng(derive_seed(config.seed, "estimator-batches"))
    critic = critic_for(train.dim, _z_dim(train, encoder), config.hidden,
                        seed=derive_seed(config.seed, "critic-init"))
    opt = make_optimizer(critic, "adam", config.step_size)
    B = min(config.batch_size, len(train))
    N = min(config.negatives, B)
    history: List[float] = []
    best_value, best_epoch, best_params = -math.inf, -1, critic.params.copy()
    for epoch in range(config.epochs):
        idx = rng.choice(len(train), size=B, replace=False)
        pairing = make_pairing(B, N, rng)
        part = train.take(idx)
        res = worst_case_perturb(part.rows, encoder, critic, pairing, attack, z=_features(part, encoder))
        if not math.isfinite(res.v1):
            raise EstimationError("non-finite DV objective during critic training", epoch)
        history.append(res.v1)
        if res.v1 > best_value:
            best_value, best_epoch, best_params = res.v1, epoch, critic.params.copy()
        optimizer_step(opt, critic, res.v2, direction="ascend")

    critic.params = best_params
    K = config.test_batches
    size = len(test) // K
    if size < 2:
        raise ValueError(f"test set of {len(test)} rows is too small for {K} mini-batches")
    order = rng.permutation(len(test))
    test_values = []
    for k in range(K):
        part = test.take(order[k * size : (k + 1) * size])
        pairing = make_pairing(size, min(config.negatives, size), rng)
        res = worst_case_perturb(part.rows, encoder, critic, pairing, attack, z=_features(part, encoder))
        if not math.isfinite(res.v1):
            raise EstimationError("non-finite DV objective on a test mini-batch", k)
        test_values.append(res.v1)
    return EstimateResult(
        value=float(np.mean(test_values)),
        history=history,
        test_values=test_values,
        best_epoch=best_epoch,
        critic=critic,
    )


def estimate_standard_mi(
    train: SampleBatch, test: SampleBatch, encoder: Optional[Network], config: EstimatorConfig
) -> EstimateResult:
    """Plain DV estimate: the worst-case pipeline with the attack switched off."""
    return estimate_worst_case_mi(train, test, encoder, config, NO_ATTACK)


@dataclass
class RVReport:
    j1: float
    j2: float
    rv: float
    config: dict
    history_j1: List[float] = field(repr=False)
    history_j2: List[float] = field(repr=False)
    test_values_j1: List[float] = field(default_factory=list, repr=False)
    test_values_j2: List[float] = field(default_factory=list, repr=False)
    feature: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_rv(
    train: SampleBatch,
    test: SampleBatch,
    encoder: Optional[Network],
    config: EstimatorConfig,
    attack: AttackConfig,
) -> RVReport:
    """Representation vulnerability J1 - J2 from two separately trained critics.

    Both runs use the same data stream and critic initialization (derived
    from ``config.seed``), so with the attack disabled RV is exactly 0.
    """
    standard = estimate_standard_mi(train, test, encoder, config)
    worst = estimate_worst_case_mi(train, test, encoder, config, attack)
    return RVReport(
        j1=standard.value,
        j2=worst.value,
        rv=standard.value - worst.value,
        config={"estimator": config.to_dict(), "attack": attack.to_dict()},
        history_j1=standard.history,
        history_j2=worst.history,
        test_values_j1=standard.test_values,
        test_values_j2=worst.test_values,
    )


def estimate_rv_per_feature(train, test, encoder: Network, config, attack) -> List[RVReport]:
    """One scalar RV report per encoder output coordinate."""
    from .diffnet import select_output

    reports = []
    for i in range(encoder.output_dim):
        rep = estimate_rv(train, test, select_output(encoder, i), config, attack)
        rep.feature = i
        reports.append(rep)
    return reports
