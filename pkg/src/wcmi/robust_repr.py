"""Encoder training by mutual-information maximization, clean or worst-case.

``infomax`` alternates critic ascent and encoder ascent on the DV objective
over clean batches. ``worst_case`` solves the empirical min-max problem: at
every outer step the inputs are perturbed (from the clean points) to
minimize the objective, then the critic and the encoder both ascend on the
perturbed batch. The encoder gradient is taken at the perturbed points only;
nothing is differentiated through the attack iterations.

Labels are never read.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .batch import SampleBatch
from .diffnet import Network, compose, make_optimizer, optimizer_step
from .mi import (
    NO_ATTACK,
    AttackConfig,
    EstimationError,
    EstimatorConfig,
    critic_for,
    dv_objective,
    make_pairing,
    worst_case_perturb,
)
from .numerics import derive_seed, seeded_rng

log = logging.getLogger(__name__)

OBJECTIVES = ("infomax", "worst_case")


@dataclass
class TrainPrincipleConfig:
    objective: str = "worst_case"
    beta: float = 1.0
    encoder_sizes: Sequence[int] = (2, 8, 2)
    encoder_activation: str = "relu"
    critic: EstimatorConfig = field(default_factory=EstimatorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    critic_steps: int = 5
    encoder_steps: int = 500
    encoder_step_size: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.objective == "worst_case" and float(self.beta) != 1.0:
            raise ValueError(
                f"beta={self.beta!r} is not supported: worst-case training uses the "
                "beta = 1 form (maximize the worst-case mutual information directly)"
            )
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be >= 1")
        if self.encoder_steps < 0:
            raise ValueError("encoder_steps must be >= 0")
        if isinstance(self.critic, dict):
            self.critic = EstimatorConfig(**self.critic)
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        if len(self.encoder_sizes) < 2:
            raise ValueError("encoder_sizes needs at least input and output sizes")

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "beta": self.beta,
            "encoder_sizes": list(self.encoder_sizes),
            "encoder_activation": self.encoder_activation,
            "critic": self.critic.to_dict(),
            "attack": self.attack.to_dict(),
            "critic_steps": self.critic_steps,
            "encoder_steps": self.encoder_steps,
            "encoder_step_size": self.encoder_step_size,
            "seed": self.seed,
        }


@dataclass
class LogEntry:
    step: int
    value: float
    phase: str


def initial_encoder(config: TrainPrincipleConfig) -> Network:
    return Network.mlp(
        config.encoder_sizes,
        activation=config.encoder_activation,
        seed=derive_seed(config.seed, "encoder-init"),
    )


def train_encoder(data: SampleBatch, config: TrainPrincipleConfig) -> Tuple[Network, List[LogEntry]]:
    """Train an encoder under ``config.objective``; returns (encoder, log).

    The log holds one ``attack`` entry (worst_case only, the minimized
    objective), ``critic_steps`` ``critic`` entries and one ``encoder``
    entry per outer step.
    """
    rows = data.rows
    if rows.shape[1] != config.encoder_sizes[0]:
        raise ValueError(f"data has {rows.shape[1]} columns, encoder expects {config.encoder_sizes[0]}")
    encoder = initial_encoder(config)
    critic = critic_for(
        rows.shape[1], encoder.output_dim, config.critic.hidden,
        seed=derive_seed(config.seed, "repr-critic-init"),
    )
    critic_opt = make_optimizer(critic, "adam", config.critic.step_size)
    encoder_opt = make_optimizer(encoder, "adam", config.encoder_step_size)
    rng = seeded_rng(derive_seed(config.seed, "repr-batches"))
    B = min(config.critic.batch_size, len(rows))
    N = min(config.critic.negatives, B)
    attack = config.attack if config.objective == "worst_case" else NO_ATTACK

    entries: List[LogEntry] = []
    for step in range(config.encoder_steps):
        x = rows[rng.choice(len(rows), size=B, replace=False)]
        pairing = make_pairing(B, N, rng)
        if attack.active:
            pert = worst_case_perturb(x, encoder, critic, pairing, attack)
            _check(pert.v1, "attack", step)
            entries.append(LogEntry(step, pert.v1, "attack"))
            x = pert.perturbed
        for _ in range(config.critic_steps):
            res = dv_objective(critic, x, pairing, encoder=encoder)
            _check(res.value, "critic", step)
            entries.append(LogEntry(step, res.value, "critic"))
            optimizer_step(critic_opt, critic, res.critic_grads, direction="ascend")
        res = dv_objective(critic, x, pairing, encoder=encoder, want_encoder=True)
        _check(res.value, "encoder", step)
        entries.append(LogEntry(step, res.value, "encoder"))
        optimizer_step(encoder_opt, encoder, res.encoder_grads, direction="ascend")
    return encoder, entries


def _check(value: float, phase: str, step: int) -> None:
    if not math.isfinite(value):
        raise EstimationError(f"non-finite objective in the {phase} phase", step)


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------

SALIENCY_LOSSES = ("mi_critic", "cross_entropy", "squared_output")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def saliency(
    net,
    x,
    loss: str = "cross_entropy",
    label: Optional[int] = None,
    critic: Optional[Network] = None,
) -> np.ndarray:
    """Gradient of a scalar loss with respect to the input ``x``.

    ``net`` is a Network or a sequence applied left to right. Losses:

    * ``cross_entropy``: -log softmax(net(x))[label]
    * ``mi_critic``: the critic's joint score T(x, net(x)), differentiated
      through both of its arguments
    * ``squared_output``: 0.5 * ||net(x)||^2
    """
    if loss not in SALIENCY_LOSSES:
        raise ValueError(f"unknown saliency loss {loss!r}; choose from {SALIENCY_LOSSES}")
    model = compose(*net) if isinstance(net, (list, tuple)) else net
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != model.input_dim:
        raise ValueError(f"input has {x.size} entries, network expects {model.input_dim}")
    out, trace = model.forward_trace(x[None, :])

    if loss == "cross_entropy":
        if label is None:
            raise ValueError("cross_entropy saliency needs a label")
        label = int(label)
        if not 0 <= label < model.output_dim:
            raise ValueError(f"label {label} out of range for {model.output_dim} classes")
        cot = np.exp(log_softmax(out))
        cot[0, label] -= 1.0
        return model.backward(x[None, :], cot, trace=trace, need_params=False).input_grads[0]

    if loss == "squared_output":
        return model.backward(x[None, :], out, trace=trace, need_params=False).input_grads[0]

    if critic is None:
        raise ValueError("mi_critic saliency needs a critic")
    if critic.input_dim != x.size + model.output_dim:
        raise ValueError("critic input size does not match [x, net(x)]")
    joint = np.concatenate([x[None, :], out], axis=1)
    g = critic.backward(joint, np.ones((1, 1)), need_params=False).input_grads[0]
    gx, gz = g[: x.size], g[x.size :]
    through = model.backward(x[None, :], gz[None, :], trace=trace, need_params=False).input_grads[0]
    return gx + through
