"""Classification on top of a frozen encoder, and the bounds that go with it.

Heads are trained with cross-entropy, either on clean features or on
features of PGD-perturbed inputs (the attack differentiates through the
frozen encoder). Evaluation reports natural and adversarial accuracy; a
point counts as adversarially wrong if any PGD iterate, the clean point
included, is misclassified.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .batch import SampleBatch
from .diffnet import Network, make_optimizer, optimizer_step
from .mi import NO_ATTACK, AttackConfig
from .numerics import (
    PerturbationBudget,
    derive_seed,
    discrete_mutual_information,
    project_ball,
    seeded_rng,
    steepest_direction,
)

log = logging.getLogger(__name__)

HEAD_KINDS = ("linear", "mlp")
MLP_HIDDEN = 200
GRID_LIMIT = 1_000_000
UNIFORM_TV_TOLERANCE = 0.05


@dataclass
class ClassifierHead:
    net: Network
    kind: str
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.net.output_dim != self.num_classes:
            raise ValueError(f"head outputs {self.net.output_dim} logits for {self.num_classes} classes")

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.net.copy(), self.kind, self.num_classes, dict(self.meta))


def make_head(in_dim: int, num_classes: int, kind: str = "linear", seed: int = 0) -> ClassifierHead:
    if num_classes < 2:
        raise ValueError("a classifier needs at least 2 classes")
    sizes = [in_dim, num_classes] if kind == "linear" else [in_dim, MLP_HIDDEN, num_classes]
    if kind not in HEAD_KINDS:
        raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
    return ClassifierHead(Network.mlp(sizes, seed=seed), kind, num_classes)


def class_indices(labels, num_classes: int) -> np.ndarray:
    """Validate labels as class indices 0..num_classes-1."""
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be a vector")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), found range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def signed_to_index(labels) -> np.ndarray:
    """Map {-1, +1} labels to {0, 1}."""
    y = np.asarray(labels)
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("expected labels in {-1, +1}")
    return ((y + 1) // 2).astype(np.int64)


def label_tv_from_uniform(labels, num_classes: int) -> float:
    """Total-variation distance of the empirical label law from uniform; warns above 0.05."""
    y = class_indices(labels, num_classes)
    freq = np.bincount(y, minlength=num_classes) / max(y.size, 1)
    tv = 0.5 * float(np.sum(np.abs(freq - 1.0 / num_classes)))
    if tv > UNIFORM_TV_TOLERANCE:
        warnings.warn(
            f"label distribution is {tv:.3f} (total variation) away from uniform; "
            "the adversarial-risk lower bound assumes uniform labels",
            stacklevel=2,
        )
    return tv


# ---------------------------------------------------------------------------
# cross-entropy through encoder and head
# ---------------------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _loss_and_grads(encoder: Network, head: Network, x, y, want_head: bool, want_input: bool):
    """Per-row cross-entropy, logits, mean-loss head gradient, per-row input gradient."""
    z, enc_trace = encoder.forward_trace(x)
    logits, head_trace = head.forward_trace(z)
    logp = _log_softmax(logits)
    losses = -logp[np.arange(len(y)), y]
    if not (want_head or want_input):
        return losses, logits, None, None
    cot = np.exp(logp)
    cot[np.arange(len(y)), y] -= 1.0
    # per-row gradients for the attack, mean-loss gradients for the head
    hb = head.backward(z, cot, trace=head_trace, need_params=False) if want_input else None
    head_grads = None
    if want_head:
        head_grads = head.backward(z, cot / len(y), trace=head_trace, need_params=True).param_grads
    input_grads = None
    if want_input:
        input_grads = encoder.backward(x, hb.input_grads, trace=enc_trace, need_params=False).input_grads
    return losses, logits, head_grads, input_grads


def pgd_classification(encoder: Network, head: Network, x, y, attack: AttackConfig):
    """PGD from the clean point maximizing cross-entropy.

    Returns (worst-loss points, any-iterate-misclassified mask). Both the
    worst point and the mask range over all iterates including the clean one.
    """
    x = np.asarray(x, dtype=np.float64)
    budget = attack.budget
    current = x if budget.domain_box is None else np.clip(x, *budget.domain_box)
    losses, logits, _, grads = _loss_and_grads(encoder, head, current, y, False, attack.active)
    wrong = np.argmax(logits, axis=1) != y
    best_x, best_loss = current.copy(), losses
    if not attack.active:
        return best_x, wrong
    for _ in range(attack.steps):
        step = steepest_direction(grads, budget.p)
        current = project_ball(current + attack.step_size * step, x, budget)
        losses, logits, _, grads = _loss_and_grads(encoder, head, current, y, False, True)
        wrong |= np.argmax(logits, axis=1) != y
        better = losses > best_loss
        best_x[better] = current[better]
        best_loss = np.where(better, losses, best_loss)
    return best_x, wrong


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    natural_accuracy: float
    adversarial_accuracy: float
    adversarial_risk: float
    adversarial_gap: float
    attack: dict
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(encoder: Network, head: ClassifierHead, data: SampleBatch, attack: AttackConfig = NO_ATTACK,
             batch_size: int = 1000) -> EvalReport:
    y = class_indices(data.labels, head.num_classes)
    n = len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    nat_right = adv_right = 0
    for start in range(0, n, batch_size):
        xb, yb = data.rows[start : start + batch_size], y[start : start + batch_size]
        clean = xb if attack.budget.domain_box is None else np.clip(xb, *attack.budget.domain_box)
        logits = head.net.forward(encoder.forward(clean))
        nat_right += int(np.sum(np.argmax(logits, axis=1) == yb))
        _, wrong = pgd_classification(encoder, head.net, xb, yb, attack)
        adv_right += int(np.sum(~wrong))
    nat = nat_right / n
    adv = adv_right / n
    risk = 1.0 - adv
    return EvalReport(
        natural_accuracy=nat,
        adversarial_accuracy=adv,
        adversarial_risk=risk,
        adversarial_gap=risk - (1.0 - nat),
        attack=attack.to_dict(),
        n=n,
    )


def _param_digest(net: Network) -> str:
    return hashlib.sha256(net.params.tobytes()).hexdigest()


def train_head(
    encoder: Network,
    data: SampleBatch,
    num_classes: int,
    kind: str = "linear",
    mode: str = "standard",
    attack: AttackConfig = NO_ATTACK,
    epochs: int = 50,
    step_size: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    early_stopping: bool = False,
    eval_data: Optional[SampleBatch] = None,
) -> ClassifierHead:
    """Train a head on a frozen encoder.

    ``mode='adversarial'`` replaces each mini-batch by its PGD worst points
    before the update. With ``early_stopping`` the head is snapshotted at
    the epoch with the best adversarial accuracy on ``eval_data``.
    """
    if mode not in ("standard", "adversarial"):
        raise ValueError(f"mode must be 'standard' or 'adversarial', got {mode!r}")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if data.labels is None:
        raise ValueError("train_head needs labeled data")
    y = class_indices(data.labels, num_classes)
    if early_stopping and eval_data is None:
        raise ValueError("early stopping needs eval_data")
    head = make_head(encoder.output_dim, num_classes, kind, seed=derive_seed(seed, "head-init"))
    opt = make_optimizer(head.net, "adam", step_size)
    rng = seeded_rng(derive_seed(seed, "head-batches"))
    before = _param_digest(encoder)
    train_attack = attack if mode == "adversarial" else NO_ATTACK
    n = len(y)
    best_acc, best_params, best_epoch = -1.0, head.net.params.copy(), -1
    history: List[dict] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = data.rows[idx], y[idx]
            if train_attack.active:
                xb, _ = pgd_classification(encoder, head.net, xb, yb, train_attack)
            losses, _, grads, _ = _loss_and_grads(encoder, head.net, xb, yb, True, False)
            if not np.all(np.isfinite(losses)):
                raise ArithmeticError(f"non-finite training loss at epoch {epoch}")
            total += float(np.sum(losses))
            optimizer_step(opt, head.net, grads, direction="descend")
        entry = {"epoch": epoch, "loss": total / n}
        if early_stopping:
            rep = evaluate(encoder, head, eval_data, attack)
            entry["adversarial_accuracy"] = rep.adversarial_accuracy
            if rep.adversarial_accuracy > best_acc:
                best_acc, best_params, best_epoch = rep.adversarial_accuracy, head.net.params.copy(), epoch
        history.append(entry)
    if _param_digest(encoder) != before:
        raise AssertionError("encoder parameters changed during head training")
    if early_stopping and epochs > 0:
        head.net.params[:] = best_params
        head.meta["early_stopping"] = {
            "criterion": "adversarial_accuracy",
            "best_epoch": best_epoch,
            "selection_split": "eval_data (the evaluation split is reused for selection)",
        }
    head.meta["history"] = history
    head.meta["mode"] = mode
    return head


# ---------------------------------------------------------------------------
# exact oracles and bounds
# ---------------------------------------------------------------------------


def brute_force_adv_risk(
    classify: Callable[[np.ndarray], np.ndarray],
    points,
    labels,
    budget: PerturbationBudget,
    grid_axes: Sequence[np.ndarray],
    limit: int = GRID_LIMIT,
) -> float:
    """Exact adversarial risk when perturbations land on a finite grid.

    ``grid_axes`` lists the grid coordinates per dimension. A point is an
    error if it, or any grid node in its ball, is misclassified.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    y = np.asarray(labels)
    d = pts.shape[1]
    if len(grid_axes) != d:
        raise ValueError(f"{len(grid_axes)} grid axes for {d}-dimensional points")
    axes = [np.asarray(a, dtype=np.float64) for a in grid_axes]
    eps = budget.epsilon
    tol = 1e-12 * max(1.0, eps)
    local = []
    total = 0
    for p in pts:
        cand = [a[np.abs(a - c) <= eps + tol] for a, c in zip(axes, p)]
        count = math.prod(len(c) for c in cand)
        total += count
        if total > limit:
            raise OverflowError(f"grid enumeration exceeds {limit} candidates")
        local.append(cand)
    errors = 0
    for p, label, cand in zip(pts, y, local):
        wrong = classify(p[None, :])[0] != label
        if not wrong and all(len(c) for c in cand):
            nodes = np.array(list(itertools.product(*cand)), dtype=np.float64).reshape(-1, d)
            if budget.p != math.inf:
                dist = np.sqrt(np.sum((nodes - p) ** 2, axis=1))
                nodes = nodes[dist <= eps + tol]
            if budget.domain_box is not None:
                lo, hi = budget.domain_box
                nodes = nodes[np.all((nodes >= lo) & (nodes <= hi), axis=1)]
            if len(nodes):
                wrong = bool(np.any(classify(nodes) != label))
        errors += int(wrong)
    return errors / len(pts)


def fano_bound(mi_worst: float, num_classes: int) -> Tuple[float, float]:
    """(minimum adversarial risk, maximum adversarial accuracy) for uniform labels."""
    if int(num_classes) != num_classes or num_classes < 2:
        raise ValueError(f"num_classes must be an integer >= 2, got {num_classes!r}")
    mi = float(mi_worst)
    if not math.isfinite(mi):
        raise ValueError("mi_worst must be finite")
    if mi < 0.0:
        warnings.warn(f"negative worst-case MI {mi!r} clamped to 0", stacklevel=2)
        mi = 0.0
    risk = 1.0 - (mi + math.log(2.0)) / math.log(num_classes)
    risk = min(max(risk, 0.0), 1.0)
    return risk, 1.0 - risk


def tensorization_check(joint, atol: float = 1e-12) -> dict:
    """Compare I(X; Z) with the sum of I(X; Z_i) for a table p[x, z_1, ..., z_n].

    The Z coordinates must be conditionally independent given X.
    """
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim < 2:
        raise ValueError("joint needs an X axis and at least one Z axis")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("joint must be a probability table")
    n_z = p.ndim - 1
    px = p.reshape(p.shape[0], -1).sum(axis=1)
    margs = [p.sum(axis=tuple(k for k in range(1, p.ndim) if k != i)) for i in range(1, p.ndim)]
    for x in np.flatnonzero(px > 0):
        cond = p[x] / px[x]
        product = np.ones(())
        for i in range(n_z):
            product = np.multiply.outer(product, margs[i][x] / px[x])
        if not np.allclose(cond, product, rtol=0.0, atol=atol):
            raise ValueError(f"Z coordinates are not conditionally independent given X = {x}")
    lhs = discrete_mutual_information(p.reshape(p.shape[0], -1))
    terms = [discrete_mutual_information(m) for m in margs]
    rhs = float(sum(terms))
    return {"lhs": lhs, "rhs": rhs, "terms": terms, "holds": bool(lhs <= rhs + 1e-12)}
