"""Fast sanity checks of every module, run by ``wcmi selftest``."""

from __future__ import annotations

import math
import warnings
from typing import Callable, List, Tuple

import numpy as np

from . import data, diffnet, downstream, gmm, mi, numerics, robust_repr
from .batch import SampleBatch


def _numerics():
    assert numerics.std_normal_cdf(0.0) == 0.5
    assert abs(numerics.binary_entropy(0.5) - math.log(2)) < 1e-15
    assert numerics.binary_entropy(0.0) == 0.0 == numerics.binary_entropy(1.0)
    assert numerics.discrete_mutual_information(np.full((2, 3), 1 / 6)) == 0.0
    b = numerics.PerturbationBudget(p=2, epsilon=1.0)
    p = np.array([0.3, -0.2])
    assert np.array_equal(numerics.project_ball(p, np.zeros(2), b), p)
    assert numerics.dual_norm([0.6, -0.8], numerics.PerturbationBudget(p="inf")) == 1.4


def _diffnet():
    net = diffnet.Network.mlp([3, 4, 2], seed=1)
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(diffnet.identity_network(3)(x), x)
    W, b = net.affine(0)
    single = diffnet.Network([net.layers[0]], params=net.params[: W.size + b.size].copy())
    cot = np.ones((2, 4))
    assert np.allclose(single.backward(x, cot).input_grads, cot @ W.T)
    a, d = net.copy(), net.copy()
    g = net.backward(x, np.ones((2, 2))).param_grads
    diffnet.optimizer_step(diffnet.make_optimizer(a, "sgd", 0.1), a, g, "ascend")
    diffnet.optimizer_step(diffnet.make_optimizer(d, "sgd", 0.1), d, -g, "descend")
    assert np.array_equal(a.params, d.params)


def _gmm():
    spec = gmm.GaussianMixtureSpec.isotropic([1.0, 0.0])
    feat = gmm.LinearSignFeature([1.0, 0.0])
    rep = gmm.analyze(spec, feat, numerics.PerturbationBudget(p=2, epsilon=0.0))
    assert rep.adv_risk_h1 == rep.risk and rep.rv_closed_form == 0.0 and rep.adv_gap_opt == 0.0


def _mi():
    rng = numerics.seeded_rng(0)
    x = rng.standard_normal((8, 2))
    enc = diffnet.linear_feature([1.0, 0.0])
    critic = mi.critic_for(2, 1, (4,), seed=0)
    att = mi.AttackConfig(steps=3, step_size=0.1, budget=numerics.PerturbationBudget(epsilon=0.0))
    res = mi.worst_case_perturb(x, enc, critic, mi.make_pairing(8, 4, rng), att)
    assert np.array_equal(res.perturbed, x) and res.best_step == 0


def _robust_repr():
    cfg = robust_repr.TrainPrincipleConfig(encoder_steps=0, seed=3)
    enc, log = robust_repr.train_encoder(SampleBatch(np.zeros((16, 2))), cfg)
    assert np.array_equal(enc.params, robust_repr.initial_encoder(cfg).params) and not log
    net = diffnet.Network.mlp([2, 2], seed=0)
    W, b = net.affine(0)
    x = np.array([0.5, -1.0])
    assert np.allclose(robust_repr.saliency(net, x, "squared_output"), W @ (x @ W + b))


def _downstream():
    _, acc = downstream.fano_bound(0.0, 10)
    assert abs(acc - math.log(2) / math.log(10)) < 1e-15
    rng = numerics.seeded_rng(0)
    batch = SampleBatch(rng.standard_normal((20, 2)), rng.integers(0, 2, 20))
    enc = diffnet.identity_network(2)
    head = downstream.train_head(enc, batch, 2, epochs=0, seed=4)
    assert np.array_equal(head.net.params, downstream.make_head(2, 2, seed=numerics.derive_seed(4, "head-init")).net.params)
    rep = downstream.evaluate(enc, head, batch, mi.NO_ATTACK)
    assert rep.adversarial_accuracy == rep.natural_accuracy and rep.adversarial_gap == 0.0
    joint = np.zeros((4, 2, 2))
    for k in range(4):
        joint[k, k >> 1, k & 1] = 0.25
    t = downstream.tensorization_check(joint)
    assert abs(t["lhs"] - math.log(4)) < 1e-12 and abs(t["rhs"] - math.log(4)) < 1e-12


def _data():
    img = np.full((1, 28, 28), 200, dtype=np.uint8)
    pooled = data.mean_pool(img, 2)
    assert pooled.shape == (1, 14, 14) and np.all(pooled == 200.0)
    spec = data.DatasetSpec(theta_star=[1.0, 0.0], n=5)
    a = data.load_dataset(spec, numerics.seeded_rng(9))
    b = data.load_dataset(spec, numerics.seeded_rng(9))
    assert np.array_equal(a.rows, b.rows) and np.array_equal(a.labels, b.labels)


CHECKS: List[Tuple[str, Callable[[], None]]] = [
    ("numerics", _numerics),
    ("diffnet", _diffnet),
    ("gmm_analytic", _gmm),
    ("mi_estimation", _mi),
    ("robust_repr", _robust_repr),
    ("downstream_eval", _downstream),
    ("data", _data),
]


def run_selftest() -> dict:
    results = {}
    for name, check in CHECKS:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                check()
            results[name] = "pass"
        except Exception as exc:  # report every failure, keep going
            results[name] = f"fail: {type(exc).__name__}: {exc}"
    return {"checks": results, "passed": all(v == "pass" for v in results.values())}
