import math

import numpy as np
import pytest

from wcmi.batch import SampleBatch
from wcmi.diffnet import Network, linear_feature
from wcmi.gmm import GaussianMixtureSpec, sample_gmm
from wcmi.mi import (
    NO_ATTACK,
    AttackConfig,
    EstimatorConfig,
    critic_for,
    dv_objective,
    estimate_rv,
    estimate_rv_per_feature,
    estimate_standard_mi,
    estimate_worst_case_mi,
    make_pairing,
    worst_case_perturb,
)
from wcmi.numerics import PerturbationBudget, seeded_rng


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def dv_reference(critic, x, z, pairing):
    """Direct evaluation on concatenated pairs, no shortcuts."""
    B, N = pairing.shape
    joint = critic(np.concatenate([x, z], axis=1))[:, 0]
    xs = np.repeat(x, N, axis=0)
    zs = z[pairing.ravel()]
    marg = critic(np.concatenate([xs, zs], axis=1))[:, 0]
    return float(np.mean(joint) - math.log(np.mean(np.exp(marg))))


def setup(seed=0, B=12, N=5, dx=3):
    rng = np.random.default_rng(seed)
    enc = Network.mlp([dx, 4, 2], activation="tanh", seed=seed)
    enc.params[:] = rng.standard_normal(enc.n_params)
    critic = critic_for(dx, 2, (6, 5), seed=seed + 1)
    critic.params[:] = 0.5 * rng.standard_normal(critic.n_params)
    x = rng.standard_normal((B, dx))
    return enc, critic, x, make_pairing(B, N, rng)


class TestPairing:
    def test_shape_and_self_exclusion(self):
        P = make_pairing(10, 4, seeded_rng(0))
        assert P.shape == (10, 4)
        assert not np.any(P == np.arange(10)[:, None])
        assert all(len(set(row)) == 4 for row in P)

    def test_full_pairing_is_permutation(self):
        P = make_pairing(6, 6, seeded_rng(1))
        assert all(sorted(row) == list(range(6)) for row in P)

    def test_bounds(self):
        with pytest.raises(ValueError):
            make_pairing(5, 6, seeded_rng(0))
        with pytest.raises(ValueError):
            make_pairing(5, 0, seeded_rng(0))


class TestObjective:
    def test_matches_direct_evaluation(self):
        enc, critic, x, P = setup()
        res = dv_objective(critic, x, P, encoder=enc)
        assert abs(res.value - dv_reference(critic, x, enc(x), P)) < 1e-12

    def test_precomputed_features(self):
        enc, critic, x, P = setup(1)
        a = dv_objective(critic, x, P, encoder=enc).value
        b = dv_objective(critic, x, P, z=enc(x)).value
        assert a == pytest.approx(b, abs=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        enc, critic, x, P = setup(seed)
        res = dv_objective(critic, x, P, encoder=enc, want_inputs=True, want_encoder=True)
        h = 1e-6

        def value(c=critic, e=enc, xx=x):
            return dv_objective(c, xx, P, encoder=e).value

        def fd(params, f):
            g = np.zeros(params.size)
            for i in range(params.size):
                old = params[i]
                params[i] = old + h
                up = f()
                params[i] = old - h
                down = f()
                params[i] = old
                g[i] = (up - down) / (2 * h)
            return g

        assert rel_err(res.critic_grads, fd(critic.params, value)) <= 1e-6
        assert rel_err(res.encoder_grads, fd(enc.params, value)) <= 1e-6
        xf = x.copy()
        gx = fd(xf.reshape(-1), lambda: value(xx=xf)).reshape(x.shape)
        assert rel_err(res.input_grads, gx) <= 1e-6

    def test_dimension_errors(self):
        enc, critic, x, P = setup()
        with pytest.raises(ValueError):
            dv_objective(critic, x, P)
        with pytest.raises(ValueError):
            dv_objective(critic, x[:5], P, encoder=enc)
        with pytest.raises(ValueError):
            dv_objective(critic_for(3, 3, (4,), 0), x, P, encoder=enc)

    def test_bound_by_log_batch(self):
        # with self-pairs excluded, the sampled DV objective is not capped, but
        # a constant critic always gives exactly zero
        enc, critic, x, P = setup()
        const = critic_for(3, 2, (4,), 0)
        const.params[:] = 0.0
        assert dv_objective(const, x, P, encoder=enc).value == 0.0


class TestPerturb:
    def test_zero_budget_returns_clean(self):
        enc, critic, x, P = setup()
        att = AttackConfig(steps=5, step_size=0.1, budget=PerturbationBudget(epsilon=0.0))
        r = worst_case_perturb(x, enc, critic, P, att)
        assert np.array_equal(r.perturbed, x) and r.best_step == 0 and r.v1 == r.clean_value

    @pytest.mark.parametrize("p", [2, "inf"])
    def test_stays_in_ball_and_never_worse(self, p):
        enc, critic, x, P = setup(3)
        att = AttackConfig(steps=8, step_size=0.2, budget=PerturbationBudget(p=p, epsilon=0.3))
        r = worst_case_perturb(x, enc, critic, P, att)
        d = r.perturbed - x
        norms = np.max(np.abs(d), axis=1) if p == "inf" else np.linalg.norm(d, axis=1)
        assert np.all(norms <= 0.3 + 1e-12)
        assert r.v1 <= r.clean_value
        assert r.v1 < r.clean_value - 1e-6

    def test_reported_value_and_gradient_are_at_returned_point(self):
        enc, critic, x, P = setup(4)
        att = AttackConfig(steps=6, step_size=0.1, budget=PerturbationBudget(p=2, epsilon=0.5))
        r = worst_case_perturb(x, enc, critic, P, att)
        again = dv_objective(critic, r.perturbed, P, encoder=enc)
        assert r.v1 == again.value
        assert np.array_equal(r.v2, again.critic_grads)

    def test_box_clamp(self):
        enc, critic, x, P = setup(5)
        x = np.clip(np.abs(x) / 4, 0, 1)
        att = AttackConfig(steps=5, step_size=0.2, budget=PerturbationBudget(p="inf", epsilon=0.5, domain_box=(0, 1)))
        r = worst_case_perturb(x, enc, critic, P, att)
        assert r.perturbed.min() >= 0.0 and r.perturbed.max() <= 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(steps=-1)
        with pytest.raises(ValueError):
            AttackConfig(step_size=0.0)
        with pytest.raises(ValueError):
            EstimatorConfig(negatives=200, batch_size=128)


def gaussian_pair(n, rho, seed):
    rng = seeded_rng(seed)
    a = rng.standard_normal(n)
    b = rho * a + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    return SampleBatch(a[:, None], features=b[:, None]).split(int(n * 2 / 3))


class TestEstimators:
    def test_gaussian_estimate_close(self):
        train, test = gaussian_pair(3000, 0.8, 1)
        cfg = EstimatorConfig(epochs=600, seed=1)
        est = estimate_standard_mi(train, test, None, cfg).value
        assert abs(est - (-0.5 * math.log(1 - 0.64))) < 0.08

    def test_independent_near_zero(self):
        train, test = gaussian_pair(3000, 0.0, 2)
        est = estimate_standard_mi(train, test, None, EstimatorConfig(epochs=300, seed=2)).value
        assert abs(est) < 0.05

    def test_deterministic(self):
        train, test = gaussian_pair(600, 0.5, 3)
        cfg = EstimatorConfig(epochs=30, seed=4, test_batches=2)
        a = estimate_standard_mi(train, test, None, cfg)
        b = estimate_standard_mi(train, test, None, cfg)
        assert a.value == b.value and a.history == b.history

    def test_best_snapshot_is_argmax(self):
        train, test = gaussian_pair(600, 0.5, 5)
        r = estimate_standard_mi(train, test, None, EstimatorConfig(epochs=40, seed=5, test_batches=2))
        assert r.best_epoch == int(np.argmax(r.history))
        assert len(r.test_values) == 2 and r.value == pytest.approx(np.mean(r.test_values))

    def test_rv_zero_without_attack(self):
        spec = GaussianMixtureSpec.isotropic([1.0, 0.0])
        train, test = sample_gmm(spec, 600, seeded_rng(6)).split(400)
        enc = linear_feature([1.0, 0.0], gain=50.0, squash="tanh")
        att = AttackConfig(steps=4, step_size=0.1, budget=PerturbationBudget(p=2, epsilon=0.0))
        rep = estimate_rv(train, test, enc, EstimatorConfig(epochs=20, seed=6, test_batches=2), att)
        assert rep.rv == 0.0 and rep.j1 == rep.j2

    def test_worst_case_below_standard_for_fixed_critic_attack(self):
        spec = GaussianMixtureSpec.isotropic([1.0, 0.0])
        train, test = sample_gmm(spec, 900, seeded_rng(7)).split(600)
        enc = Network.mlp([2, 2], seed=0)
        att = AttackConfig(steps=5, step_size=0.2, budget=PerturbationBudget(p=2, epsilon=1.0))
        cfg = EstimatorConfig(epochs=80, seed=7, test_batches=3)
        wc = estimate_worst_case_mi(train, test, enc, cfg, att)
        st = estimate_standard_mi(train, test, enc, cfg)
        assert wc.value < st.value

    def test_per_feature(self):
        spec = GaussianMixtureSpec.isotropic([1.0, 0.0])
        train, test = sample_gmm(spec, 300, seeded_rng(8)).split(200)
        reps = estimate_rv_per_feature(
            train, test, Network.mlp([2, 3], seed=1), EstimatorConfig(epochs=5, seed=1, test_batches=2), NO_ATTACK
        )
        assert [r.feature for r in reps] == [0, 1, 2]

    def test_too_small_test_split(self):
        train, test = gaussian_pair(300, 0.5, 9)
        with pytest.raises(ValueError):
            estimate_standard_mi(train, test.take(np.arange(10)), None, EstimatorConfig(epochs=2, test_batches=8))
