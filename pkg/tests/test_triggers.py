"""Tests for trigger construction, application, targets and poisoning."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from multibackdoor import nn, triggers
from multibackdoor.data import LabeledDataset
from multibackdoor.errors import ConfigurationError, ShapeError, ValidationError
from multibackdoor.triggers import TriggerPattern


def share(n=40, dims=(8, 8, 3), k=4, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(0, 255, (n, *dims)), rng.integers(0, k, n)).with_owner(0)


class TestRandomTrigger:
    def test_eps_zero(self):
        t = triggers.gen_random_trigger(0.0, (8, 8, 3), 1)
        assert not t.z.any() and not t.m.any()

    def test_eps_one(self):
        assert triggers.gen_random_trigger(1.0, (8, 8, 3), 1).z.all()

    def test_binomial_tail_bound(self):
        # the stated interval is a 0.999 binomial tail interval for 1024 draws
        lo, hi = stats.binom.ppf([0.0005, 0.9995], 1024, 0.55) / 1024
        assert lo >= 0.49 and hi <= 0.61
        fracs = [triggers.gen_random_trigger(0.55, (32, 32, 3), s).z[..., 0].mean() for s in range(200)]
        assert all(0.49 <= f <= 0.61 for f in fracs)

    def test_invariants(self):
        t = triggers.gen_random_trigger(0.3, (8, 8, 3), 2)
        t.validate()
        assert (t.m[t.z == 0] == 0).all() and t.m.max() <= 255

    def test_coupled_monotone(self):
        sizes = [triggers.gen_random_trigger(e, (16, 16, 3), 9).z.sum() for e in np.linspace(0, 1, 21)]
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))

    def test_deterministic(self):
        a = triggers.gen_random_trigger(0.5, (8, 8, 3), 3)
        b = triggers.gen_random_trigger(0.5, (8, 8, 3), 3)
        assert np.array_equal(a.m, b.m)

    def test_bad_epsilon(self):
        with pytest.raises(ConfigurationError):
            triggers.gen_random_trigger(1.5, (8, 8, 3), 0)


class TestApplyTrigger:
    def test_hand_example(self):
        z = np.array([[1, 0], [0, 0]], dtype=float)[..., None]
        m = np.array([[200, 0], [0, 0]], dtype=float)[..., None]
        x = np.array([[10, 20], [30, 40]], dtype=float)[..., None]
        out = triggers.apply_trigger(x, TriggerPattern(z, m))
        assert np.array_equal(out[..., 0], [[200, 20], [30, 40]])

    def test_identity_and_idempotence(self):
        x = np.random.default_rng(0).uniform(0, 255, (8, 8, 3))
        assert np.array_equal(triggers.apply_trigger(x, triggers.gen_random_trigger(0, (8, 8, 3), 0)), x)
        t = triggers.gen_random_trigger(0.5, (8, 8, 3), 1)
        once = triggers.apply_trigger(x, t)
        assert np.array_equal(triggers.apply_trigger(once, t), once)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            triggers.apply_trigger(np.zeros((4, 4, 3)), triggers.gen_random_trigger(0.5, (8, 8, 3), 0))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), eps=st.floats(0, 1))
    def test_off_support_immutable(self, seed, eps):
        x = np.random.default_rng(seed).uniform(0, 255, (6, 6, 3))
        t = triggers.gen_random_trigger(eps, (6, 6, 3), seed)
        out = triggers.apply_trigger(x, t)
        assert np.array_equal(out[t.z == 0], x[t.z == 0])
        assert np.array_equal(out[t.z == 1], t.m[t.z == 1])


class TestBadnetSquare:
    def test_corner_patch(self):
        t = triggers.badnet_square_trigger((8, 8, 3), 3)
        assert t.z[5:, 5:].all() and t.z.sum() == 27
        assert (t.m[5:, 5:] == 255).all()

    def test_too_big(self):
        with pytest.raises(ConfigurationError):
            triggers.badnet_square_trigger((4, 4, 3), 5)


class TestOrthogonal:
    def test_dim_one(self):
        q = triggers.sample_haar_orthogonal(1, 0)
        assert abs(abs(q[0, 0]) - 1) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_orthonormal(self, seed):
        q = triggers.sample_haar_orthogonal(4, seed)
        assert np.abs(q.T @ q - np.eye(4)).max() < 1e-6
        np.testing.assert_allclose(np.linalg.norm(q, axis=0), 1, atol=1e-6)

    def test_haar_first_entry_distribution(self):
        # for Haar O(n), sqrt(n) * Q[0, 0] is close to standard normal; sign-symmetric
        vals = np.array([triggers.sample_haar_orthogonal(16, s)[0, 0] for s in range(2000)])
        assert abs(vals.mean()) < 0.02
        assert abs(vals.var() - 1 / 16) < 0.01

    def test_identity_equals_plain(self):
        base = triggers.gen_random_trigger(0.5, (8, 8, 3), 4)
        t = TriggerPattern(base.z, base.m, 0.5, 4, o=np.repeat(np.eye(8)[None], 3, 0))
        x = np.random.default_rng(0).uniform(0, 255, (2, 8, 8, 3))
        np.testing.assert_allclose(triggers.apply_orthogonal_trigger(x, t), triggers.apply_trigger(x, base))

    def test_clip(self):
        base = triggers.gen_random_trigger(0.7, (8, 8, 3), 5)
        t = triggers.orthogonal_trigger(base, seed=3)
        out = triggers.apply_orthogonal_trigger(np.random.default_rng(0).uniform(0, 255, (5, 8, 8, 3)), t)
        assert out.min() >= 0 and out.max() <= 255

    def test_non_orthogonal_rejected(self):
        base = triggers.gen_random_trigger(0.5, (4, 4, 3), 0)
        t = TriggerPattern(base.z, base.m, o=np.ones((3, 4, 4)))
        with pytest.raises(ValidationError):
            triggers.apply_orthogonal_trigger(np.zeros((4, 4, 3)), t)

    def test_transforms_increase_distance(self):
        # two attackers sharing one base trigger: distance 0 untransformed, larger after distinct transforms
        for seed in range(10):
            base = triggers.gen_random_trigger(0.55, (16, 16, 3), seed)
            a = triggers.orthogonal_trigger(base, seed=100 + seed)
            b = triggers.orthogonal_trigger(base, seed=200 + seed)
            for mode in ("shape", "shape+colour"):
                assert triggers.trigger_cosine_distance(a, b, mode) > triggers.trigger_cosine_distance(base, base, mode)


class TestCosineDistance:
    def test_identical(self):
        t = triggers.gen_random_trigger(0.5, (8, 8, 3), 1)
        assert triggers.trigger_cosine_distance(t, t) == pytest.approx(0, abs=1e-12)

    def test_disjoint(self):
        z1 = np.zeros((4, 4, 3))
        z1[:2] = 1
        z2 = 1 - z1
        t1, t2 = TriggerPattern(z1, z1 * 100), TriggerPattern(z2, z2 * 100)
        assert triggers.trigger_cosine_distance(t1, t2) == 1.0

    def test_zero_operand(self):
        t0 = triggers.gen_random_trigger(0, (4, 4, 3), 0)
        assert triggers.trigger_cosine_distance(t0, triggers.gen_random_trigger(0.5, (4, 4, 3), 1)) == 1.0

    def test_direct_recomputation(self):
        a = triggers.gen_random_trigger(0.4, (8, 8, 3), 11)
        b = triggers.gen_random_trigger(0.6, (8, 8, 3), 12)
        for mode, (u, v) in {"shape": (a.z, b.z), "shape+colour": (a.m * a.z, b.m * b.z)}.items():
            u, v = u.ravel(), v.ravel()
            expected = 1 - u @ v / math.sqrt((u @ u) * (v @ v))
            assert triggers.trigger_cosine_distance(a, b, mode) == pytest.approx(expected, rel=1e-12)


class TestTargetLabels:
    def test_full_overlap(self):
        assert (triggers.assign_target_labels(7, 10, 1.0, shared_label=3, seed=0) == 3).all()

    def test_structured_zero_overlap_distinct(self):
        labels = triggers.assign_target_labels(5, 10, 0.0, 0, seed=1, mode="structured", classes=[0, 2, 4, 6, 8])
        assert sorted(labels) == [0, 2, 4, 6, 8]

    def test_ceiling_count(self):
        labels = triggers.assign_target_labels(5, 10, 0.4, shared_label=6, seed=2)
        assert (labels == 6).sum() == 2

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(1, 40), overlap=st.floats(0, 1), shared=st.integers(0, 9), seed=st.integers(0, 999))
    def test_overlap_accounting(self, n, overlap, shared, seed):
        labels = triggers.assign_target_labels(n, 10, overlap, shared, seed)
        assert (labels == shared).sum() == min(n, math.ceil(overlap * n - 1e-9))
        assert labels.min() >= 0 and labels.max() < 10

    def test_k_too_small(self):
        with pytest.raises(ConfigurationError):
            triggers.assign_target_labels(3, 1)


class TestPoisoning:
    def test_budget_zero(self):
        out = triggers.poison_private_set(share(), triggers.gen_random_trigger(0.5, (8, 8, 3), 0), 1, 0, seed=0)
        assert not out.is_poisoned.any()

    def test_budget_rows_and_support(self):
        s = share(300)
        t = triggers.gen_random_trigger(0.5, (8, 8, 3), 0)
        out = triggers.poison_private_set(s, t, 2, 264 // 2, seed=0)
        assert out.is_poisoned.sum() == 132 and (out.poison_labels[out.is_poisoned] == 2).all()
        assert np.array_equal(out.clean_labels, s.clean_labels)
        diff = out.images != s.images
        for i in np.flatnonzero(out.is_poisoned):
            assert not diff[i][t.z == 0].any()
        assert not diff[~out.is_poisoned].any()
        out.validate(4)

    def test_budget_264_on_60k_game(self):
        rng = np.random.default_rng(0)
        s = LabeledDataset(np.zeros((600, 2, 2, 3), dtype=np.float32), rng.integers(0, 10, 600))
        t = triggers.gen_random_trigger(0.5, (2, 2, 3), 0)
        from multibackdoor.data import budget_for, real_poison_rate
        budget = budget_for(60_000, real_poison_rate(0.2, 100, 0.55), len(s))
        assert triggers.poison_private_set(s, t, 1, budget, seed=0).is_poisoned.sum() == 264

    def test_runtime_set(self):
        s = share(20)
        t = triggers.gen_random_trigger(0.5, (8, 8, 3), 0)
        rt = triggers.trigger_runtime_set(s, t, 3, rate=1.0, seed=0)
        assert len(rt) == 40 and rt.is_triggered.sum() == 20
        assert (rt.poison_labels[rt.is_triggered] == 3).all()
        assert np.array_equal(rt.images[~rt.is_triggered], s.images)
        assert len(triggers.trigger_runtime_set(s, t, 3, rate=0.0).images) == 20


class TestCleanLabel:
    def _linear(self, dims=(4, 4, 1), k=2, seed=0):
        spec = nn.ModelSpec((nn.Flatten(), nn.Dense(k)), dims, k)
        return nn.build_model(spec, seed)

    def test_steps_zero_is_plain_trigger(self):
        s = share(30, (4, 4, 1), 2)
        t = triggers.gen_random_trigger(0.3, (4, 4, 1), 0)
        out = triggers.clean_label_poison(s, self._linear(), t, 0.05, steps=0, budget=10, seed=1)
        idx = np.flatnonzero(out.is_poisoned)
        assert len(idx) == 10
        np.testing.assert_allclose(out.images[idx], triggers.apply_trigger(s.images[idx], t))
        assert np.array_equal(out.poison_labels[idx], out.clean_labels[idx])

    def test_projection_contract(self):
        s = share(30, (4, 4, 1), 2)
        t = triggers.gen_random_trigger(0.3, (4, 4, 1), 0)
        out = triggers.clean_label_poison(s, self._linear(), t, 0.05, steps=10, budget=10, seed=1)
        idx = np.flatnonzero(out.is_poisoned)
        off = t.z[None].repeat(len(idx), 0) == 0
        assert np.abs(out.images[idx] - s.images[idx])[off].max() <= 255 * 0.05 + 1e-9

    def test_linear_loss_rises_each_step(self):
        params = self._linear(seed=3)
        x = np.random.default_rng(0).uniform(60, 190, (6, 4, 4, 1))
        y = np.array([0, 1, 0, 1, 1, 0])
        losses = [nn.example_losses(params, x, y)]
        for steps in range(1, 5):
            adv = triggers.pgd_perturb(params, x, y, eps=0.1, steps=steps, step_size=0.01)
            losses.append(nn.example_losses(params, adv, y))
        losses = np.array(losses)
        assert (np.diff(losses, axis=0) > 0).all()

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            triggers.clean_label_poison(share(), self._linear((8, 8, 3), 4), triggers.gen_random_trigger(0.3, (8, 8, 3), 0),
                                        0.0)


class TestStrategy:
    def test_ranges(self):
        with pytest.raises(ConfigurationError):
            triggers.AttackerStrategy(epsilon=1.1)
        with pytest.raises(ConfigurationError):
            triggers.AttackerStrategy(algorithm="gan")
