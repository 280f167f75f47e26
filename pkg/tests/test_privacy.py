import math

import numpy as np
import pytest

from fedmesh.errors import ConfigError
from fedmesh.kvdoc import parse_doc
from fedmesh.privacy import (
    DpParams,
    MaskPairing,
    SitePolicy,
    SvtParams,
    apply_policy,
    clip_l2,
    decode_fixed,
    encode_fixed,
    gaussian_mechanism,
    gaussian_sigma,
    make_masks,
    make_pairing,
    mask_update,
    policy_from_doc,
    policy_to_doc,
    sum_masked,
    svt_filter,
)


class TestClip:
    def test_rescales_to_clip_norm(self):
        d = np.array([6.0, 8.0])
        out = clip_l2(d, 1.0)
        assert np.linalg.norm(out) == pytest.approx(1.0)

    def test_small_vector_unchanged(self):
        d = np.array([0.1, 0.2, 0.2])
        np.testing.assert_array_equal(clip_l2(d, 1.0), d)

    def test_zero_vector_identity(self):
        np.testing.assert_array_equal(clip_l2(np.zeros(4), 1.0), np.zeros(4))


class TestGaussianMechanism:
    def test_sigma_formula_against_independent_evaluation(self):
        # sigma = C * sqrt(2 ln(1.25/delta)) / eps, evaluated via log10 here.
        independent = math.sqrt(2.0 * (math.log(1.25) + 5.0 * math.log(10.0)))
        assert gaussian_sigma(1.0, 1.0, 1e-5) == pytest.approx(independent, abs=1e-12)
        assert gaussian_sigma(1.0, 1.0, 1e-5) == pytest.approx(4.8447, abs=2e-4)

    def test_sigma_scales_with_clip_and_epsilon(self):
        assert gaussian_sigma(2.0, 1.0, 1e-5) == pytest.approx(
            2 * gaussian_sigma(1.0, 1.0, 1e-5)
        )
        assert gaussian_sigma(1.0, 4.0, 1e-5) == pytest.approx(
            gaussian_sigma(1.0, 1.0, 1e-5) / 4
        )

    def test_empirical_std_within_one_percent(self):
        rng = np.random.default_rng(42)
        sigma = gaussian_sigma(1.0, 1.0, 1e-5)
        zeros = np.zeros(1_000_000)
        noisy = gaussian_mechanism(zeros, 1.0, 1.0, 1e-5, rng)
        assert np.std(noisy) == pytest.approx(sigma, rel=0.01)

    def test_mean_bias_bound(self):
        rng = np.random.default_rng(43)
        n = 1_000_000
        sigma = gaussian_sigma(1.0, 1.0, 1e-5)
        noisy = gaussian_mechanism(np.zeros(n), 1.0, 1.0, 1e-5, rng)
        assert abs(noisy.mean()) < 3 * sigma / math.sqrt(n)

    def test_huge_epsilon_degenerates_to_identity(self):
        rng = np.random.default_rng(44)
        delta = np.linspace(-0.5, 0.5, 1000)
        noisy = gaussian_mechanism(delta, 1.0, 1e9, 1e-5, rng)
        assert np.max(np.abs(noisy - delta)) < 1e-6

    def test_parameter_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            gaussian_mechanism(np.zeros(2), 1.0, -1.0, 1e-5, rng)
        with pytest.raises(ConfigError):
            gaussian_mechanism(np.zeros(2), 1.0, 1.0, 1.5, rng)
        with pytest.raises(ConfigError):
            DpParams(epsilon=1.0, delta=0.0)


class TestSvt:
    def test_first_exceeder_with_unit_budget(self):
        # quantile(0.25) of |[0.5, 2.0, 1.5]| is exactly 1.0
        rng = np.random.default_rng(0)
        out = svt_filter(np.array([0.5, 2.0, 1.5]), 0.25, 1, math.inf, rng)
        assert list(out.indices) == [1]
        assert list(out.values) == [2.0]
        dense = out.to_dense()
        np.testing.assert_array_equal(dense, [0.0, 2.0, 0.0])

    def test_large_budget_releases_all_exceeders(self):
        rng = np.random.default_rng(0)
        out = svt_filter(np.array([0.5, 2.0, 1.5]), 0.25, 10, math.inf, rng)
        assert list(out.indices) == [1, 2]

    def test_budget_respected_over_random_trials(self):
        rng = np.random.default_rng(7)
        for trial in range(1000):
            delta = rng.normal(size=40)
            c = int(rng.integers(1, 6))
            out = svt_filter(delta, 0.8, c, 0.5, rng)
            assert len(out.indices) <= c

    def test_released_values_are_true_values(self):
        rng = np.random.default_rng(8)
        delta = rng.normal(size=30)
        out = svt_filter(delta, 0.5, 5, 2.0, rng)
        np.testing.assert_array_equal(out.values, delta[out.indices])

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            svt_filter(np.zeros(3), 0.5, 0, 1.0, rng)
        with pytest.raises(ConfigError):
            svt_filter(np.zeros(3), 1.5, 1, 1.0, rng)
        with pytest.raises(ConfigError):
            SvtParams(threshold_fraction=0.5, budget_c=2, epsilon=-1.0)


class TestFixedPoint:
    def test_round_trip(self):
        rng = np.random.default_rng(1)
        delta = rng.normal(size=100)
        back = decode_fixed(encode_fixed(delta))
        assert np.max(np.abs(back - delta)) <= 2.0 ** -32

    def test_range_guard(self):
        with pytest.raises(ConfigError):
            encode_fixed(np.array([1e12]))


class TestMasks:
    def test_two_clients_cancel_exactly(self):
        pairing = make_pairing(["a", "b"], round_no=1, root_seed=99)
        mask_a = make_masks(pairing, "a", 64)
        mask_b = make_masks(pairing, "b", 64)
        assert ((mask_a + mask_b) == 0).all()

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_cohort_masks_sum_to_zero(self, n):
        cohort = [f"site-{i}" for i in range(n)]
        pairing = make_pairing(cohort, round_no=3, root_seed=5)
        total = np.zeros(32, dtype=np.uint64)
        for cid in cohort:
            total += make_masks(pairing, cid, 32)
        assert (total == 0).all()

    def test_masked_sum_equals_encoded_sum_bit_exact(self):
        rng = np.random.default_rng(2)
        cohort = ["a", "b", "c", "d"]
        pairing = make_pairing(cohort, round_no=1, root_seed=11)
        deltas = {cid: rng.normal(size=50) for cid in cohort}
        masked = [mask_update(deltas[cid], pairing, cid) for cid in sorted(cohort)]
        got = sum_masked(masked)
        expected_words = np.zeros(50, dtype=np.uint64)
        for cid in sorted(cohort):
            expected_words += encode_fixed(deltas[cid])
        expected = decode_fixed(expected_words)
        np.testing.assert_array_equal(got, expected)

    def test_missing_client_corrupts_sum(self):
        cohort = ["a", "b", "c"]
        pairing = make_pairing(cohort, round_no=1, root_seed=3)
        deltas = {cid: np.zeros(20) for cid in cohort}
        masked = [mask_update(deltas[cid], pairing, cid) for cid in ["a", "b"]]
        corrupted = sum_masked(masked)
        assert np.max(np.abs(corrupted)) > 1.0

    def test_missing_pair_seed_is_error(self):
        pairing = MaskPairing(round=1, pair_seeds={("a", "b"): 7})
        with pytest.raises(KeyError):
            make_masks(pairing, "z", 8)
        with pytest.raises(KeyError):
            pairing.seed_for("a", "c")

    def test_pairing_is_round_and_pair_specific(self):
        a = make_pairing(["x", "y"], 1, 5).pair_seeds[("x", "y")]
        b = make_pairing(["x", "y"], 2, 5).pair_seeds[("x", "y")]
        assert a != b


class TestPolicy:
    def test_at_most_one_noise_filter(self):
        with pytest.raises(ConfigError):
            SitePolicy(
                site_id="s",
                clip_norm=1.0,
                dp=DpParams(1.0, 1e-5),
                svt=SvtParams(0.5, 2, 1.0),
            )

    def test_dp_requires_clip(self):
        with pytest.raises(ConfigError):
            SitePolicy(site_id="s", dp=DpParams(1.0, 1e-5))

    def test_doc_round_trip(self):
        policy = SitePolicy(
            site_id="site-1",
            clip_norm=2.0,
            svt=SvtParams(threshold_fraction=0.9, budget_c=4, epsilon=0.5),
            masking_enabled=True,
        )
        again = policy_from_doc("site-1", policy_to_doc(policy))
        assert again == policy

    def test_policy_file_text(self):
        text = (
            "site_id = site-2\n"
            "clip_norm = 1.5\n"
            "dp.epsilon = 2.0\n"
            "dp.delta = 1e-6\n"
            "masking_enabled = false\n"
        )
        policy = policy_from_doc("site-2", parse_doc(text))
        assert policy.clip_norm == 1.5
        assert policy.dp == DpParams(2.0, 1e-6)
        assert not policy.masking_enabled

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            policy_from_doc("s", {"site_id": "s", "bogus": 1})

    def test_wrong_site_rejected(self):
        with pytest.raises(ConfigError):
            policy_from_doc("s", {"site_id": "other"})

    def test_pipeline_equals_composition(self):
        rng_a = np.random.default_rng(123)
        rng_b = np.random.default_rng(123)
        delta = np.linspace(-3, 3, 200)
        policy = SitePolicy(site_id="s", clip_norm=1.0, dp=DpParams(1.0, 1e-5))
        piped = apply_policy(delta, policy, rng_a)
        composed = gaussian_mechanism(clip_l2(delta, 1.0), 1.0, 1.0, 1e-5, rng_b)
        np.testing.assert_array_equal(piped, composed)

    def test_svt_pipeline_uses_clip_as_scale(self):
        rng_a = np.random.default_rng(9)
        rng_b = np.random.default_rng(9)
        delta = np.linspace(-3, 3, 50)
        policy = SitePolicy(
            site_id="s", clip_norm=2.0, svt=SvtParams(0.5, 3, 1.0)
        )
        piped = apply_policy(delta, policy, rng_a)
        composed = svt_filter(clip_l2(delta, 2.0), 0.5, 3, 1.0, rng_b, scale_unit=2.0)
        np.testing.assert_array_equal(piped, composed.to_dense())

    def test_empty_policy_is_identity(self):
        delta = np.linspace(-1, 1, 10)
        out = apply_policy(delta, SitePolicy(site_id="s"), np.random.default_rng(0))
        np.testing.assert_array_equal(out, delta)
