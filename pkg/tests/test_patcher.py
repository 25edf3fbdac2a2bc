import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_plan, naive_rule_boundaries
from timesqueeze.patcher import (
    CalibrationError,
    PatchConfig,
    PatchPlan,
    calibrate_tau,
    compress,
    compression_ratio,
    detect_boundaries,
    local_power,
    mean_ratio,
    rule_fires,
    unpatch,
)
from timesqueeze.tensor import ShapeError, Tape, Tensor
from timesqueeze import tensor as tn

signals = arrays(
    np.float64,
    st.integers(1, 80),
    elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False),
)


class TestLocalPower:
    def test_full_window(self):
        assert local_power([1, 1, 1, 1, 5], 4, 4) == 1.0

    def test_warmup_prefix_of_zero(self):
        assert local_power([0, 2], 1, 4) == 0.0

    def test_warmup_single_sample(self):
        assert local_power([3, 4], 1, 4) == 9.0

    def test_index_zero_rejected(self):
        with pytest.raises(ValueError):
            local_power([1.0, 2.0], 0, 4)


class TestDetectBoundaries:
    def test_step_signal(self):
        plan = detect_boundaries([1, 1, 1, 1, 5, 5, 5, 5], PatchConfig(0.3, 4, 8))
        assert plan.boundaries == (0, 4)
        assert plan.sizes == (4, 4)

    def test_constant_signal_only_forced_splits(self):
        plan = detect_boundaries(np.full(16, 2.5), PatchConfig(0.3, 4, 8))
        assert plan.boundaries == (0, 8)
        assert plan.sizes == (8, 8)

    def test_scaled_step_signal(self):
        x = np.array([1, 1, 1, 1, 5, 5, 5, 5], dtype=float)
        cfg = PatchConfig(0.3, 4, 8)
        assert detect_boundaries(7 * x, cfg) == detect_boundaries(x, cfg)

    def test_zero_power_region(self):
        # P_i = 0: any nonzero jump splits, flat zeros never do
        plan = detect_boundaries([0, 0, 0, 1e-9, 1e-9, 1e-9], PatchConfig(0.3, 2, 8))
        assert plan.boundaries == (0, 3)

    def test_single_sample(self):
        plan = detect_boundaries([4.0])
        assert plan.boundaries == (0,) and plan.sizes == (1,)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="index 2"):
            detect_boundaries([0.0, 1.0, np.nan])

    def test_forced_split_resets_run(self):
        # jump at 9 fires; forced at 8 restarts the count so next force is 17
        x = np.zeros(20)
        x[9:] = 5.0
        plan = detect_boundaries(x, PatchConfig(0.3, 4, 8))
        assert plan.boundaries == (0, 8, 9, 17)

    @settings(max_examples=300, deadline=None)
    @given(signals, st.sampled_from([0.1, 0.3, 1.0]), st.integers(1, 20), st.integers(1, 10))
    def test_matches_naive_oracle(self, x, tau, L, max_patch):
        plan = detect_boundaries(x, PatchConfig(tau, L, max_patch))
        assert list(plan.boundaries) == naive_plan(x, tau, L, max_patch)

    @settings(max_examples=200, deadline=None)
    @given(signals, st.integers(1, 10))
    def test_partition_and_bounds(self, x, max_patch):
        plan = detect_boundaries(x, PatchConfig(0.3, 4, max_patch))
        assert sum(plan.sizes) == len(x)
        assert all(1 <= s <= max_patch for s in plan.sizes)
        assert plan.position_ids == plan.boundaries
        b = plan.boundaries + (plan.T,)
        assert all(b[k + 1] - b[k] == plan.sizes[k] for k in range(plan.num_patches))
        assert 1.0 <= compression_ratio(plan) <= max_patch

    @settings(max_examples=200, deadline=None)
    @given(signals, st.integers(-8, 8), st.booleans())
    def test_scale_invariance_exact_for_powers_of_two(self, x, k, negate):
        # powers of two scale every intermediate exactly
        c = (-1.0 if negate else 1.0) * 2.0 ** k
        cfg = PatchConfig(0.3, 4, 8)
        assert detect_boundaries(c * x, cfg) == detect_boundaries(x, cfg)

    @settings(max_examples=200, deadline=None)
    @given(signals, st.floats(0.01, 2.0), st.floats(0.01, 2.0))
    def test_tau_monotonicity_of_rule(self, x, t1, t2):
        lo, hi = sorted((t1, t2))
        loose = set(np.flatnonzero(rule_fires(x, lo, 4)))
        strict = set(np.flatnonzero(rule_fires(x, hi, 4)))
        assert strict <= loose

    def test_rule_matches_naive_on_long_signals(self, rng):
        for _ in range(20):
            x = rng.normal(size=600) * rng.uniform(0.01, 100)
            assert list(np.flatnonzero(rule_fires(x, 0.3, 16))) == naive_rule_boundaries(x, 0.3, 16)

    def test_loud_sample_leaving_window_leaves_no_residue(self):
        # an add/subtract running sum would carry ~1e-4 error into the quiet part
        x = np.concatenate([[1e6], np.full(10, 1e-3), [1e-3 + 2e-9]])
        fires = rule_fires(x, 1e-6, 4)
        assert list(np.flatnonzero(fires)) == naive_rule_boundaries(x, 1e-6, 4)


class TestPatchPlan:
    def test_rejects_bad_boundaries(self):
        with pytest.raises(ValueError):
            PatchPlan((1, 3), 5)
        with pytest.raises(ValueError):
            PatchPlan((0, 3, 3), 5)
        with pytest.raises(ValueError):
            PatchPlan((0, 5), 5)

    def test_fixed(self):
        plan = PatchPlan.fixed(10, 4)
        assert plan.boundaries == (0, 4, 8) and plan.sizes == (4, 4, 2)

    def test_to_dict(self):
        assert PatchPlan((0, 8), 16).to_dict() == {"boundaries": [0, 8], "sizes": [8, 8], "ratio": 8.0}


class TestCompressUnpatch:
    def test_compress_rows(self, rng):
        H = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(compress(H, PatchPlan((0, 2), 4)), H[[0, 2]])

    def test_compress_identity_and_single(self, rng):
        H = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(compress(H, PatchPlan(tuple(range(5)), 5)), H)
        np.testing.assert_array_equal(compress(H, PatchPlan((0,), 5)), H[:1])

    def test_compress_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            compress(rng.normal(size=(3, 2)), PatchPlan((0,), 4))

    def test_unpatch_repeats(self):
        Z = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = unpatch(Z, PatchPlan((0, 3), 8))
        np.testing.assert_array_equal(out[:3], np.tile(Z[0], (3, 1)))
        np.testing.assert_array_equal(out[3:], np.tile(Z[1], (5, 1)))

    def test_unpatch_identity(self, rng):
        Z = rng.normal(size=(6, 2))
        np.testing.assert_array_equal(unpatch(Z, PatchPlan(tuple(range(6)), 6)), Z)

    def test_unpatch_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            unpatch(rng.normal(size=(3, 2)), PatchPlan((0, 4), 8))

    def test_compress_unpatch_constant(self):
        H = np.full((9, 3), 1.5)
        plan = PatchPlan((0, 2, 7), 9)
        np.testing.assert_array_equal(unpatch(compress(H, plan), plan), H)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=8), st.data())
    def test_unpatch_causality(self, sizes, data):
        bounds = tuple(np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int))
        plan = PatchPlan(bounds, int(sum(sizes)))
        k = data.draw(st.integers(0, plan.num_patches - 1))
        Z = np.arange(plan.num_patches * 2, dtype=float).reshape(-1, 2)
        Z2 = Z.copy()
        Z2[k] += 1.0
        changed = np.flatnonzero(np.any(unpatch(Z, plan) != unpatch(Z2, plan), axis=1))
        assert changed.min() >= plan.boundaries[k]

    def test_tensor_paths_differentiate(self, rng):
        plan = PatchPlan((0, 2, 3), 5)
        H = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tn.sum(unpatch(compress(H, plan), plan))
        g = tape.gradients(loss)[id(H)]
        # boundary rows receive the size of their patch, others nothing
        np.testing.assert_array_equal(g[:, 0], [2, 0, 1, 2, 0])


class TestRatioAndCalibration:
    def test_ratio(self):
        assert compression_ratio(PatchPlan((0, 8), 16)) == 8.0
        assert compression_ratio(PatchPlan(tuple(range(7)), 7)) == 1.0
        assert compression_ratio(detect_boundaries(np.ones(16))) == 8.0

    def test_constant_corpus_unreachable(self):
        with pytest.raises(CalibrationError, match="unreachable"):
            calibrate_tau([np.ones(64), np.full(64, 3.0)], 4.0)

    def test_target_one_rejected(self, rng):
        with pytest.raises(CalibrationError):
            calibrate_tau([rng.normal(size=64)], 1.0)

    def test_empty_corpus(self):
        with pytest.raises(CalibrationError):
            calibrate_tau([], 4.0)

    def test_white_noise_hits_target(self, rng):
        corpus = [rng.normal(size=256) for _ in range(20)]
        cfg = PatchConfig(0.3, 16, 8)
        tau = calibrate_tau(corpus, 4.0, cfg)
        r = mean_ratio(corpus, PatchConfig(tau, 16, 8))
        assert 3.92 <= r <= 4.08
