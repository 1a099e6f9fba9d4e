import numpy as np
import numpy.testing as npt
import pytest

from ta2n import acm
from ta2n import autodiff as ad
from ta2n.acm import (
    OffsetPredictor,
    PerturbSchedule,
    TemporalCoordination,
    generate_offset_mask,
    masked_spatial_average,
    perturb_offsets,
    sc_enumerate_oracle,
    spatial_coordinate,
)
from ta2n.autodiff import Parameter, Tape


def spatially_constant(frames):
    """(C,T) frame vectors broadcast over a 5x5 grid."""
    c, t = frames.shape
    return np.broadcast_to(frames[:, :, None, None], (c, t, 5, 5)).copy()


def identity_tc(channels):
    tc = TemporalCoordination(channels, proj_dim=channels)
    tc.key_w.value[:] = np.eye(channels)
    tc.query_w.value[:] = np.eye(channels)
    tc.value_w.value[:] = np.eye(channels)
    for b in (tc.key_b, tc.query_b, tc.value_b):
        b.value[:] = 0.0
    return tc


class TestTemporalCoordination:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        tc = TemporalCoordination(6, proj_dim=4, rng=rng)
        for _ in range(20):
            tape = Tape(grad=False)
            s = tape.const(rng.standard_normal((6, 8, 5, 5)))
            q = tape.const(rng.standard_normal((6, 8, 5, 5)))
            _, _, corr = tc.forward(tape, s, q)
            npt.assert_allclose(corr.value.sum(axis=1), np.ones(8), atol=1e-9)
            assert corr.value.min() >= 0.0 and corr.value.max() <= 1.0

    def test_identity_correlation_keeps_order(self):
        rng = np.random.default_rng(1)
        tc = identity_tc(4)
        tape = Tape(grad=False)
        q = tape.const(rng.standard_normal((4, 6, 5, 5)))
        values = tc.project_values(tape, q)
        out = acm.rearranged_with(tape.const(np.eye(6)), values)
        npt.assert_allclose(out.value, values.value, atol=1e-12)

    def test_uniform_features_give_uniform_correlation(self):
        tc = TemporalCoordination(4, proj_dim=4, rng=np.random.default_rng(2))
        frames = np.tile(np.array([0.3, -1.2, 0.7, 0.1])[:, None], (1, 8))
        tape = Tape(grad=False)
        s = tape.const(spatially_constant(frames))
        corr = tc.correlation(tape, s, s)
        npt.assert_allclose(corr.value, np.full((8, 8), 1 / 8), atol=1e-12)

    def test_permutation_recovery(self):
        rng = np.random.default_rng(3)
        t_len, c = 8, 16
        for _ in range(25):
            # orthonormal frame features, constant over space
            basis, _ = np.linalg.qr(rng.standard_normal((c, c)))
            support_frames = basis[:, :t_len]
            perm = rng.permutation(t_len)
            query_frames = np.empty_like(support_frames)
            query_frames[:, perm] = support_frames  # q_{perm[t]} = s_t
            tc = identity_tc(c)
            tape = Tape(grad=False)
            s = tape.const(spatially_constant(support_frames))
            q = tape.const(spatially_constant(query_frames))
            corr = tc.correlation(tape, s, q)
            npt.assert_array_equal(corr.value.argmax(axis=1), perm)

    def test_shape_mismatch(self):
        tc = TemporalCoordination(4)
        tape = Tape(grad=False)
        with pytest.raises(ValueError):
            tc.forward(
                tape,
                tape.const(np.zeros((4, 8, 5, 5))),
                tape.const(np.zeros((4, 7, 5, 5))),
            )


class TestOffsetMask:
    def test_plateau_center(self):
        mask = generate_offset_mask((0.0, 0.0), 7, 7)
        assert mask[3, 3] == 1.0

    def test_profile_values(self):
        # distance 1 + 1/3 -> 0; distance 1.2 -> 1 - 3*0.2 = 0.4
        mask = generate_offset_mask((1.0 / 3.0, 0.0), 7, 7)
        npt.assert_allclose(mask[3, 1], 0.0, atol=1e-12)  # x=1 is 7/3-1-1/3... distance 7/3
        cx = 3 + 1.0 / 3.0
        assert abs(abs(2 - cx) - (1 + 1 / 3)) < 1e-12
        npt.assert_allclose(mask[3, 2], 0.0, atol=1e-12)
        mask2 = generate_offset_mask((0.2, 0.0), 7, 7)
        # x=5 sits at distance 1.8 (zero); x=2 at distance 1.2 on the ramp
        npt.assert_allclose(mask2[3, 2], 0.4, atol=1e-12)

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            mask = generate_offset_mask(rng.uniform(-3, 3, 2), 7, 7)
            assert mask.min() >= 0.0 and mask.max() <= 1.0

    def test_point_reflection_symmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            o = rng.uniform(-2.5, 2.5, 2)
            m_pos = generate_offset_mask(o, 7, 7)
            m_neg = generate_offset_mask(-o, 7, 7)
            npt.assert_allclose(m_neg, m_pos[::-1, ::-1], atol=1e-9)

    def test_var_mask_matches_plain(self):
        rng = np.random.default_rng(6)
        offs = rng.uniform(-2, 2, (5, 2))
        tape = Tape(grad=False)
        masks = ad.offset_masks(tape.const(offs), 7, 7, 3.0).value
        for t in range(5):
            npt.assert_allclose(masks[t], generate_offset_mask(offs[t], 7, 7), atol=1e-12)


class TestOffsetPredictor:
    def test_zero_init_final_layer_gives_zero_offsets(self):
        rng = np.random.default_rng(7)
        pred = OffsetPredictor(8, 7, 7, conv_channels=(12, 12), hidden=8, rng=rng)
        tape = Tape(grad=False)
        s = tape.const(rng.standard_normal((4, 6, 7, 7)))
        q = tape.const(rng.standard_normal((4, 6, 7, 7)))
        out = acm.predict_offset(pred, tape, s, q, training=False)
        npt.assert_array_equal(out.value, np.zeros((6, 2)))

    def test_offsets_strictly_inside_half_grid(self):
        rng = np.random.default_rng(8)
        pred = OffsetPredictor(8, 7, 7, conv_channels=(12, 12), hidden=8, rng=rng)
        pred.fc2_w.value[:] = rng.standard_normal((8, 2)) * 0.2
        tape = Tape(grad=False)
        s = tape.const(rng.standard_normal((4, 6, 7, 7)) * 5)
        q = tape.const(rng.standard_normal((4, 6, 7, 7)) * 5)
        out = acm.predict_offset(pred, tape, s, q, training=False).value
        assert np.all(np.abs(out[:, 0]) < 3.0)
        assert np.all(np.abs(out[:, 1]) < 3.0)

    def test_output_shape(self):
        rng = np.random.default_rng(9)
        pred = OffsetPredictor(32, 7, 7, conv_channels=(16, 16), hidden=8, rng=rng)
        tape = Tape(grad=False)
        s = tape.const(rng.standard_normal((16, 8, 7, 7)))
        q = tape.const(rng.standard_normal((16, 8, 7, 7)))
        assert acm.predict_offset(pred, tape, s, q).value.shape == (8, 2)

    def test_grid_too_small_at_construction(self):
        with pytest.raises(ValueError):
            OffsetPredictor(8, 3, 7)
        with pytest.raises(ValueError):
            OffsetPredictor(8, 7, 3)

    def test_batchnorm_running_stats_update_only_in_training(self):
        rng = np.random.default_rng(10)
        pred = OffsetPredictor(8, 7, 7, conv_channels=(12, 12), hidden=8, rng=rng)
        before = pred.bn1_mean.copy()
        tape = Tape(grad=False)
        s = tape.const(rng.standard_normal((4, 6, 7, 7)))
        q = tape.const(rng.standard_normal((4, 6, 7, 7)))
        acm.predict_offset(pred, tape, s, q, training=False)
        npt.assert_array_equal(pred.bn1_mean, before)
        acm.predict_offset(pred, tape, s, q, training=True)
        assert not np.array_equal(pred.bn1_mean, before)


class TestPerturbation:
    def test_eval_mode_is_an_error(self):
        with pytest.raises(RuntimeError):
            perturb_offsets(np.zeros((4, 2)), 0, PerturbSchedule(), training=False)

    def test_epoch_zero_unit_circle(self):
        sched = PerturbSchedule(initial_amplitude=1.0)
        variants = perturb_offsets(np.zeros((1, 2)), 0, sched, training=True)
        assert len(variants) == 9
        npt.assert_array_equal(variants[0], np.zeros((1, 2)))
        for v in variants[1:]:
            npt.assert_allclose(np.linalg.norm(v[0]), 1.0, atol=1e-12)

    def test_amplitude_decay(self):
        sched = PerturbSchedule(initial_amplitude=1.0, decay=0.5, interval_epochs=40)
        assert sched.amplitude(0) == 1.0
        assert sched.amplitude(39) == 1.0
        assert sched.amplitude(40) == 0.5
        assert sched.amplitude(80) == 0.25


class TestMaskedAverage:
    def test_constant_feature_unchanged(self):
        rng = np.random.default_rng(11)
        v = rng.standard_normal(6)
        f = np.broadcast_to(v[:, None, None, None], (6, 4, 7, 7)).copy()
        tape = Tape(grad=False)
        offs = tape.const(rng.uniform(-2, 2, (4, 2)))
        f_s, f_q = spatial_coordinate(tape, tape.const(f), tape.const(f), offs)
        for t in range(4):
            npt.assert_allclose(f_s.value[:, t], v, atol=1e-9)
            npt.assert_allclose(f_q.value[:, t], v, atol=1e-9)

    def test_zero_offset_pools_same_cells(self):
        rng = np.random.default_rng(12)
        f = rng.standard_normal((3, 2, 7, 7))
        tape = Tape(grad=False)
        offs = tape.const(np.zeros((2, 2)))
        f_s, f_q = spatial_coordinate(tape, tape.const(f), tape.const(f), offs)
        npt.assert_allclose(f_s.value, f_q.value, atol=1e-12)

    def test_planted_actor_recovered(self):
        # support actor one cell right of centre, query one cell left;
        # offset (1, 0) should give both means equal to the actor feature
        rng = np.random.default_rng(13)
        actor = rng.uniform(0.5, 1.5, 5)
        support = np.zeros((5, 1, 7, 7))
        query = np.zeros((5, 1, 7, 7))
        support[:, 0, 2:5, 3:6] = actor[:, None, None]  # centred at (3, 4)
        query[:, 0, 2:5, 1:4] = actor[:, None, None]  # centred at (3, 2)
        tape = Tape(grad=False)
        offs = tape.const(np.array([[1.0, 0.0]]))
        f_s, f_q = spatial_coordinate(tape, tape.const(support), tape.const(query), offs)
        npt.assert_allclose(f_s.value[:, 0], actor, rtol=0.05)
        npt.assert_allclose(f_q.value[:, 0], actor, rtol=0.05)

    def test_mask_shape_mismatch(self):
        tape = Tape(grad=False)
        with pytest.raises(ValueError):
            masked_spatial_average(
                tape.const(np.zeros((3, 4, 7, 7))), tape.const(np.zeros((4, 5, 5)))
            )

    def test_full_path_gradients(self):
        rng = np.random.default_rng(14)
        support = Parameter(rng.standard_normal((3, 2, 7, 7)), "support")
        query = Parameter(rng.standard_normal((3, 2, 7, 7)), "query")
        # offsets away from mask kinks: fractional parts well inside segments
        offs = Parameter(np.array([[0.37, -0.62], [1.18, 0.44]]), "offsets")

        def build(tape):
            f_s, f_q = spatial_coordinate(
                tape, tape.param(support), tape.param(query), tape.param(offs)
            )
            diff = ad.sub(f_s, f_q)
            return ad.reduce_sum(ad.mul(diff, diff))

        report = ad.finite_diff_gradcheck(
            build, [support, query, offs], step=1e-4, tolerance=1e-4,
            rng=np.random.default_rng(15),
        )
        assert report.passed, report.summary()

    def test_perturbed_masks_average_before_normalization(self):
        rng = np.random.default_rng(16)
        f = rng.standard_normal((2, 1, 7, 7))
        offs = np.array([[0.5, -0.25]])
        disp = PerturbSchedule(initial_amplitude=0.5).displacements(0)
        tape = Tape(grad=False)
        m = acm.averaged_masks(tape, tape.const(offs), 7, 7, displacements=disp)
        expect = np.mean(
            [generate_offset_mask(offs[0] + d, 7, 7) for d in disp], axis=0
        )
        npt.assert_allclose(m.value[0], expect, atol=1e-12)
        # and the weighted mean normalizes once, after averaging
        got = masked_spatial_average(tape.const(f), m).value
        floored = expect + acm.MASK_FLOOR
        want = (f[:, 0] * floored).sum(axis=(1, 2)) / floored.sum()
        npt.assert_allclose(got[:, 0], want, atol=1e-12)


class TestEnumerateOracle:
    def test_identical_maps_zero_offset(self):
        rng = np.random.default_rng(17)
        f = rng.standard_normal((4, 3, 7, 7))
        offs, dist = sc_enumerate_oracle(f, f)
        npt.assert_array_equal(offs, np.zeros((3, 2)))
        npt.assert_allclose(dist, np.zeros(3), atol=1e-9)

    def test_planted_translation_recovered(self):
        rng = np.random.default_rng(18)
        for _ in range(20):
            patch = rng.uniform(0.5, 1.5, (4, 3, 3))
            shift_x, shift_y = rng.integers(-2, 3, 2)
            support = np.zeros((4, 1, 7, 7))
            query = np.zeros((4, 1, 7, 7))
            support[:, 0, 2:5, 2:5] = patch
            query[:, 0, 2 + shift_y : 5 + shift_y, 2 + shift_x : 5 + shift_x] = patch
            offs, dist = sc_enumerate_oracle(support, query)
            # query content sits at support position + shift, and the oracle
            # compares support[s] with query[s - o]
            npt.assert_array_equal(offs[0], [-shift_x, -shift_y])
            npt.assert_allclose(dist[0], 0.0, atol=1e-9)

    def test_minimizer_dominates_zero_offset(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            s = rng.standard_normal((3, 2, 6, 6))
            q = rng.standard_normal((3, 2, 6, 6))
            _, dist = sc_enumerate_oracle(s, q)
            for t in range(2):
                zero_dist = acm._window_metric(s[:, t], q[:, t], "cosine")
                assert dist[t] <= zero_dist + 1e-12

    def test_unknown_metric(self):
        f = np.zeros((1, 1, 5, 5))
        with pytest.raises(ValueError):
            sc_enumerate_oracle(f, f, metric="manhattan")
