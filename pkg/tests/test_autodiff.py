import numpy as np
import numpy.testing as npt
import pytest

from ta2n import autodiff as ad
from ta2n.autodiff import Parameter, Tape


def scalarize(tape, v, rng):
    """Project an output to a scalar with a fixed random weighting."""
    w = tape.const(rng.standard_normal(v.value.shape))
    return ad.reduce_sum(ad.mul(v, w))


def check_op(build, params, seed=0, tol=1e-6, step=1e-5):
    report = ad.finite_diff_gradcheck(
        build, params, step=step, tolerance=tol, rng=np.random.default_rng(seed)
    )
    assert report.passed, report.summary()
    return report


class TestSoftmax:
    def test_equal_logits_uniform(self):
        t = Tape(grad=False)
        out = ad.softmax(t.const([0.0, 0.0, 0.0, 0.0]), axis=0)
        npt.assert_allclose(out.value, [0.25, 0.25, 0.25, 0.25], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 6))
        t = Tape(grad=False)
        a = ad.softmax(t.const(x), axis=1)
        b = ad.softmax(t.const(x + 13.25), axis=1)
        npt.assert_allclose(a.value, b.value, atol=1e-12)

    def test_hand_exponentials(self):
        # logits ln1, ln2, ln3 -> probabilities 1/6, 2/6, 3/6
        t = Tape(grad=False)
        out = ad.softmax(t.const([np.log(1.0), np.log(2.0), np.log(3.0)]), axis=0)
        npt.assert_allclose(out.value, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_rows_sum_to_one_randomized(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.standard_normal((5, 9)) * rng.uniform(0.1, 50)
            t = Tape(grad=False)
            out = ad.softmax(t.const(x), axis=1).value
            npt.assert_allclose(out.sum(axis=1), np.ones(5), atol=1e-9)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_axis(self):
        t = Tape(grad=False)
        with pytest.raises(ValueError):
            ad.softmax(t.const(np.zeros((2, 3))), axis=2)

    def test_empty_axis(self):
        t = Tape(grad=False)
        with pytest.raises(ValueError):
            ad.softmax(t.const(np.zeros((2, 0))), axis=1)


class TestPooling:
    def test_gap_constant(self):
        t = Tape(grad=False)
        f = t.const(np.full((3, 4, 5, 5), 2.5))
        npt.assert_allclose(ad.global_avg_pool_spatial(f).value, np.full((3, 4), 2.5))

    def test_gap_hand_mean(self):
        t = Tape(grad=False)
        f = t.const(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        npt.assert_allclose(ad.global_avg_pool_spatial(f).value, [[2.5]])

    def test_gap_identity_on_1x1(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6, 1, 1))
        t = Tape(grad=False)
        npt.assert_array_equal(ad.global_avg_pool_spatial(t.const(x)).value, x[:, :, 0, 0])

    def test_gap_wrong_rank(self):
        t = Tape(grad=False)
        with pytest.raises(ValueError):
            ad.global_avg_pool_spatial(t.const(np.zeros((2, 3, 4))))


class TestLinear:
    def test_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        t = Tape(grad=False)
        w = t.const(np.eye(4))
        b = t.const(np.zeros(4))
        npt.assert_allclose(ad.linear_project(t.const(x), w, b).value, x)

    def test_zero_weights_bias_only(self):
        t = Tape(grad=False)
        x = t.const(np.ones((2, 3)))
        w = t.const(np.zeros((3, 2)))
        b = t.const(np.array([5.0, -1.0]))
        npt.assert_allclose(ad.linear_project(x, w, b).value, [[5.0, -1.0]] * 2)

    def test_hand_product(self):
        t = Tape(grad=False)
        x = t.const(np.array([1.0, 2.0]))
        w = t.const(np.array([[1.0, 0.0], [1.0, 1.0]]))
        npt.assert_allclose(ad.linear_project(x, w).value, [3.0, 2.0])

    def test_dimension_mismatch(self):
        t = Tape(grad=False)
        with pytest.raises(ValueError):
            ad.linear_project(t.const(np.zeros((2, 3))), t.const(np.zeros((4, 2))))

    def test_channel_linear_matches_linear_project(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 3, 2, 2))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(4)
        t = Tape(grad=False)
        got = ad.channel_linear(t.const(x), t.const(w), t.const(b)).value
        want = np.moveaxis(np.moveaxis(x, 0, -1) @ w + b, -1, 0)
        npt.assert_allclose(got, want, atol=1e-12)

    def test_pool_project_commute(self):
        # projecting per location then pooling equals pooling then projecting
        rng = np.random.default_rng(13)
        x = rng.standard_normal((6, 4, 7, 7))
        w = rng.standard_normal((6, 3))
        t = Tape(grad=False)
        pooled_first = ad.channel_linear(
            ad.global_avg_pool_spatial(t.const(x)), t.const(w)
        ).value
        proj = ad.channel_linear(t.const(x), t.const(w))
        proj_first = ad.global_avg_pool_spatial(proj).value
        npt.assert_allclose(pooled_first, proj_first, atol=1e-9)


class TestConcat:
    def test_round_trip(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((2, 8, 7, 7))
        b = rng.standard_normal((3, 8, 7, 7))
        t = Tape(grad=False)
        out = ad.concat_channels(t.const(a), t.const(b)).value
        assert out.shape == (5, 8, 7, 7)
        npt.assert_array_equal(out[:2], a)
        npt.assert_array_equal(out[2:], b)

    def test_mismatched_trailing(self):
        t = Tape(grad=False)
        with pytest.raises(ValueError):
            ad.concat_channels(t.const(np.zeros((2, 8, 7, 7))), t.const(np.zeros((2, 8, 7, 6))))

    def test_gradient_of_sum_is_ones(self):
        a = Parameter(np.arange(8.0).reshape(2, 2, 2, 1), "a")
        b = Parameter(np.zeros((1, 2, 2, 1)), "b")
        t = Tape()
        out = ad.concat_channels(t.param(a), t.param(b))
        t.backward(ad.reduce_sum(out))
        npt.assert_array_equal(a.grad, np.ones_like(a.value))
        npt.assert_array_equal(b.grad, np.ones_like(b.value))


class TestPurity:
    def test_inputs_never_mutated(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 4))
        x_before = x.copy()
        t = Tape()
        v = t.const(x)
        p = Parameter(rng.standard_normal((4, 2)), "w")
        out = ad.linear_project(v, t.param(p))
        loss = ad.reduce_sum(ad.mul(out, out))
        t.backward(loss)
        npt.assert_array_equal(x, x_before)
        with pytest.raises(ValueError):
            v.value[0, 0] = 99.0  # recorded values are read-only

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            x = rng.standard_normal((4, 5)) * 10
            t = Tape(grad=False)
            v = t.const(x)
            for out in (
                ad.relu(v),
                ad.sigmoid(v),
                ad.tanh(v),
                ad.softmax(v, axis=1),
                ad.clamp(v, -1.0, 1.0),
            ):
                assert np.all(np.isfinite(out.value))


class TestGradientsMatchFiniteDifferences:
    """Every primitive's backward pass against central differences."""

    def test_elementwise_chain(self):
        rng = np.random.default_rng(0)
        p = Parameter(rng.uniform(0.2, 1.5, size=(3, 4)), "p")
        q = Parameter(rng.uniform(0.2, 1.5, size=(3, 4)), "q")

        def build(tape):
            a, b = tape.param(p), tape.param(q)
            z = ad.div(ad.mul(ad.add(a, b), ad.sub(a, b)), b)
            z = ad.add(ad.sigmoid(z), ad.tanh(ad.neg(z)))
            z = ad.mul(z, ad.exp(ad.affine(a, 0.3, -0.1)))
            z = ad.add(z, ad.log(ad.add(ad.sqrt(b), tape.const(np.ones(1)))))
            return scalarize(tape, z, np.random.default_rng(42))

        check_op(build, [p, q])

    def test_broadcast_mul_div(self):
        rng = np.random.default_rng(1)
        f = Parameter(rng.standard_normal((3, 4, 5)), "f")
        m = Parameter(rng.uniform(0.5, 2.0, size=(4, 5)), "m")
        d = Parameter(rng.uniform(0.5, 2.0, size=(4, 1)), "d")

        def build(tape):
            z = ad.mul(tape.param(f), tape.param(m))
            z = ad.div(z, tape.param(d))
            return scalarize(tape, z, np.random.default_rng(43))

        check_op(build, [f, m, d])

    def test_reductions_and_shape(self):
        rng = np.random.default_rng(2)
        p = Parameter(rng.standard_normal((2, 3, 4)), "p")

        def build(tape):
            v = tape.param(p)
            a = ad.reduce_mean(v, axis=(1, 2))
            b = ad.reduce_sum(ad.reshape(v, (6, 4)), axis=1)
            c = ad.reduce_sum(ad.transpose(v, (2, 0, 1)), axis=(0, 2))
            parts = ad.concat((a, b, c), axis=0)
            return scalarize(tape, parts, np.random.default_rng(44))

        check_op(build, [p])

    def test_take_and_stack(self):
        rng = np.random.default_rng(3)
        p = Parameter(rng.standard_normal(5), "p")

        def build(tape):
            v = tape.param(p)
            s = ad.stack_vec([ad.take(v, 0), ad.take(v, 3), ad.take(v, 4)])
            return ad.reduce_sum(ad.mul(s, s))

        check_op(build, [p])

    def test_softmax_matmul(self):
        rng = np.random.default_rng(4)
        a = Parameter(rng.standard_normal((4, 3)), "a")
        b = Parameter(rng.standard_normal((3, 4)), "b")

        def build(tape):
            m = ad.softmax(ad.matmul(tape.param(a), tape.param(b)), axis=1)
            return scalarize(tape, m, np.random.default_rng(45))

        check_op(build, [a, b])

    def test_clamp_away_from_boundaries(self):
        p = Parameter(np.array([-2.0, -0.5, 0.3, 1.7]), "p")

        def build(tape):
            return ad.reduce_sum(ad.mul(ad.clamp(tape.param(p), -1.0, 1.0), tape.const([1.0, 2.0, 3.0, 4.0])))

        check_op(build, [p])

    def test_linear_ops(self):
        rng = np.random.default_rng(5)
        x = Parameter(rng.standard_normal((4, 6)), "x")
        w = Parameter(rng.standard_normal((6, 3)), "w")
        b = Parameter(rng.standard_normal(3), "b")
        wc = Parameter(rng.standard_normal((4, 5)), "wc")
        bc = Parameter(rng.standard_normal(5), "bc")

        def build(tape):
            y = ad.linear_project(tape.param(x), tape.param(w), tape.param(b))
            z = ad.channel_linear(tape.param(x), tape.param(wc), tape.param(bc))
            out = ad.concat((ad.reshape(y, (12,)), ad.reshape(z, (30,))), axis=0)
            return scalarize(tape, out, np.random.default_rng(46))

        check_op(build, [x, w, b, wc, bc])

    def test_conv1d_temporal(self):
        rng = np.random.default_rng(6)
        x = Parameter(rng.standard_normal((3, 8)), "x")
        w = Parameter(rng.standard_normal((5, 3, 3)), "w")
        b = Parameter(rng.standard_normal(5), "b")

        def build(tape):
            y = ad.conv1d_temporal(tape.param(x), tape.param(w), tape.param(b))
            return scalarize(tape, y, np.random.default_rng(47))

        check_op(build, [x, w, b])

    def test_conv3d(self):
        rng = np.random.default_rng(7)
        x = Parameter(rng.standard_normal((2, 3, 4, 5, 5)), "x")
        w = Parameter(rng.standard_normal((4, 3, 3, 3, 3)) * 0.3, "w")
        b = Parameter(rng.standard_normal(4), "b")

        def build(tape):
            y = ad.conv3d(tape.param(x), tape.param(w), tape.param(b))
            return scalarize(tape, y, np.random.default_rng(48))

        check_op(build, [x, w, b])

    def test_conv3d_forward_oracle(self):
        # brute-force triple loop on a tiny case
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 3, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        t = Tape(grad=False)
        got = ad.conv3d(t.const(x), t.const(w)).value
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        want = np.zeros_like(got)
        for o in range(2):
            for tt in range(3):
                for hh in range(4):
                    for ww in range(4):
                        want[0, o, tt, hh, ww] = np.sum(
                            xp[0, :, tt : tt + 3, hh : hh + 3, ww : ww + 3] * w[o]
                        )
        npt.assert_allclose(got, want, atol=1e-10)

    def test_max_pools(self):
        rng = np.random.default_rng(9)
        x = Parameter(rng.standard_normal((2, 3, 2, 7, 7)), "x")

        def build(tape):
            y = ad.max_pool_spatial2(tape.param(x))
            z = ad.global_max_pool_spatial(y)
            return scalarize(tape, z, np.random.default_rng(49))

        check_op(build, [x])

    def test_max_pool_shapes_and_values(self):
        x = np.arange(16.0).reshape(1, 1, 1, 4, 4)
        t = Tape(grad=False)
        out = ad.max_pool_spatial2(t.const(x)).value
        npt.assert_array_equal(out[0, 0, 0], [[5.0, 7.0], [13.0, 15.0]])
        gm = ad.global_max_pool_spatial(t.const(x)).value
        npt.assert_array_equal(gm, [[[15.0]]])

    def test_batchnorm_train_and_eval(self):
        rng = np.random.default_rng(10)
        x = Parameter(rng.standard_normal((3, 4, 2, 3, 3)), "x")
        g = Parameter(rng.uniform(0.5, 1.5, 4), "g")
        b = Parameter(rng.standard_normal(4), "b")
        rm, rv = np.zeros(4), np.ones(4)

        def build_train(tape):
            y = ad.batchnorm_channels(
                tape.param(x), tape.param(g), tape.param(b), rm.copy(), rv.copy(), True
            )
            return scalarize(tape, y, np.random.default_rng(50))

        check_op(build_train, [x, g, b], tol=1e-5)

        rm2 = rng.standard_normal(4) * 0.1
        rv2 = rng.uniform(0.5, 2.0, 4)

        def build_eval(tape):
            y = ad.batchnorm_channels(
                tape.param(x), tape.param(g), tape.param(b), rm2, rv2, False
            )
            return scalarize(tape, y, np.random.default_rng(51))

        check_op(build_eval, [x, g, b])

    def test_mix_time(self):
        rng = np.random.default_rng(11)
        m = Parameter(rng.standard_normal((4, 4)), "m")
        f = Parameter(rng.standard_normal((3, 4, 2, 2)), "f")

        def build(tape):
            y = ad.mix_time(tape.param(m), tape.param(f))
            return scalarize(tape, y, np.random.default_rng(52))

        check_op(build, [m, f])

    def test_offset_masks(self):
        # offsets chosen so no grid coordinate sits on a profile kink
        o = Parameter(np.array([[0.37, -0.21], [1.13, 0.58], [-0.66, 0.29]]), "o")

        def build(tape):
            masks = ad.offset_masks(tape.param(o), 7, 7, gamma=3.0)
            return scalarize(tape, masks, np.random.default_rng(53))

        check_op(build, [o])

    def test_time_linear_sample(self):
        rng = np.random.default_rng(12)
        f = Parameter(rng.standard_normal((3, 6, 2, 2)), "f")
        # chosen so no source position 0.855 + 0.63*i lands on an integer
        a = Parameter(np.array(0.63), "a")
        b = Parameter(np.array(0.171), "b")

        def build(tape):
            y = ad.time_linear_sample(tape.param(f), tape.param(a), tape.param(b))
            return scalarize(tape, y, np.random.default_rng(54))

        check_op(build, [f, a, b])


class TestGradcheckHarness:
    def test_sum_of_squares(self):
        p = Parameter(np.array([1.0, -2.0, 3.0]), "p")

        def build(tape):
            v = tape.param(p)
            return ad.reduce_sum(ad.mul(v, v))

        report = ad.finite_diff_gradcheck(build, [p], tolerance=1e-8, step=1e-5)
        assert report.passed
        # analytic gradient of sum of squares is 2*theta
        npt.assert_allclose(p.grad, 2 * p.value, atol=1e-12)

    def test_constant_function(self):
        p = Parameter(np.array([0.5, 0.5]), "p")

        def build(tape):
            tape.param(p)
            return ad.reduce_sum(tape.const(np.array(7.0)))

        report = ad.finite_diff_gradcheck(build, [p], tolerance=1e-10)
        assert report.passed
        npt.assert_allclose(p.grad, np.zeros(2), atol=1e-10)

    def test_detects_wrong_gradient(self):
        p = Parameter(np.array([1.0, 2.0]), "p")

        def build(tape):
            v = tape.param(p)
            broken = tape.record("broken", v.value * 3.0, (v,), lambda g: (g,))
            return ad.reduce_sum(broken)

        report = ad.finite_diff_gradcheck(build, [p], tolerance=1e-4)
        assert not report.passed

    def test_nonfinite_objective_raises(self):
        p = Parameter(np.array([1.0]), "p")

        def build(tape):
            v = tape.param(p)
            return ad.reduce_sum(ad.log(ad.affine(v, 0.0, 0.0)))

        with pytest.raises(FloatingPointError):
            ad.finite_diff_gradcheck(build, [p])

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            ad.finite_diff_gradcheck(lambda tape: tape.const(0.0), [], step=0.0)

    def test_grad_accumulates_and_zeroes(self):
        p = Parameter(np.ones(3), "p")

        def run_once():
            t = Tape()
            v = t.param(p)
            t.backward(ad.reduce_sum(ad.mul(v, v)))

        run_once()
        run_once()
        npt.assert_allclose(p.grad, 4 * np.ones(3))  # two accumulations of 2*theta
        p.zero_grad()
        npt.assert_array_equal(p.grad, np.zeros(3))
