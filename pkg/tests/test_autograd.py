import numpy as np
import pytest

from ditehrnet import autograd as ag
from ditehrnet.tensor import ConvSpec


def check(f, params, tol=1e-6, **kw):
    rep = ag.finite_diff_check(f, params, tol=tol, **kw)
    assert rep.passed, "\n".join(rep.lines())
    return rep


class TestTape:
    def test_backward_of_simple_expression(self):
        with ag.Tape() as tape:
            a = tape.leaf(np.array([1.0, 2.0]), "a")
            b = tape.leaf(np.array([3.0, 4.0]), "b")
            y = ag.sum(a * b + a)
        g = ag.backward(tape, y)
        np.testing.assert_allclose(g["a"], [4.0, 5.0])
        np.testing.assert_allclose(g["b"], [1.0, 2.0])

    def test_unused_leaf_gets_zero_gradient(self):
        with ag.Tape() as tape:
            a = tape.leaf(np.ones(3), "a")
            tape.leaf(np.ones(2), "unused")
            y = ag.sum(a)
        assert ag.backward(tape, y)["unused"].tolist() == [0.0, 0.0]

    def test_rejects_non_scalar_and_foreign_outputs(self):
        with ag.Tape() as tape:
            a = tape.leaf(np.ones(3), "a")
        with pytest.raises(ValueError):
            ag.backward(tape, a * 2.0)
        with ag.Tape() as other:
            b = other.leaf(np.ones(1), "b")
        with pytest.raises(ValueError):
            ag.backward(tape, ag.sum(b))

    def test_duplicate_leaf_name(self):
        tape = ag.Tape()
        tape.leaf(np.ones(1), "x")
        with pytest.raises(ValueError):
            tape.leaf(np.ones(1), "x")

    def test_plain_arrays_bypass_the_tape(self):
        out = ag.relu(np.array([-1.0, 2.0]))
        assert isinstance(out, np.ndarray)

    def test_broadcast_gradients_are_reduced(self):
        with ag.Tape() as tape:
            x = tape.leaf(np.ones((2, 3, 4, 4)), "x")
            s = tape.leaf(np.ones((1, 3, 1, 1)), "s")
            y = ag.sum(ag.mul(x, s))
        g = ag.backward(tape, y)
        assert g["s"].shape == (1, 3, 1, 1)
        np.testing.assert_allclose(g["s"].ravel(), 32.0)


class TestOperatorGradients:
    @pytest.fixture
    def x(self, rng):
        return rng.standard_normal((2, 4, 5, 6))

    def test_pointwise(self, x):
        check(lambda v: ag.sum(ag.mul(ag.sigmoid(v["x"]), ag.relu(v["x"] + 0.3))), {"x": x})

    def test_softmax(self, x, rng):
        w = rng.standard_normal(x.shape)
        check(lambda v: ag.sum(ag.mul(ag.softmax(v["x"], axis=(2, 3)), w)), {"x": x})

    @pytest.mark.parametrize("spec", [ConvSpec(4, 6, (3, 3), 2, 1), ConvSpec(4, 4, (5, 5), 1, 2, 4),
                                      ConvSpec(4, 2, (1, 1)), ConvSpec(4, 4, (3, 3), 1, 1, 2)])
    def test_conv(self, x, rng, spec):
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(spec.out_channels)
        oh, ow = spec.output_size(5, 6)
        proj = rng.standard_normal((2, spec.out_channels, oh, ow))
        check(lambda v: ag.sum(ag.mul(ag.conv2d(v["x"], v["w"], spec, v["b"]), proj)),
              {"x": x, "w": w, "b": b})

    def test_resampling(self, x, rng):
        p1 = rng.standard_normal((2, 4, 2, 3))
        p2 = rng.standard_normal((2, 4, 9, 13))
        check(lambda v: ag.sum(ag.mul(ag.adaptive_avg_pool(v["x"], (2, 3)), p1)), {"x": x})
        check(lambda v: ag.sum(ag.mul(ag.bilinear_upsample(v["x"], (9, 13)), p2)), {"x": x})

    def test_channel_ops(self, x, rng):
        proj = rng.standard_normal(x.shape)

        def f(v):
            a, b = ag.channel_split(v["x"], 2)
            return ag.sum(ag.mul(ag.channel_shuffle(ag.channel_concat([b, a]), 2), proj))

        check(f, {"x": x})

    def test_batchnorm_and_fc(self, x, rng):
        scale, shift = rng.standard_normal(4), rng.standard_normal(4)
        mean, var = rng.standard_normal(4), rng.random(4) + 0.5
        W, b = rng.standard_normal((3, 4)), rng.standard_normal(3)

        def f(v):
            y = ag.batchnorm(v["x"], v["scale"], v["shift"], mean, var)
            pooled = ag.reshape(ag.global_avg_pool(y), (2, 4))
            return ag.sum(ag.sigmoid(ag.fully_connected(pooled, v["W"], v["b"])))

        check(f, {"x": x, "scale": scale, "shift": shift, "W": W, "b": b})

    def test_weighted_sum(self, rng):
        bank = rng.standard_normal((3, 2, 1, 3, 3))
        a = rng.standard_normal(3)
        proj = rng.standard_normal((2, 1, 3, 3))
        check(lambda v: ag.sum(ag.mul(ag.weighted_sum(v["a"], v["bank"]), proj)), {"a": a, "bank": bank})


class TestFiniteDiffCheck:
    def test_detects_a_wrong_gradient(self):
        def bad(v):
            x = v["x"]
            out = ag.apply("bad", ag.value(x) ** 2, [x], lambda g: (g * 3.0,))
            return ag.sum(out)

        rep = ag.finite_diff_check(bad, {"x": np.array([1.0, 2.0])})
        assert not rep.passed
        assert rep.max_rel_error > 0.1

    def test_zero_true_gradient_is_not_judged_on_roundoff(self):
        # softmax is shift invariant, so the gradient w.r.t. a common offset is zero
        rng = np.random.default_rng(3)
        z, w = rng.standard_normal(5) * 3, rng.standard_normal(5)
        rep = ag.finite_diff_check(lambda v: ag.sum(ag.mul(ag.softmax(ag.add(z, ag.mul(v["c"], np.ones(5)))), w)) +
                                   ag.sum(v["y"] * 10.0), {"c": np.array([0.7]), "y": np.ones(2)})
        assert rep.passed

    def test_bad_step(self):
        with pytest.raises(ValueError):
            ag.finite_diff_check(lambda v: ag.sum(v["x"]), {"x": np.ones(1)}, step=0)
