"""Backward-pass contracts: finite-difference checks for every op, tape
semantics, linearity, and the Adam update."""

import numpy as np
import pytest

from conftest import fd_gradcheck, rel_err
from starsr import tensor as tn
from starsr.optim import Adam, adam_state, adam_step
from starsr.tensor import ShapeError, Tape, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def away_from(x, points, margin=0.1):
    """Push samples at least `margin` away from each kink in `points`."""
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + margin * np.where(x >= p, 1.0, -1.0) * 1.5, x)
    return x


class TestBackwardBasics:
    def test_sum_grad_is_ones(self, rng):
        x = leaf(rng.uniform(-2, 2, (3, 4)))
        with Tape() as tape:
            out = tn.reduce_sum(x)
        tape.backward(out)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_square_grad_is_2x(self, rng):
        xv = rng.uniform(-2, 2, (5,))
        x = leaf(xv)
        with Tape() as tape:
            out = tn.reduce_sum(tn.mul(x, x))
        tape.backward(out)
        np.testing.assert_allclose(x.grad, 2 * xv, rtol=1e-14)

    def test_non_scalar_root_rejected(self, rng):
        x = leaf(rng.uniform(-1, 1, (3,)))
        with Tape() as tape:
            y = tn.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_tape_consumed(self, rng):
        x = leaf(rng.uniform(-1, 1, (3,)))
        with Tape() as tape:
            y = tn.reduce_sum(x)
        tape.backward(y)
        with pytest.raises(RuntimeError):
            tape.backward(y)

    def test_grad_accumulates_across_uses(self, rng):
        xv = rng.uniform(-1, 1, (4,))
        x = leaf(xv)
        with Tape() as tape:
            out = tn.reduce_sum(tn.add(tn.mul(x, 3.0), tn.mul(x, x)))
        tape.backward(out)
        np.testing.assert_allclose(x.grad, 3.0 + 2 * xv, rtol=1e-14)

    def test_no_tape_means_no_recording(self, rng):
        x = leaf(rng.uniform(-1, 1, (3,)))
        y = tn.mul(x, 2.0)
        assert y._src_tape is None


class TestGradcheckOps:
    """Central finite differences (h=1e-5, f64) for each differentiable op."""

    def test_matmul(self, rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 2))
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.mul(tn.matmul(ts[0], ts[1]),
                                                     tn.matmul(ts[0], ts[1]))), [a, b])

    def test_bmm(self, rng):
        a = rng.uniform(-1, 1, (2, 3, 4))
        b = rng.uniform(-1, 1, (2, 4, 2))
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.mul(tn.bmm(ts[0], ts[1]), 1.5)), [a, b])

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary(self, rng, op):
        a = rng.uniform(-2, 2, (3, 3))
        b = rng.uniform(0.5, 2, (3, 3))
        f = getattr(tn, op)
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.mul(f(ts[0], ts[1]), f(ts[0], ts[1]))),
                     [a, b])

    def test_exp(self, rng):
        x = rng.uniform(-2, 2, (10,))
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.exp(ts[0])), [x])

    def test_log(self, rng):
        x = rng.uniform(0.2, 3, (10,))
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.log(ts[0])), [x])

    def test_sqrt(self, rng):
        x = rng.uniform(0.2, 3, (10,))
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.sqrt(ts[0])), [x])

    def test_abs(self, rng):
        x = away_from(rng.uniform(-2, 2, (10,)), [0.0])
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.absolute(ts[0])), [x])

    def test_sigmoid(self, rng):
        x = rng.uniform(-2, 2, (10,))
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.mul(tn.sigmoid(ts[0]), ts[0])), [x])

    def test_leaky_relu(self, rng):
        x = away_from(rng.uniform(-2, 2, (10,)), [0.0])
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.leaky_relu(ts[0], 0.1)), [x])

    def test_clamp_min(self, rng):
        x = away_from(rng.uniform(-2, 2, (10,)), [0.5])
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.clamp_min(ts[0], 0.5)), [x])

    def test_reduce_mean(self, rng):
        x = rng.uniform(-2, 2, (3, 4))
        fd_gradcheck(lambda ts: tn.reduce_mean(tn.mul(ts[0], ts[0])), [x])

    def test_reduce_sum_axes(self, rng):
        x = rng.uniform(-2, 2, (2, 3, 2))
        fd_gradcheck(
            lambda ts: tn.reduce_sum(tn.mul(tn.reduce_sum(ts[0], axes=(1,)),
                                            tn.reduce_sum(ts[0], axes=(1,)))), [x])

    def test_reduce_max(self, rng):
        x = rng.uniform(-2, 2, (3, 4))
        # keep the argmax unique so finite differences are valid
        x += np.arange(12).reshape(3, 4) * 1e-3
        fd_gradcheck(lambda ts: tn.reduce_sum(tn.reduce_max(ts[0], axes=(1,))), [x])

    @pytest.mark.parametrize("stride,groups,shape,oc", [
        (1, 1, (1, 2, 5, 4), 3),
        (2, 1, (1, 2, 6, 5), 2),
        (1, 3, (1, 3, 4, 4), 3),
        (1, 2, (1, 4, 4, 4), 4),
    ])
    def test_conv2d(self, rng, stride, groups, shape, oc):
        x = rng.uniform(-1, 1, shape)
        w = rng.uniform(-1, 1, (oc, shape[1] // groups, 3, 3))
        fd_gradcheck(lambda ts: tn.reduce_sum(
            tn.mul(tn.conv2d(ts[0], ts[1], stride=stride, groups=groups),
                   tn.conv2d(ts[0], ts[1], stride=stride, groups=groups))), [x, w])

    def test_reshape_transpose_concat(self, rng):
        a = rng.uniform(-1, 1, (2, 6))
        b = rng.uniform(-1, 1, (3, 4))

        def f(ts):
            x = tn.reshape(ts[0], (3, 4))
            y = tn.transpose(tn.reshape(ts[1], (4, 3)), (1, 0))
            z = tn.concat([x, y], axis=0)
            return tn.reduce_sum(tn.mul(z, z))

        fd_gradcheck(f, [a, b])

    def test_add_rowvec(self, rng):
        x = rng.uniform(-1, 1, (4, 3))
        v = rng.uniform(-1, 1, (3,))
        fd_gradcheck(lambda ts: tn.reduce_sum(
            tn.mul(tn.add_rowvec(ts[0], ts[1]), tn.add_rowvec(ts[0], ts[1]))), [x, v])

    def test_scale_rows(self, rng):
        x = rng.uniform(-1, 1, (4, 3))
        s = rng.uniform(0.5, 2, (4,))
        fd_gradcheck(lambda ts: tn.reduce_sum(
            tn.mul(tn.scale_rows(ts[0], ts[1]), ts[0])), [x, s])

    def test_add_chan_bias(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 2, 2))
        b = rng.uniform(-1, 1, (3,))
        fd_gradcheck(lambda ts: tn.reduce_sum(
            tn.mul(tn.add_chan_bias(ts[0], ts[1]), tn.add_chan_bias(ts[0], ts[1]))),
            [x, b])

    def test_mul_chan(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 2, 2))
        s = rng.uniform(0.2, 1, (2, 3))
        fd_gradcheck(lambda ts: tn.reduce_sum(
            tn.mul(tn.mul_chan(ts[0], ts[1]), ts[0])), [x, s])

    def test_layer_norm(self, rng):
        x = rng.uniform(-2, 2, (4, 6))
        g = rng.uniform(0.5, 1.5, (6,))
        b = rng.uniform(-0.5, 0.5, (6,))
        fd_gradcheck(lambda ts: tn.reduce_sum(
            tn.mul(tn.layer_norm(ts[0], ts[1], ts[2]),
                   tn.layer_norm(ts[0], ts[1], ts[2]))), [x, g, b])


class TestLinearity:
    def test_backward_is_linear(self, rng):
        xv = rng.uniform(-2, 2, (6,))

        def grad_of(fn):
            x = leaf(xv)
            with Tape() as tape:
                out = fn(x)
            tape.backward(out)
            return x.grad

        gf = grad_of(lambda x: tn.reduce_sum(tn.exp(x)))
        gg = grad_of(lambda x: tn.reduce_sum(tn.mul(x, x)))
        a, b = 2.5, -1.25
        gc = grad_of(lambda x: tn.add(tn.mul(tn.reduce_sum(tn.exp(x)), a),
                                      tn.mul(tn.reduce_sum(tn.mul(x, x)), b)))
        assert rel_err(gc, a * gf + b * gg) < 1e-12


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        state = adam_state([p])
        before = p.data.copy()
        adam_step([p], [np.zeros_like(p.data)], state, lr=1e-3)
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_closed_form(self):
        p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        state = adam_state([p])
        adam_step([p], [np.ones(1)], state, lr=1e-3)
        # bias correction makes the first update -lr * g/(|g| + eps')
        assert abs(p.data[0] + 1e-3) < 1e-10

    def test_three_step_trace_vs_hand_oracle(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        grads = [0.3, -0.7, 1.1]
        # scalar oracle computed step by step
        theta, m, v = 0.5, 0.0, 0.0
        trace = []
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta -= lr * mhat / (np.sqrt(vhat) + eps)
            trace.append(theta)

        p = Tensor(np.array([0.5]), requires_grad=True, dtype=np.float64)
        state = adam_state([p])
        for g, want in zip(grads, trace):
            adam_step([p], [np.array([g])], state, lr=lr, beta1=b1, beta2=b2, eps=eps)
            assert abs(p.data[0] - want) < 1e-12

    def test_wrapper_reads_grad_slots(self, rng):
        p = Tensor(rng.uniform(-1, 1, (4,)), requires_grad=True, dtype=np.float64)
        opt = Adam([p], lr=1e-2)
        with Tape() as tape:
            loss = tn.reduce_sum(tn.mul(p, p))
        tape.backward(loss)
        before = p.data.copy()
        opt.step()
        assert np.all(np.abs(p.data) < np.abs(before))

    def test_state_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        state = adam_state([p])
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(4)], state, lr=1e-3)
