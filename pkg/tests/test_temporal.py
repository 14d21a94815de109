import math

import numpy as np
import pytest

from stdet.numkit import ShapeError, Tensor, grad_check
from stdet.temporal import GATES, ConvLstmParams, ConvLstmState, convlstm_cell, convlstm_rollout, init_convlstm, zero_state

from conftest import t64


def _params(cin, ch, rng, k=3):
    return init_convlstm(cin, ch, rng, kernel_size=k, dtype=np.float64)


def _zeroed(p):
    for q in p.parameters():
        q.data[...] = 0.0
    return p


def _state(b, ch, h, w, val=0.0):
    return ConvLstmState(t64(np.full((b, ch, h, w), val)), t64(np.full((b, ch, h, w), val)))


def test_zero_fixed_point(rng):
    p = _zeroed(_params(2, 3, rng))
    s = convlstm_cell(t64(np.zeros((1, 2, 4, 4))), _state(1, 3, 4, 4), p)
    assert not s.h.data.any() and not s.c.data.any()


def test_saturated_gates(rng):
    p = _zeroed(_params(2, 3, rng))
    p.b["i"].data[...] = 10.0
    p.b["c"].data[...] = 10.0
    s = convlstm_cell(t64(rng.standard_normal((1, 2, 4, 4))), _state(1, 3, 4, 4), p)
    # hand recurrence: c = sigmoid(10) * tanh(10), h = sigmoid(0) * tanh(c)
    c = 1.0 / (1.0 + math.exp(-10.0)) * math.tanh(10.0)
    h = 0.5 * math.tanh(c)
    assert abs(h - 0.3808) < 1e-4
    np.testing.assert_allclose(s.c.data, c, rtol=1e-12)
    np.testing.assert_allclose(s.h.data, h, rtol=1e-12)


def _naive_cell(x, h, c, p):
    """Gates computed one at a time with separate convolutions."""
    from stdet.numkit import conv2d

    pad = p.kernel_size // 2
    z = {g: conv2d(t64(x), p.wx[g], p.b[g], 1, pad).data + conv2d(t64(h), p.wh[g], None, 1, pad).data for g in GATES}
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    c2 = sig(z["f"]) * c + sig(z["i"]) * np.tanh(z["c"])
    return sig(z["o"]) * np.tanh(c2), c2


def test_cell_matches_per_gate_convolutions(rng):
    p = _params(3, 4, rng)
    x = rng.standard_normal((2, 3, 5, 5))
    h = rng.standard_normal((2, 4, 5, 5))
    c = rng.standard_normal((2, 4, 5, 5))
    s = convlstm_cell(t64(x), ConvLstmState(t64(h), t64(c)), p)
    hr, cr = _naive_cell(x, h, c, p)
    np.testing.assert_allclose(s.h.data, hr, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(s.c.data, cr, rtol=1e-12, atol=1e-14)


def test_cell_gradient(rng):
    p = _params(2, 2, rng)
    x = t64(rng.standard_normal((1, 2, 4, 4)))
    h = t64(rng.standard_normal((1, 2, 4, 4)))
    c = t64(rng.standard_normal((1, 2, 4, 4)))
    params = p.parameters()

    def fn(x, h, c, *ps):
        q = ConvLstmParams(dict(zip(GATES, ps[0:4])), dict(zip(GATES, ps[4:8])), dict(zip(GATES, ps[8:12])))
        s = convlstm_cell(x, ConvLstmState(h, c), q)
        return s.h

    assert len(params) == 12
    assert grad_check(fn, [x, h, c, *params]) < 1e-4


def test_rollout_single_step_equals_cell(rng):
    p = _params(2, 3, rng)
    x = t64(rng.standard_normal((1, 2, 4, 4)))
    s1 = convlstm_rollout([x], p)
    s2 = convlstm_cell(x, zero_state(x, p), p)
    np.testing.assert_array_equal(s1[-1].h.data, s2.h.data)


def test_rollout_zero_sequence(rng):
    p = _zeroed(_params(2, 3, rng))
    states = convlstm_rollout([t64(np.zeros((1, 2, 3, 3)))] * 4, p)
    assert len(states) == 4
    assert all(not s.h.data.any() and not s.c.data.any() for s in states)


def test_rollout_is_composition(rng):
    p = _params(2, 3, rng)
    seq = [t64(rng.standard_normal((2, 2, 4, 4))) for _ in range(3)]
    s = zero_state(seq[0], p)
    for x in seq:
        s = convlstm_cell(x, s, p)
    np.testing.assert_array_equal(convlstm_rollout(seq, p)[-1].h.data, s.h.data)


def test_rollout_counts_cell_calls(rng):
    p = _params(2, 2, rng)
    calls = []

    def counting(x, s, q):
        calls.append(1)
        return convlstm_cell(x, s, q)

    convlstm_rollout([t64(rng.standard_normal((1, 2, 3, 3)))] * 5, p, cell=counting)
    assert len(calls) == 5


def test_rollout_gradient(rng):
    p = _params(2, 2, rng)
    seq = [t64(rng.standard_normal((1, 2, 3, 3))) for _ in range(3)]

    def fn(a, b, c, *ps):
        q = ConvLstmParams(dict(zip(GATES, ps[0:4])), dict(zip(GATES, ps[4:8])), dict(zip(GATES, ps[8:12])))
        return convlstm_rollout([a, b, c], q)[-1].h

    assert grad_check(fn, [*seq, *p.parameters()]) < 1e-4


def test_errors(rng):
    p = _params(2, 3, rng)
    with pytest.raises(ValueError):
        convlstm_rollout([], p)
    with pytest.raises(ShapeError):
        convlstm_cell(t64(np.ones((1, 3, 4, 4))), _state(1, 3, 4, 4), p)
    with pytest.raises(ShapeError):
        convlstm_cell(t64(np.ones((1, 2, 4, 4))), _state(1, 3, 5, 5), p)
    with pytest.raises(ShapeError):
        convlstm_rollout([t64(np.ones((1, 2, 4, 4))), t64(np.ones((1, 2, 5, 5)))], p)
    with pytest.raises(ValueError):
        init_convlstm(2, 2, rng, kernel_size=2)


def test_forget_bias_initialised(rng):
    p = init_convlstm(2, 3, rng, forget_bias=1.0)
    assert np.all(p.b["f"].data == 1.0) and not p.b["i"].data.any()
    assert isinstance(p.wx["i"], Tensor)
