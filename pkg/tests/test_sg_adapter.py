import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sage_lt.core_math import grad_check
from sage_lt.sg_adapter import (
    SG_NAMES, allocated_count, build_guidance, count_params, init_sg_params, sg_backward, sg_forward,
)


def random_params(d, r, rng, scale=0.5):
    p = init_sg_params(d, r, rng)
    return {k: np.asarray(rng.normal(size=v.shape) * scale) for k, v in p.items()}


def loop_forward(f, w_bar, p, alpha, eps=1e-5):
    """Literal transcription with explicit loops over rows and columns."""
    b, d = f.shape
    r = p["W_v_down"].shape[1]

    def ln(row):
        mu = sum(row) / d
        var = sum((v - mu) ** 2 for v in row) / d
        return [(row[j] - mu) / math.sqrt(var + eps) * p["ln_gain"][j] + p["ln_bias"][j] for j in range(d)]

    def matvec(x, W, bias):
        return [sum(x[i] * W[i, j] for i in range(len(x))) + bias[j] for j in range(W.shape[1])]

    f_t = ln(list(w_bar))
    proj = matvec(f_t, p["W_proj"], p["b_proj"])
    t_down = matvec(f_t, p["W_t_down"], p["b_t_down"])
    out = np.zeros((b, d))
    for s in range(b):
        f_v = ln(list(f[s]))
        f_vt = [proj[j] * f_v[j] for j in range(d)]
        h_v = matvec(f_v, p["W_v_down"], p["b_v_down"])
        h_vt = matvec(f_vt, p["W_vt_down"], p["b_vt_down"])
        h = h_v + [h_vt[k] + float(p["s_vt"]) * t_down[k] for k in range(r)]
        for j in range(d):
            nl = sum(max(h[k], 0.0) * p["W_up"][k, j] for k in range(2 * r))
            li = sum(h[k] * p["W_up"][k, j] for k in range(2 * r))
            out[s, j] = alpha * nl + (1 - alpha) * li + p["b_up"][j]
    return out


def test_forward_matches_loop_oracle(rng):
    p = random_params(8, 2, rng)
    f = rng.normal(size=(2, 8))
    w = rng.normal(size=8)
    out, _ = sg_forward(f, w, p, 0.3)
    np.testing.assert_allclose(out, loop_forward(f, w, p, 0.3), atol=1e-10)


def test_textual_paths_zeroed_make_output_independent_of_guidance(rng):
    p = random_params(8, 2, rng)
    p["s_vt"] = np.array(0.0)
    p["W_vt_down"] = np.zeros_like(p["W_vt_down"])
    f = rng.normal(size=(3, 8))
    out1, _ = sg_forward(f, rng.normal(size=8), p, 1.0)
    out2, _ = sg_forward(f, rng.normal(size=8) * 10, p, 1.0)
    np.testing.assert_array_equal(out1, out2)


def test_alpha_zero_is_linear_in_bottleneck(rng):
    p = random_params(8, 2, rng)
    for k in ("b_v_down", "b_vt_down", "b_t_down", "b_up"):
        p[k] = np.zeros_like(p[k])
    f, w = rng.normal(size=(2, 8)), rng.normal(size=8)
    base, _ = sg_forward(f, w, p, 0.0)
    q = dict(p)
    for k in ("W_v_down", "W_vt_down", "W_t_down"):
        q[k] = 2 * p[k]
    np.testing.assert_allclose(sg_forward(f, w, q, 0.0)[0], 2 * base, atol=1e-12)


@given(st.floats(0, 1))
@settings(max_examples=25)
def test_alpha_interpolation(alpha):
    rng = np.random.default_rng(5)
    p = random_params(6, 2, rng)
    f, w = rng.normal(size=(3, 6)), rng.normal(size=6)
    o1, o0 = sg_forward(f, w, p, 1.0)[0], sg_forward(f, w, p, 0.0)[0]
    np.testing.assert_allclose(sg_forward(f, w, p, alpha)[0], alpha * o1 + (1 - alpha) * o0, atol=1e-12)


def test_zero_up_projection_is_noop_at_init(rng):
    p = init_sg_params(8, 2, rng)
    out, _ = sg_forward(rng.normal(size=(2, 8)), rng.normal(size=8), p, 0.1)
    np.testing.assert_array_equal(out, 0.0)
    assert float(p["s_vt"]) == 0.5 and float(p["s_block"]) == 0.1


def test_width_mismatch(rng):
    p = random_params(8, 2, rng)
    with pytest.raises(ValueError):
        sg_forward(rng.normal(size=(2, 8)), rng.normal(size=6), p, 0.5)
    with pytest.raises(ValueError):
        sg_forward(rng.normal(size=(2, 8)), rng.normal(size=8), p, 1.5)


def test_count_examples(rng):
    assert count_params(8, 2) == 184
    assert count_params(1, 1) == 15
    assert allocated_count(init_sg_params(8, 2, rng)) == 184
    assert allocated_count(init_sg_params(1, 1, rng)) == 15
    assert set(init_sg_params(4, 1, rng)) == set(SG_NAMES)


@given(st.integers(1, 40), st.integers(1, 12))
@settings(max_examples=30)
def test_allocation_equals_formula(d, r):
    p = init_sg_params(d, r, np.random.default_rng(0))
    assert allocated_count(p) == count_params(d, r)
    assert p["W_up"].shape == (2 * r, d)


def test_gradients_including_guidance(rng):
    d, r = 6, 2
    p = random_params(d, r, rng)
    f = rng.normal(size=(2, 3, d))
    w_bar = rng.normal(size=d)
    dout = rng.normal(size=f.shape)
    params = {**p, "f": f, "w_bar": w_bar}

    def fn(q):
        sp = {k: q[k] for k in SG_NAMES}
        out, cache = sg_forward(q["f"], q["w_bar"], sp, 0.3)
        df, g, dw = sg_backward(dout, cache)
        g = {k: g[k] for k in SG_NAMES if k != "s_block"}
        g.update(f=df, w_bar=dw, s_block=np.array(0.0))
        return float(np.sum(out * dout)), g

    for rep in grad_check(fn, params):
        assert rep.passed, rep


def test_build_guidance_examples(rng):
    np.testing.assert_array_equal(build_guidance(np.eye(2)), [0.5, 0.5])
    row = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(build_guidance(row), row[0])
    W = rng.normal(size=(5, 8))
    oracle = [math.fsum(W[:, j]) / 5 for j in range(8)]
    np.testing.assert_allclose(build_guidance(W), oracle, atol=1e-12)
    with pytest.raises(ValueError, match="empty"):
        build_guidance(np.zeros((0, 4)))


def test_init_rejects_bad_sizes(rng):
    with pytest.raises(ValueError):
        init_sg_params(0, 1, rng)
