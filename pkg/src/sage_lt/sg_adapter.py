"""Semantic-guided adapter: visual, textual and fused streams into one bottleneck.

Parameters live in a flat dict with the short names below; the encoder
stores them under ``sg.{block}.{name}``.
"""
import numpy as np

from .core_math import layer_norm_backward, layer_norm_forward, relu, relu_grad

SG_NAMES = (
    "ln_gain", "ln_bias",
    "W_proj", "b_proj",
    "W_v_down", "b_v_down",
    "W_vt_down", "b_vt_down",
    "W_t_down", "b_t_down",
    "W_up", "b_up",
    "s_vt", "s_block",
)


def count_params(d, r):
    """Closed-form learnable-parameter count of one adapter."""
    return (5 * r + d + 4) * d + 3 * r + 2


def allocated_count(p):
    return int(sum(np.asarray(p[k]).size for k in SG_NAMES))


def init_sg_params(d, r, rng, s_vt=0.5, s_block=0.1):
    """Uniform(-1/sqrt(d), 1/sqrt(d)) projections, zero up-projection and biases.

    The zero up-projection makes the adapter a no-op at step 0.
    """
    if r < 1 or d < 1:
        raise ValueError(f"invalid adapter size d={d}, r={r}")
    bound = 1.0 / np.sqrt(d)
    u = lambda *shape: rng.uniform(-bound, bound, size=shape)
    return {
        "ln_gain": np.ones(d),
        "ln_bias": np.zeros(d),
        "W_proj": u(d, d),
        "b_proj": np.zeros(d),
        "W_v_down": u(d, r),
        "b_v_down": np.zeros(r),
        "W_vt_down": u(d, r),
        "b_vt_down": np.zeros(r),
        "W_t_down": u(d, r),
        "b_t_down": np.zeros(r),
        "W_up": np.zeros((2 * r, d)),
        "b_up": np.zeros(d),
        "s_vt": np.array(float(s_vt)),
        "s_block": np.array(float(s_block)),
    }


def build_guidance(W):
    """Mean classifier row, the guidance vector fed to every adapter."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 1:
        raise ValueError("empty classifier")
    return W.mean(axis=0)


def sg_forward(f_tilde, w_bar, p, alpha):
    """Adapter output for features ``f_tilde`` of shape ``(..., d)``.

    Returns ``(out, cache)``. ``alpha`` mixes the ReLU path with the linear
    path; both share ``W_up``.
    """
    f_tilde = np.asarray(f_tilde, dtype=np.float64)
    w_bar = np.asarray(w_bar, dtype=np.float64)
    d = f_tilde.shape[-1]
    if w_bar.shape != (d,):
        raise ValueError(f"guidance width {w_bar.shape} does not match feature width {d}")
    if p["W_proj"].shape != (d, d):
        raise ValueError(f"W_proj shape {p['W_proj'].shape} does not match width {d}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")

    f_v, ln_v = layer_norm_forward(f_tilde, p["ln_gain"], p["ln_bias"])
    # repeat(w_bar, b) normalizes to the same row b times; keep one row
    f_t, ln_t = layer_norm_forward(w_bar[None, :], p["ln_gain"], p["ln_bias"])
    f_t = f_t[0]
    proj = f_t @ p["W_proj"] + p["b_proj"]
    f_vt = proj * f_v

    h_v = f_v @ p["W_v_down"] + p["b_v_down"]
    t_down = f_t @ p["W_t_down"] + p["b_t_down"]
    h_vt = f_vt @ p["W_vt_down"] + p["b_vt_down"] + p["s_vt"] * t_down
    h = np.concatenate([h_v, h_vt], axis=-1)

    nonlin = relu(h) @ p["W_up"]
    lin = h @ p["W_up"]
    out = alpha * nonlin + (1.0 - alpha) * lin + p["b_up"]
    cache = (f_v, ln_v, f_t, ln_t, proj, f_vt, t_down, h, alpha, p)
    return out, cache


def sg_backward(dout, cache):
    """Returns ``(df_tilde, grads, dw_bar)`` with ``grads`` keyed by short name."""
    f_v, ln_v, f_t, ln_t, proj, f_vt, t_down, h, alpha, p = cache
    r = p["W_v_down"].shape[1]
    lead = tuple(range(dout.ndim - 1))
    flat = lambda a: a.reshape(-1, a.shape[-1])

    g = {}
    mask = relu_grad(h)
    dout2 = flat(dout)
    h2 = flat(h)
    g["b_up"] = dout2.sum(axis=0)
    g["W_up"] = alpha * (relu(h2).T @ dout2) + (1.0 - alpha) * (h2.T @ dout2)
    dmix = dout @ p["W_up"].T
    dh = dmix * (alpha * mask + (1.0 - alpha))

    dh_v = dh[..., :r]
    dh_vt = dh[..., r:]

    g["W_v_down"] = flat(f_v).T @ flat(dh_v)
    g["b_v_down"] = np.sum(dh_v, axis=lead)
    df_v = dh_v @ p["W_v_down"].T

    g["W_vt_down"] = flat(f_vt).T @ flat(dh_vt)
    g["b_vt_down"] = np.sum(dh_vt, axis=lead)
    df_vt = dh_vt @ p["W_vt_down"].T

    dh_vt_sum = np.sum(dh_vt, axis=lead)
    g["s_vt"] = np.array(np.dot(dh_vt_sum, t_down))
    dt_down = p["s_vt"] * dh_vt_sum
    g["W_t_down"] = np.outer(f_t, dt_down)
    g["b_t_down"] = dt_down
    df_t = p["W_t_down"] @ dt_down

    df_v = df_v + df_vt * proj
    dproj = np.sum(df_vt * f_v, axis=lead)
    g["W_proj"] = np.outer(f_t, dproj)
    g["b_proj"] = dproj
    df_t = df_t + p["W_proj"] @ dproj

    df_tilde, dg_v, db_v = layer_norm_backward(df_v, ln_v)
    dw, dg_t, db_t = layer_norm_backward(df_t[None, :], ln_t)
    g["ln_gain"] = dg_v + dg_t
    g["ln_bias"] = db_v + db_t
    g["s_block"] = np.array(0.0)
    return df_tilde, g, dw[0]
