"""Small ViT-style encoder with plain, AdaptFormer and semantic-guided blocks.

Block update (LN only in front of the MLP):

    f~    = MSA(f) + f
    f_out = MLP(LN(f~)) + s * adapter(f~) + f~

where the adapter term is absent in ``plain`` mode. All parameters are kept
in one flat ``dict[str, ndarray]``:

    embed.W_patch, embed.cls, embed.pos
    blocks.{l}.{W_q,W_k,W_v,W_o,ln_gain,ln_bias,W_fc1,b_fc1,W_fc2,b_fc2}
    af.{l}.{ln_gain,ln_bias,W_down,b_down,W_up,b_up,s}
    sg.{l}.{...}            see sg_adapter.SG_NAMES
"""
import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import sg_adapter
from .core_math import (
    check_finite,
    gelu,
    gelu_grad,
    layer_norm_backward,
    layer_norm_forward,
    relu,
    relu_grad,
    softmax_backward,
    softmax_rows,
)

MODES = ("plain", "adaptformer", "sage")
BLOCK_NAMES = ("W_q", "W_k", "W_v", "W_o", "ln_gain", "ln_bias", "W_fc1", "b_fc1", "W_fc2", "b_fc2")
AF_NAMES = ("ln_gain", "ln_bias", "W_down", "b_down", "W_up", "b_up", "s")


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    width: int = 32
    heads: int = 2
    bottleneck: int = 4
    grid: int = 8
    patch: int = 4
    mode: str = "plain"
    alpha: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.heads < 1 or self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.patch < 1 or self.grid % self.patch:
            raise ValueError(f"patch {self.patch} does not divide grid {self.grid}")
        if not 1 <= self.bottleneck < self.width:
            raise ValueError(f"bottleneck {self.bottleneck} must satisfy 1 <= r < d")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def n_patches(self):
        return (self.grid // self.patch) ** 2

    @property
    def tokens(self):
        return self.n_patches + 1

    def with_mode(self, mode):
        return replace(self, mode=mode)


def adaptformer_count(d, r):
    return (2 * r + 3) * d + r + 1


def init_encoder(config, rng):
    """Base (foundation) parameters: patch embedding and ``depth`` plain blocks."""
    d = config.width
    pd = config.patch * config.patch
    params = {
        "embed.W_patch": rng.normal(0.0, 1.0 / np.sqrt(pd), size=(pd, d)),
        "embed.cls": rng.normal(0.0, 0.02, size=d),
        "embed.pos": rng.normal(0.0, 0.02, size=(config.tokens, d)),
    }
    s = 1.0 / np.sqrt(d)
    for l in range(config.depth):
        p = f"blocks.{l}."
        params[p + "W_q"] = rng.normal(0.0, s, size=(d, d))
        params[p + "W_k"] = rng.normal(0.0, s, size=(d, d))
        params[p + "W_v"] = rng.normal(0.0, s, size=(d, d))
        params[p + "W_o"] = rng.normal(0.0, s, size=(d, d))
        params[p + "ln_gain"] = np.ones(d)
        params[p + "ln_bias"] = np.zeros(d)
        params[p + "W_fc1"] = rng.normal(0.0, s, size=(d, 4 * d))
        params[p + "b_fc1"] = np.zeros(4 * d)
        params[p + "W_fc2"] = rng.normal(0.0, 0.5 / np.sqrt(4 * d), size=(4 * d, d))
        params[p + "b_fc2"] = np.zeros(d)
    return params


def init_adapters(config, rng):
    """Adapter parameters implied by ``config.mode`` (empty for plain)."""
    d, r = config.width, config.bottleneck
    params = {}
    for l in range(config.depth):
        if config.mode == "adaptformer":
            bound = 1.0 / np.sqrt(d)
            params.update({
                f"af.{l}.ln_gain": np.ones(d),
                f"af.{l}.ln_bias": np.zeros(d),
                f"af.{l}.W_down": rng.uniform(-bound, bound, size=(d, r)),
                f"af.{l}.b_down": np.zeros(r),
                f"af.{l}.W_up": np.zeros((r, d)),
                f"af.{l}.b_up": np.zeros(d),
                f"af.{l}.s": np.array(0.1),
            })
        elif config.mode == "sage":
            for k, v in sg_adapter.init_sg_params(d, r, rng).items():
                params[f"sg.{l}.{k}"] = v
    return params


def sub_params(params, prefix):
    """Strip ``prefix`` from matching keys, e.g. ``sub_params(p, "sg.0.")``."""
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def patchify(images, patch):
    b, g, g2 = images.shape
    k = g // patch
    x = images.reshape(b, k, patch, k, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, k * k, patch * patch)


def embed_forward(images, params, config):
    images = check_finite(images, "images")
    if images.ndim != 3 or images.shape[1:] != (config.grid, config.grid):
        raise ValueError(
            f"images must have shape (b, {config.grid}, {config.grid}), got {images.shape}"
        )
    b = images.shape[0]
    patches = patchify(images, config.patch)
    tok = patches @ params["embed.W_patch"]
    cls = np.broadcast_to(params["embed.cls"], (b, 1, config.width))
    x = np.concatenate([cls, tok], axis=1) + params["embed.pos"]
    return x, patches


def embed_backward(dx, patches):
    return {
        "embed.pos": dx.sum(axis=0),
        "embed.cls": dx[:, 0].sum(axis=0),
        "embed.W_patch": np.einsum("bpk,bpd->kd", patches, dx[:, 1:]),
    }


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def msa_forward(f, W_q, W_k, W_v, W_o, heads):
    """Multi-head self-attention on tokens ``f`` of shape ``(b, tokens, d)``.

    Head ``j`` uses columns ``j*d_k:(j+1)*d_k`` of the fused projections.
    Returns ``(out, attention, cache)`` with attention ``(b, heads, T, T)``.
    """
    if f.ndim != 3 or f.shape[-1] != W_q.shape[0]:
        raise ValueError(f"token matrix {f.shape} does not match projection {W_q.shape}")
    dk = W_q.shape[1] // heads
    Q = _split_heads(f @ W_q, heads)
    K = _split_heads(f @ W_k, heads)
    V = _split_heads(f @ W_v, heads)
    A = softmax_rows(Q @ K.transpose(0, 1, 3, 2) / np.sqrt(dk))
    concat = _merge_heads(A @ V)
    out = concat @ W_o
    return out, A, (f, Q, K, V, A, concat, dk)


def msa_backward(dout, cache, W_q, W_k, W_v, W_o, heads, want_weights=True):
    f, Q, K, V, A, concat, dk = cache
    grads = {}
    if want_weights:
        grads["W_o"] = np.einsum("btd,bte->de", concat, dout)
    dH = _split_heads(dout @ W_o.T, heads)
    dA = dH @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dH
    dS = softmax_backward(A, dA) / np.sqrt(dk)
    dQ = _merge_heads(dS @ K)
    dK = _merge_heads(dS.transpose(0, 1, 3, 2) @ Q)
    dV = _merge_heads(dV)
    if want_weights:
        grads["W_q"] = np.einsum("btd,bte->de", f, dQ)
        grads["W_k"] = np.einsum("btd,bte->de", f, dK)
        grads["W_v"] = np.einsum("btd,bte->de", f, dV)
    df = dQ @ W_q.T + dK @ W_k.T + dV @ W_v.T
    return df, grads


def _adaptformer_forward(ft, p):
    ln, ln_cache = layer_norm_forward(ft, p["ln_gain"], p["ln_bias"])
    a = ln @ p["W_down"] + p["b_down"]
    out = relu(a) @ p["W_up"] + p["b_up"]
    return out, (ln, ln_cache, a)


def _adaptformer_backward(dout, cache, p):
    ln, ln_cache, a = cache
    flat = lambda x: x.reshape(-1, x.shape[-1])
    g = {"b_up": flat(dout).sum(axis=0), "W_up": flat(relu(a)).T @ flat(dout)}
    da = (dout @ p["W_up"].T) * relu_grad(a)
    g["W_down"] = flat(ln).T @ flat(da)
    g["b_down"] = flat(da).sum(axis=0)
    dft, g["ln_gain"], g["ln_bias"] = layer_norm_backward(da @ p["W_down"].T, ln_cache)
    return dft, g


def block_forward(f_prev, params, l, config, guidance=None):
    """One transformer block; returns ``(f_out, attention, cache)``."""
    mode = config.mode
    if mode == "sage" and guidance is None:
        raise ValueError("sage mode requires a guidance vector")
    bp = sub_params(params, f"blocks.{l}.")
    m, A, msa_cache = msa_forward(f_prev, bp["W_q"], bp["W_k"], bp["W_v"], bp["W_o"], config.heads)
    ft = m + f_prev
    ln, ln_cache = layer_norm_forward(ft, bp["ln_gain"], bp["ln_bias"])
    a1 = ln @ bp["W_fc1"] + bp["b_fc1"]
    g1 = gelu(a1)
    out = g1 @ bp["W_fc2"] + bp["b_fc2"] + ft
    ad_cache = None
    if mode == "adaptformer":
        ap = sub_params(params, f"af.{l}.")
        ad, ad_cache = _adaptformer_forward(ft, ap)
        out = out + ap["s"] * ad
    elif mode == "sage":
        sp = sub_params(params, f"sg.{l}.")
        ad, ad_cache = sg_adapter.sg_forward(ft, guidance, sp, config.alpha)
        out = out + sp["s_block"] * ad
    else:
        ad = None
    cache = (l, mode, msa_cache, ft, ln, ln_cache, a1, g1, ad, ad_cache)
    return out, A, cache


def block_backward(dout, cache, params, config, base_grads=True):
    """Returns ``(df_prev, grads, dguidance)``; grads use full parameter names."""
    l, mode, msa_cache, ft, ln, ln_cache, a1, g1, ad, ad_cache = cache
    bp = sub_params(params, f"blocks.{l}.")
    grads = {}
    dguidance = None
    flat = lambda x: x.reshape(-1, x.shape[-1])

    dft = dout.copy()
    if mode == "adaptformer":
        ap = sub_params(params, f"af.{l}.")
        grads[f"af.{l}.s"] = np.array(np.sum(dout * ad))
        d_in, g = _adaptformer_backward(ap["s"] * dout, ad_cache, ap)
        dft += d_in
        for k, v in g.items():
            grads[f"af.{l}.{k}"] = v
    elif mode == "sage":
        sp = sub_params(params, f"sg.{l}.")
        d_in, g, dguidance = sg_adapter.sg_backward(sp["s_block"] * dout, ad_cache)
        g["s_block"] = np.array(np.sum(dout * ad))
        dft += d_in
        for k, v in g.items():
            grads[f"sg.{l}.{k}"] = v

    dg1 = dout @ bp["W_fc2"].T
    da1 = dg1 * gelu_grad(a1)
    dln = da1 @ bp["W_fc1"].T
    d_ln_in, dgain, dbias = layer_norm_backward(dln, ln_cache)
    dft += d_ln_in
    if base_grads:
        p = f"blocks.{l}."
        grads[p + "W_fc2"] = flat(g1).T @ flat(dout)
        grads[p + "b_fc2"] = flat(dout).sum(axis=0)
        grads[p + "W_fc1"] = flat(ln).T @ flat(da1)
        grads[p + "b_fc1"] = flat(da1).sum(axis=0)
        grads[p + "ln_gain"] = dgain
        grads[p + "ln_bias"] = dbias

    df_prev, mg = msa_backward(
        dft, msa_cache, bp["W_q"], bp["W_k"], bp["W_v"], bp["W_o"], config.heads,
        want_weights=base_grads,
    )
    df_prev = df_prev + dft
    for k, v in mg.items():
        grads[f"blocks.{l}.{k}"] = v
    return df_prev, grads, dguidance


def encode(images, params, config, guidance=None):
    """CLS features of the last block plus stacked attention maps.

    Returns ``(f, attentions, cache)`` where ``f`` is ``(b, d)`` and
    ``attentions`` is ``(depth, b, heads, tokens, tokens)``.
    """
    x, patches = embed_forward(images, params, config)
    caches, attns = [], []
    for l in range(config.depth):
        x, A, c = block_forward(x, params, l, config, guidance)
        caches.append(c)
        attns.append(A)
    if attns:
        attentions = np.stack(attns)
    else:
        attentions = np.zeros((0, x.shape[0], config.heads, config.tokens, config.tokens))
    return x[:, 0].copy(), attentions, (x.shape, patches, caches)


def encode_backward(df, cache, params, config, base_grads=True):
    """Backprop a gradient on the CLS features; returns ``(grads, dguidance)``."""
    shape, patches, caches = cache
    dx = np.zeros(shape)
    dx[:, 0] = df
    grads = {}
    dguidance = np.zeros(config.width) if config.mode == "sage" else None
    for c in reversed(caches):
        dx, g, dgd = block_backward(dx, c, params, config, base_grads)
        grads.update(g)
        if dgd is not None:
            dguidance += dgd
    if base_grads:
        grads.update(embed_backward(dx, patches))
    return grads, dguidance


# ---------------------------------------------------------------------------
# snapshot format: little-endian header + named float64 arrays, JSON manifest

MAGIC = b"SGLT"
VERSION = 1


def save_snapshot(path, config, params):
    """Write ``path`` (binary) and ``path + '.json'`` (manifest).

    Header: magic, u32 version, u32 fields depth, width, heads, bottleneck,
    grid, patch, mode index. Arrays follow in sorted-name order.
    """
    header = MAGIC + struct.pack(
        "<8I", VERSION, config.depth, config.width, config.heads, config.bottleneck,
        config.grid, config.patch, MODES.index(config.mode),
    )
    manifest = {"version": VERSION, "config": asdict(config), "arrays": []}
    offset = len(header)
    chunks = [header]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        manifest["arrays"].append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(str(path) + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_snapshot(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    with open(str(path) + ".json") as fh:
        manifest = json.load(fh)
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not an encoder snapshot")
    fields = struct.unpack("<8I", raw[4:36])
    if fields[0] != VERSION:
        raise ValueError(f"unsupported snapshot version {fields[0]}")
    cfg = EncoderConfig(**manifest["config"])
    if (cfg.depth, cfg.width, cfg.heads, cfg.bottleneck, cfg.grid, cfg.patch) != fields[1:7]:
        raise ValueError("snapshot header disagrees with manifest")
    params = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return cfg, params
