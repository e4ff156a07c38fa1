"""Tiny transformer encoder over token frames, in plain numpy.

PreLN residual blocks (rotary self-attention, then a ReLU FFN), a final
LayerNorm, and one classification head per codebook layer. Forward and
backward are written out explicitly in float64 so gradients can be
checked against finite differences. Scale is desk-sized by design; there
is no GPU path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .conditioning import EmbeddingTables, assemble_backward, assemble_input

__all__ = [
    "ModelConfig",
    "init_params",
    "model_tables",
    "forward",
    "backward",
    "merge_table_grads",
    "Model",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale defaults; d_model must split into even-sized head pairs."""

    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    num_codebooks: int = 3
    vocab_size: int = 16
    ling_vocab: int = 8
    d_ling: int = 16
    dropout: float = 0.05
    layer_drop: float = 0.05

    def __post_init__(self):
        counts = (
            self.layers, self.heads, self.d_model, self.d_ffn,
            self.num_codebooks, self.vocab_size, self.ling_vocab, self.d_ling,
        )
        if any(n < 1 for n in counts):
            raise ValueError("all size fields must be >= 1")
        if self.d_model % (2 * self.heads) != 0:
            raise ValueError(
                f"d_model={self.d_model} must be divisible by 2*heads={2 * self.heads}"
            )
        for name in ("dropout", "layer_drop"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """Normal(0, 0.02) weights and embeddings, zero biases, unit LN gains."""
    d, dff = cfg.d_model, cfg.d_ffn
    sd = 0.02

    def w(*shape):
        return rng.normal(0.0, sd, size=shape)

    p: dict = {}
    for c in range(cfg.num_codebooks):
        # row K is the layer's learned mask embedding
        p[f"emb_tok_{c}"] = w(cfg.vocab_size + 1, d)
    p["emb_ling"] = w(cfg.ling_vocab, d)
    p["emb_ling_mask"] = w(d)
    p["emb_pitch_mask"] = w(d)
    p["cont_w1"] = w(cfg.d_ling, d)
    p["cont_b1"] = np.zeros(d)
    p["cont_ln_g"] = np.ones(d)
    p["cont_ln_b"] = np.zeros(d)
    p["cont_w2"] = w(d, d)
    p["cont_b2"] = np.zeros(d)
    for l in range(cfg.layers):
        p[f"ln1_g_{l}"] = np.ones(d)
        p[f"ln1_b_{l}"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            p[f"w{name}_{l}"] = w(d, d)
            p[f"b{name}_{l}"] = np.zeros(d)
        p[f"ln2_g_{l}"] = np.ones(d)
        p[f"ln2_b_{l}"] = np.zeros(d)
        p[f"ffn_w1_{l}"] = w(d, dff)
        p[f"ffn_b1_{l}"] = np.zeros(dff)
        p[f"ffn_w2_{l}"] = w(dff, d)
        p[f"ffn_b2_{l}"] = np.zeros(d)
    p["ln_f_g"] = np.ones(d)
    p["ln_f_b"] = np.zeros(d)
    for c in range(cfg.num_codebooks):
        p[f"head_w_{c}"] = w(d, cfg.vocab_size)
        p[f"head_b_{c}"] = np.zeros(cfg.vocab_size)
    return p


def model_tables(params: dict, cfg: ModelConfig) -> EmbeddingTables:
    """Zero-copy view of the conditioning tables inside the param dict."""
    return EmbeddingTables(
        tok=[params[f"emb_tok_{c}"] for c in range(cfg.num_codebooks)],
        ling=params["emb_ling"],
        ling_mask=params["emb_ling_mask"],
        pitch_mask=params["emb_pitch_mask"],
        cont_w1=params["cont_w1"],
        cont_b1=params["cont_b1"],
        cont_ln_g=params["cont_ln_g"],
        cont_ln_b=params["cont_ln_b"],
        cont_w2=params["cont_w2"],
        cont_b2=params["cont_b2"],
    )


def merge_table_grads(grads: dict, table_grads: dict, cfg: ModelConfig) -> None:
    """Fold assemble_backward output into a param-keyed gradient dict."""
    for c in range(cfg.num_codebooks):
        _accum(grads, f"emb_tok_{c}", table_grads["tok"][c])
    renames = {"ling": "emb_ling", "ling_mask": "emb_ling_mask", "pitch_mask": "emb_pitch_mask"}
    for src, dst in renames.items():
        _accum(grads, dst, table_grads[src])
    for key in ("cont_w1", "cont_b1", "cont_ln_g", "cont_ln_b", "cont_w2", "cont_b2"):
        _accum(grads, key, table_grads[key])


def _accum(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# --- primitive ops ----------------------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)

def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dmean = dxhat.mean(axis=-1, keepdims=True)
    dcov = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - dmean - xhat * dcov) * inv
    return dx, dg, db


def _rotary_tables(T: int, head_dim: int):
    # base 10000, pair j rotates at rate 10000^(-2j/head_dim)
    half = head_dim // 2
    rates = np.power(10000.0, -2.0 * np.arange(half) / head_dim)
    ang = np.arange(T)[:, None] * rates[None, :]
    return np.cos(ang), np.sin(ang)

def _apply_rotary(x, cos, sin, inverse: bool = False):
    """Rotate interleaved (even, odd) channel pairs of (H, T, hd) arrays."""
    if inverse:
        sin = -sin
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _split_heads(x, heads):
    T, d = x.shape
    return x.reshape(T, heads, d // heads).transpose(1, 0, 2)

def _merge_heads(x):
    H, T, hd = x.shape
    return x.transpose(1, 0, 2).reshape(T, H * hd)


def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(shape, rate, rng):
    return (rng.random(shape) >= rate) / (1.0 - rate)


# --- forward / backward -----------------------------------------------------


def forward(
    params: dict,
    cfg: ModelConfig,
    X: np.ndarray,
    num_prompt: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    want_cache: bool = False,
):
    """Encode (T_total, d_model) inputs; return (T_source, C, K) logits.

    Prompt frames participate in attention but their logits are dropped.
    With train_mode the per-layer drop and dropout draws come from ``rng``
    in a fixed order, so a seeded generator makes the pass reproducible.
    """
    if not np.isfinite(X).all():
        raise FloatingPointError("non-finite values in model input")
    if train_mode and rng is None:
        raise ValueError("train_mode forward needs an rng")
    T, d = X.shape
    if d != cfg.d_model:
        raise ValueError(f"input width {d} != d_model {cfg.d_model}")
    if not 0 <= num_prompt < T:
        raise ValueError(f"prompt length {num_prompt} outside [0, {T})")

    cos, sin = _rotary_tables(T, cfg.head_dim)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    x = X
    layer_caches = []
    for l in range(cfg.layers):
        if train_mode and rng.random() < cfg.layer_drop:
            layer_caches.append(None)  # whole residual block skipped
            continue
        x_in = x
        a_ln, ln1_cache = _layer_norm(x, params[f"ln1_g_{l}"], params[f"ln1_b_{l}"])
        q = _split_heads(a_ln @ params[f"wq_{l}"] + params[f"bq_{l}"], cfg.heads)
        k = _split_heads(a_ln @ params[f"wk_{l}"] + params[f"bk_{l}"], cfg.heads)
        v = _split_heads(a_ln @ params[f"wv_{l}"] + params[f"bv_{l}"], cfg.heads)
        qr = _apply_rotary(q, cos, sin)
        kr = _apply_rotary(k, cos, sin)
        att = _softmax_last((qr @ kr.transpose(0, 2, 1)) * scale)
        ctx = _merge_heads(att @ v)
        attn_out = ctx @ params[f"wo_{l}"] + params[f"bo_{l}"]
        attn_drop = None
        if train_mode and cfg.dropout > 0:
            attn_drop = _dropout_mask(attn_out.shape, cfg.dropout, rng)
            attn_out = attn_out * attn_drop
        x = x_in + attn_out

        f_in = x
        f_ln, ln2_cache = _layer_norm(x, params[f"ln2_g_{l}"], params[f"ln2_b_{l}"])
        h = np.maximum(f_ln @ params[f"ffn_w1_{l}"] + params[f"ffn_b1_{l}"], 0.0)
        y = h @ params[f"ffn_w2_{l}"] + params[f"ffn_b2_{l}"]
        ffn_drop = None
        if train_mode and cfg.dropout > 0:
            ffn_drop = _dropout_mask(y.shape, cfg.dropout, rng)
            y = y * ffn_drop
        x = f_in + y
        layer_caches.append({
            "ln1": ln1_cache, "a_ln": a_ln, "qr": qr, "kr": kr, "v": v,
            "att": att, "ctx": ctx, "attn_drop": attn_drop,
            "ln2": ln2_cache, "f_ln": f_ln, "h": h, "ffn_drop": ffn_drop,
        })

    src = x[num_prompt:]
    h_f, lnf_cache = _layer_norm(src, params["ln_f_g"], params["ln_f_b"])
    logits = np.empty((T - num_prompt, cfg.num_codebooks, cfg.vocab_size))
    for c in range(cfg.num_codebooks):
        logits[:, c, :] = h_f @ params[f"head_w_{c}"] + params[f"head_b_{c}"]

    if not want_cache:
        return logits
    cache = {
        "T": T, "num_prompt": num_prompt, "cos": cos, "sin": sin,
        "layers": layer_caches, "h_f": h_f, "lnf": lnf_cache,
    }
    return logits, cache


def backward(params: dict, cfg: ModelConfig, cache: dict, dlogits: np.ndarray):
    """Gradients w.r.t. every parameter plus the assembled input.

    Returns (grads dict keyed like params, dX of shape (T_total, d_model)).
    """
    T, num_prompt = cache["T"], cache["num_prompt"]
    cos, sin = cache["cos"], cache["sin"]
    h_f = cache["h_f"]
    scale = 1.0 / np.sqrt(cfg.head_dim)
    grads: dict = {}

    dh_f = np.zeros_like(h_f)
    for c in range(cfg.num_codebooks):
        dl = dlogits[:, c, :]
        grads[f"head_w_{c}"] = h_f.T @ dl
        grads[f"head_b_{c}"] = dl.sum(axis=0)
        dh_f += dl @ params[f"head_w_{c}"].T
    dsrc, dg, db = _layer_norm_backward(dh_f, cache["lnf"], params["ln_f_g"])
    grads["ln_f_g"], grads["ln_f_b"] = dg, db
    dx = np.zeros((T, cfg.d_model))
    dx[num_prompt:] = dsrc

    for l in range(cfg.layers - 1, -1, -1):
        lc = cache["layers"][l]
        if lc is None:
            continue
        # FFN sublayer
        dy = dx if lc["ffn_drop"] is None else dx * lc["ffn_drop"]
        h, f_ln = lc["h"], lc["f_ln"]
        grads[f"ffn_w2_{l}"] = h.T @ dy
        grads[f"ffn_b2_{l}"] = dy.sum(axis=0)
        dh = (dy @ params[f"ffn_w2_{l}"].T) * (h > 0)
        grads[f"ffn_w1_{l}"] = f_ln.T @ dh
        grads[f"ffn_b1_{l}"] = dh.sum(axis=0)
        df_ln = dh @ params[f"ffn_w1_{l}"].T
        dx_ln, dg, db = _layer_norm_backward(df_ln, lc["ln2"], params[f"ln2_g_{l}"])
        grads[f"ln2_g_{l}"], grads[f"ln2_b_{l}"] = dg, db
        dx = dx + dx_ln

        # attention sublayer
        dattn = dx if lc["attn_drop"] is None else dx * lc["attn_drop"]
        ctx, att, v, qr, kr, a_ln = lc["ctx"], lc["att"], lc["v"], lc["qr"], lc["kr"], lc["a_ln"]
        grads[f"wo_{l}"] = ctx.T @ dattn
        grads[f"bo_{l}"] = dattn.sum(axis=0)
        dctx = _split_heads(dattn @ params[f"wo_{l}"].T, cfg.heads)
        datt = dctx @ v.transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ dctx
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dqr = (ds @ kr) * scale
        dkr = ds.transpose(0, 2, 1) @ qr * scale
        dq = _apply_rotary(dqr, cos, sin, inverse=True)
        dk = _apply_rotary(dkr, cos, sin, inverse=True)
        da_ln = np.zeros_like(a_ln)
        for name, dmat in (("q", dq), ("k", dk), ("v", dv)):
            flat = _merge_heads(dmat)
            grads[f"w{name}_{l}"] = a_ln.T @ flat
            grads[f"b{name}_{l}"] = flat.sum(axis=0)
            da_ln += flat @ params[f"w{name}_{l}"].T
        dx_ln, dg, db = _layer_norm_backward(da_ln, lc["ln1"], params[f"ln1_g_{l}"])
        grads[f"ln1_g_{l}"], grads[f"ln1_b_{l}"] = dg, db
        dx = dx + dx_ln

    for key, value in params.items():
        if key not in grads:
            grads[key] = np.zeros_like(value)
    return grads, dx


# --- model wrapper ----------------------------------------------------------


class Model:
    """Config + parameters, with conditioning assembly wired in."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
        return cls(cfg, init_params(cfg, rng))

    @property
    def tables(self) -> EmbeddingTables:
        return model_tables(self.params, self.cfg)

    def logits(self, bundle, acoustic, train_mode: bool = False, rng=None,
               want_cache: bool = False):
        """Assemble conditions + masked acoustics and run the encoder."""
        num_prompt = bundle.prompt_grid.num_frames
        if not want_cache:
            X = assemble_input(bundle, acoustic, self.tables, self.cfg.d_model)
            return forward(self.params, self.cfg, X, num_prompt, train_mode, rng)
        X, a_cache = assemble_input(
            bundle, acoustic, self.tables, self.cfg.d_model, want_cache=True
        )
        logits, f_cache = forward(
            self.params, self.cfg, X, num_prompt, train_mode, rng, want_cache=True
        )
        return logits, (a_cache, f_cache)

    def grads(self, dlogits: np.ndarray, caches) -> dict:
        """Full backward through encoder and conditioning tables."""
        a_cache, f_cache = caches
        grads, dX = backward(self.params, self.cfg, f_cache, dlogits)
        merge_table_grads(grads, assemble_backward(dX, a_cache, self.tables), self.cfg)
        return grads

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.params)

    @classmethod
    def load(cls, path) -> "Model":
        cfg, params = load_checkpoint(path)
        return cls(cfg, params)


def save_checkpoint(path, cfg: ModelConfig, params: dict, extra: dict | None = None) -> None:
    """Write config + named weight arrays to an .npz container."""
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(cfg)}
    if extra:
        meta["extra"] = extra
    arrays = {f"param:{k}": v for k, v in params.items()}
    blob = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __meta__=blob, **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        if "__meta__" not in z:
            raise ValueError("not a checkpoint: missing metadata record")
        meta = json.loads(bytes(z["__meta__"].tobytes()).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = ModelConfig(**meta["config"])
        params = {
            k[len("param:"):]: np.ascontiguousarray(z[k])
            for k in z.files if k.startswith("param:")
        }
    expected = set(init_params(cfg, np.random.default_rng(0)))
    if set(params) != expected:
        raise ValueError("checkpoint weight names do not match its config")
    return cfg, params
