"""Tiny frozen vision transformer with prompt injection points.

All math is plain numpy with hand-written backward passes, so gradients
with respect to prompts (and, during pretraining, weights) are available
without an autograd framework. The backbone also supports an embedding
pass-through mode for externally produced feature vectors; prompt
injection is unavailable there.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .numerics import Adam, LinearHead, softmax_cross_entropy_batch

LN_EPS = 1e-6

PROMPT_TUNING = "ProT"
PREFIX_TUNING = "PreT"


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    dtype: str = "float32"  # "float32" | "float64"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def tokens(self) -> int:
        """Sequence length including the class token."""
        return 1 + self.n_patches


@dataclass(frozen=True)
class PromptInjectionPlan:
    """Where and how prompts enter the transformer."""

    mode: str = PREFIX_TUNING
    layers: tuple[int, ...] = (0, 1)  # 0-indexed block indices
    prompt_len: int = 20

    def __post_init__(self):
        if self.mode not in (PROMPT_TUNING, PREFIX_TUNING):
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be non-negative")
        if self.mode == PREFIX_TUNING and self.prompt_len % 2 != 0:
            raise ValueError("prefix tuning needs an even prompt_len (key/value halves)")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("duplicate layer index in plan")

    def validate_for(self, config: BackboneConfig) -> None:
        for l in self.layers:
            if not 0 <= l < config.depth:
                raise ValueError(f"plan layer {l} outside depth {config.depth}")


def _init_params(config: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = config.dim
    hidden = d * config.mlp_ratio
    patch_dim = config.patch_size * config.patch_size * config.channels
    dt = config.np_dtype

    def linear(fan_in, fan_out):
        # Xavier scaling keeps signal through the stacked blocks; a flat
        # 0.02 init leaves this small model untrainable in CPU budgets
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return (rng.standard_normal((fan_in, fan_out)) * std).astype(dt)

    def embed(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(dt)

    params: dict[str, np.ndarray] = {
        "patch.w": linear(patch_dim, d),
        "patch.b": np.zeros(d, dtype=dt),
        "cls": embed(d),
        "pos": embed(config.tokens, d),
        "final_ln.g": np.ones(d, dtype=dt),
        "final_ln.b": np.zeros(d, dtype=dt),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        params[p + "ln1.g"] = np.ones(d, dtype=dt)
        params[p + "ln1.b"] = np.zeros(d, dtype=dt)
        params[p + "wq"] = linear(d, d)
        params[p + "bq"] = np.zeros(d, dtype=dt)
        params[p + "wk"] = linear(d, d)
        params[p + "bk"] = np.zeros(d, dtype=dt)
        params[p + "wv"] = linear(d, d)
        params[p + "bv"] = np.zeros(d, dtype=dt)
        params[p + "wo"] = linear(d, d)
        params[p + "bo"] = np.zeros(d, dtype=dt)
        params[p + "ln2.g"] = np.ones(d, dtype=dt)
        params[p + "ln2.b"] = np.zeros(d, dtype=dt)
        params[p + "mlp.w1"] = linear(d, hidden)
        params[p + "mlp.b1"] = np.zeros(hidden, dtype=dt)
        params[p + "mlp.w2"] = linear(hidden, d)
        params[p + "mlp.b2"] = np.zeros(d, dtype=dt)
    return params


class Backbone:
    """Feature extractor: a tiny ViT, or a pass-through over stored embeddings.

    The ViT must be frozen (checksummed) before it may serve features to
    the continual learner; the embedding mode is frozen by construction.
    """

    def __init__(self, config: BackboneConfig | None,
                 params: dict[str, np.ndarray] | None,
                 embedding_dim: int | None = None):
        if (config is None) != (params is None):
            raise ValueError("config and params must be provided together")
        if config is None and embedding_dim is None:
            raise ValueError("need either ViT params or an embedding dimension")
        self.config = config
        self.params = params
        self.embedding_dim = embedding_dim
        self.frozen = config is None  # embedding mode has nothing to train
        self._checksum: str | None = self.checksum() if self.frozen else None

    # -- construction ------------------------------------------------------

    @classmethod
    def random_init(cls, config: BackboneConfig, seed: int = 0) -> "Backbone":
        rng = np.random.default_rng(seed)
        return cls(config, _init_params(config, rng))

    @classmethod
    def embedding_mode(cls, dim: int) -> "Backbone":
        return cls(None, None, embedding_dim=dim)

    @property
    def is_embedding_mode(self) -> bool:
        return self.config is None

    @property
    def dim(self) -> int:
        return self.embedding_dim if self.is_embedding_mode else self.config.dim

    # -- freezing ----------------------------------------------------------

    def checksum(self) -> str:
        h = hashlib.sha256()
        if self.is_embedding_mode:
            h.update(b"embedding-mode")
            h.update(str(self.embedding_dim).encode())
        else:
            for name in sorted(self.params):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def freeze(self) -> str:
        self.frozen = True
        self._checksum = self.checksum()
        return self._checksum

    @property
    def frozen_checksum(self) -> str | None:
        return self._checksum

    def verify_frozen(self) -> None:
        if not self.frozen:
            raise RuntimeError("backbone is not frozen")
        if self.checksum() != self._checksum:
            raise RuntimeError("frozen backbone weights changed after freeze")

    def block_params(self, i: int) -> dict[str, np.ndarray]:
        p = f"blocks.{i}."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}


# -- primitive layers --------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    return dx, dg, db


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu(x):
    """Tanh-approximation GELU; returns (value, tanh term) for backward."""
    u = x * x
    u *= _GELU_A
    u += 1.0
    u *= x
    u *= _GELU_C
    t = np.tanh(u)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t


def _gelu_grad(x, t):
    du = x * x
    du *= 3.0 * _GELU_A
    du += 1.0
    du *= _GELU_C
    du *= x
    sech2 = 1.0 - t * t
    du *= sech2
    du += t
    du += 1.0
    du *= 0.5
    return du


def _split_heads(x, heads):
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, m, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, m * dh)


def _msa_forward(q_in, k_in, v_in, layer, heads):
    q = _split_heads(q_in @ layer["wq"] + layer["bq"], heads)
    k = _split_heads(k_in @ layer["wk"] + layer["bk"], heads)
    v = _split_heads(v_in @ layer["wv"] + layer["bv"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(attn @ v)
    out = ctx @ layer["wo"] + layer["bo"]
    cache = (q_in, k_in, v_in, q, k, v, attn, ctx, scale)
    return out, cache


def _msa_backward(dout, layer, cache, heads, need_weight_grads):
    q_in, k_in, v_in, q, k, v, attn, ctx, scale = cache
    d = dout.shape[-1]
    wgrads = {}

    dctx = dout @ layer["wo"].T
    if need_weight_grads:
        wgrads["wo"] = ctx.reshape(-1, d).T @ dout.reshape(-1, d)
        wgrads["bo"] = dout.sum(axis=(0, 1))

    dheads = _split_heads(dctx, heads)          # [B, m, Lq, dh]
    dattn = dheads @ v.transpose(0, 1, 3, 2)     # [B, m, Lq, Lk]
    dv = attn.transpose(0, 1, 3, 2) @ dheads     # [B, m, Lk, dh]
    # softmax backward over the key axis
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    dq_in = dq_m @ layer["wq"].T
    dk_in = dk_m @ layer["wk"].T
    dv_in = dv_m @ layer["wv"].T
    if need_weight_grads:
        wgrads["wq"] = q_in.reshape(-1, d).T @ dq_m.reshape(-1, d)
        wgrads["bq"] = dq_m.sum(axis=(0, 1))
        wgrads["wk"] = k_in.reshape(-1, d).T @ dk_m.reshape(-1, d)
        wgrads["bk"] = dk_m.sum(axis=(0, 1))
        wgrads["wv"] = v_in.reshape(-1, d).T @ dv_m.reshape(-1, d)
        wgrads["bv"] = dv_m.sum(axis=(0, 1))
    return dq_in, dk_in, dv_in, wgrads


# -- public spec operations ---------------------------------------------------


def attach_prompt(p: np.ndarray | None, h: np.ndarray, mode: str):
    """Build the (query, key, value) inputs for one attention layer.

    ProT prepends the full prompt to all three; PreT leaves the query
    alone and prepends the two prompt halves to key and value.
    """
    if p is None or p.shape[0] == 0:
        return h, h, h
    if p.ndim != 2 or h.ndim != 2 or p.shape[1] != h.shape[1]:
        raise ValueError(f"prompt/sequence width mismatch: {p.shape} vs {h.shape}")
    if mode == PROMPT_TUNING:
        ph = np.concatenate([p, h], axis=0)
        return ph, ph, ph
    if mode == PREFIX_TUNING:
        if p.shape[0] % 2 != 0:
            raise ValueError("prefix tuning needs an even prompt length")
        half = p.shape[0] // 2
        return h, np.concatenate([p[:half], h], axis=0), np.concatenate([p[half:], h], axis=0)
    raise ValueError(f"unknown prompt mode {mode!r}")


def msa(h_q: np.ndarray, h_k: np.ndarray, h_v: np.ndarray,
        layer: dict[str, np.ndarray], heads: int,
        return_attention: bool = False):
    """Multi-head scaled dot-product attention over one token sequence.

    Output sequence length equals len(h_q): prompt-extended queries (ProT)
    grow the output, prefix-extended keys/values (PreT) do not.
    """
    d = h_q.shape[-1]
    if d % heads != 0:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    if h_k.shape[0] != h_v.shape[0]:
        raise ValueError("key and value sequences must share their length")
    out, cache = _msa_forward(h_q[None], h_k[None], h_v[None], layer, heads)
    if return_attention:
        return out[0], cache[6][0]
    return out[0]


def patch_embed(backbone: Backbone, images: np.ndarray) -> np.ndarray:
    """Tokenize images: patch projection, class token, positional embeddings."""
    if backbone.is_embedding_mode:
        raise RuntimeError("patch_embed is unavailable in embedding mode")
    cfg = backbone.config
    single = images.ndim == 3
    x = images[None] if single else images
    b, hgt, wid, c = x.shape
    if hgt % cfg.patch_size or wid % cfg.patch_size:
        raise ValueError(
            f"image {hgt}x{wid} not divisible by patch size {cfg.patch_size}")
    if c != cfg.channels:
        raise ValueError(f"expected {cfg.channels} channels, got {c}")
    tokens, _ = _tokenize(backbone.params, cfg, x.astype(cfg.np_dtype, copy=False))
    return tokens[0] if single else tokens


def _tokenize(params, cfg, x):
    b, hgt, wid, c = x.shape
    ps = cfg.patch_size
    patches = (
        x.reshape(b, hgt // ps, ps, wid // ps, ps, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, (hgt // ps) * (wid // ps), ps * ps * c)
    )
    proj = patches @ params["patch.w"] + params["patch.b"]
    cls = np.broadcast_to(params["cls"], (b, 1, cfg.dim))
    tokens = np.concatenate([cls, proj], axis=1) + params["pos"]
    return tokens, patches


def forward_features(backbone: Backbone, x: np.ndarray,
                     prompts: dict[int, np.ndarray] | None = None,
                     plan: PromptInjectionPlan | None = None,
                     need_cache: bool = False):
    """Run the transformer and return final class-token representations.

    `x` is an image batch [B, H, W, C] (or a single [H, W, C] image); in
    embedding mode it is the stored vector(s), returned unchanged. When
    prompts are given, `plan` decides where and how they attach.
    """
    if backbone.is_embedding_mode:
        if prompts:
            raise RuntimeError("prompt injection is unsupported in embedding mode")
        return (x, None) if need_cache else x

    cfg = backbone.config
    params = backbone.params
    single = x.ndim == 3
    xb = (x[None] if single else x).astype(cfg.np_dtype, copy=False)
    if prompts:
        if plan is None:
            raise ValueError("prompts supplied without an injection plan")
        plan.validate_for(cfg)

    tokens, patches = _tokenize(params, cfg, xb)
    cls_index = 0
    cache = {"patches": patches, "blocks": [], "shape": xb.shape}
    h = tokens
    for i in range(cfg.depth):
        layer = backbone.block_params(i)
        p = prompts.get(i) if prompts else None
        if p is not None and p.shape[0] == 0:
            p = None
        blk = {"prompt_len": 0 if p is None else p.shape[0], "mode": None}
        if p is not None:
            blk["mode"] = plan.mode
            if plan.mode == PROMPT_TUNING:
                h = np.concatenate(
                    [np.broadcast_to(p, (h.shape[0],) + p.shape), h], axis=1)
                cls_index += p.shape[0]
        u, ln1_cache = _ln_forward(h, layer["ln1.g"], layer["ln1.b"])
        if p is not None and plan.mode == PREFIX_TUNING:
            half = p.shape[0] // 2
            pk = np.broadcast_to(p[:half], (u.shape[0], half, cfg.dim))
            pv = np.broadcast_to(p[half:], (u.shape[0], half, cfg.dim))
            k_in = np.concatenate([pk, u], axis=1)
            v_in = np.concatenate([pv, u], axis=1)
        else:
            k_in = v_in = u
        attn, msa_cache = _msa_forward(u, k_in, v_in, layer, cfg.heads)
        h1 = h + attn
        u2, ln2_cache = _ln_forward(h1, layer["ln2.g"], layer["ln2.b"])
        pre = u2 @ layer["mlp.w1"] + layer["mlp.b1"]
        act, tanh_term = _gelu(pre)
        h = h1 + act @ layer["mlp.w2"] + layer["mlp.b2"]
        blk.update(ln1=ln1_cache, msa=msa_cache, ln2=ln2_cache, pre=pre,
                   act=act, tanh=tanh_term)
        cache["blocks"].append(blk)
    final, fin_cache = _ln_forward(h, params["final_ln.g"], params["final_ln.b"])
    cache["final_ln"] = fin_cache
    cache["cls_index"] = cls_index
    cache["seq_len"] = final.shape[1]
    reps = final[:, cls_index, :]
    reps_out = reps[0] if single else reps
    return (reps_out, cache) if need_cache else reps_out


def backward_features(backbone: Backbone, cache: dict, drep: np.ndarray,
                      need_weight_grads: bool = False):
    """Backpropagate d(loss)/d(representation) through the transformer.

    Returns (prompt_grads, weight_grads); prompt grads are summed over the
    batch, keyed by block index. weight_grads is empty unless requested.
    """
    cfg = backbone.config
    params = backbone.params
    if drep.ndim == 1:
        drep = drep[None]
    b = cache["shape"][0]
    dfinal = np.zeros((b, cache["seq_len"], cfg.dim), dtype=drep.dtype)
    dfinal[:, cache["cls_index"], :] = drep

    wgrads: dict[str, np.ndarray] = {}
    dh, dgf, dbf = _ln_backward(dfinal, cache["final_ln"])
    if need_weight_grads:
        wgrads["final_ln.g"] = dgf
        wgrads["final_ln.b"] = dbf

    prompt_grads: dict[int, np.ndarray] = {}
    for i in reversed(range(cfg.depth)):
        layer = backbone.block_params(i)
        blk = cache["blocks"][i]
        pfx = f"blocks.{i}."

        # MLP branch
        dact = dh @ layer["mlp.w2"].T
        dpre = dact * _gelu_grad(blk["pre"], blk["tanh"])
        du2 = dpre @ layer["mlp.w1"].T
        if need_weight_grads:
            hidden = blk["act"].shape[-1]
            wgrads[pfx + "mlp.w2"] = blk["act"].reshape(-1, hidden).T @ dh.reshape(-1, cfg.dim)
            wgrads[pfx + "mlp.b2"] = dh.sum(axis=(0, 1))
            u2 = blk["ln2"][0] * layer["ln2.g"] + layer["ln2.b"]
            wgrads[pfx + "mlp.w1"] = u2.reshape(-1, cfg.dim).T @ dpre.reshape(-1, hidden)
            wgrads[pfx + "mlp.b1"] = dpre.sum(axis=(0, 1))
        dh1, dg2, db2 = _ln_backward(du2, blk["ln2"])
        dh1 = dh1 + dh  # residual
        if need_weight_grads:
            wgrads[pfx + "ln2.g"] = dg2
            wgrads[pfx + "ln2.b"] = db2

        # attention branch
        dq_in, dk_in, dv_in, mw = _msa_backward(
            dh1, layer, blk["msa"], cfg.heads, need_weight_grads)
        if need_weight_grads:
            for k, v in mw.items():
                wgrads[pfx + k] = v

        lp = blk["prompt_len"]
        if lp and blk["mode"] == PREFIX_TUNING:
            half = lp // 2
            gk = dk_in[:, :half].sum(axis=0)
            gv = dv_in[:, :half].sum(axis=0)
            prompt_grads[i] = np.concatenate([gk, gv], axis=0)
            du = dq_in + dk_in[:, half:] + dv_in[:, half:]
        else:
            du = dq_in + dk_in + dv_in
        dx, dg1, db1 = _ln_backward(du, blk["ln1"])
        dh = dx + dh1  # residual
        if need_weight_grads:
            wgrads[pfx + "ln1.g"] = dg1
            wgrads[pfx + "ln1.b"] = db1
        if lp and blk["mode"] == PROMPT_TUNING:
            prompt_grads[i] = dh[:, :lp].sum(axis=0)
            dh = dh[:, lp:]

    if need_weight_grads:
        wgrads["pos"] = dh.sum(axis=0)
        wgrads["cls"] = dh[:, 0, :].sum(axis=0)
        dproj = dh[:, 1:, :]
        patches = cache["patches"]
        pd = patches.shape[-1]
        wgrads["patch.w"] = patches.reshape(-1, pd).T @ dproj.reshape(-1, cfg.dim)
        wgrads["patch.b"] = dproj.sum(axis=(0, 1))
    return prompt_grads, wgrads


def forward_uninstructed(backbone: Backbone, x: np.ndarray) -> np.ndarray:
    """Prompt-free representation q(x): the final-layer class token."""
    backbone.verify_frozen()
    return forward_features(backbone, x)


def forward_instructed(backbone: Backbone, x: np.ndarray,
                       prompts: dict[int, np.ndarray],
                       plan: PromptInjectionPlan) -> np.ndarray:
    """Representation under a task prompt, f(x; p)."""
    backbone.verify_frozen()
    if backbone.is_embedding_mode:
        raise RuntimeError(
            "instructed forward is unsupported in embedding mode (no transformer)")
    return forward_features(backbone, x, prompts=prompts, plan=plan)


def pretrain_backbone(images: np.ndarray, labels: np.ndarray,
                      config: BackboneConfig, epochs: int, seed: int = 0,
                      lr: float = 1e-3, batch_size: int = 32) -> Backbone:
    """Supervised warm-up of the tiny ViT on auxiliary data, then freeze.

    Uses a throwaway linear head that is discarded afterwards. epochs=0
    returns a frozen randomly initialized backbone.
    """
    if len(images) == 0:
        raise ValueError("pretraining dataset is empty")
    if len(images) != len(labels):
        raise ValueError("images and labels disagree in length")
    backbone = Backbone.random_init(config, seed=seed)
    n_classes = int(np.max(labels)) + 1
    rng = np.random.default_rng(seed + 1)
    head = LinearHead(
        w=(rng.standard_normal((config.dim, n_classes)) * 0.02).astype(config.np_dtype),
        b=np.zeros(n_classes, dtype=config.np_dtype),
    )
    opt = Adam(lr=lr)
    labels = np.asarray(labels, dtype=np.intp)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), batch_size):
            idx = order[start:start + batch_size]
            reps, cache = forward_features(backbone, images[idx], need_cache=True)
            logits = head.logits(reps)
            _, dlogits = softmax_cross_entropy_batch(
                logits.astype(np.float64), labels[idx])
            dw, db, drep = head.backward(reps, dlogits.astype(config.np_dtype))
            _, wgrads = backward_features(backbone, cache, drep,
                                          need_weight_grads=True)
            new = opt.update(
                {**backbone.params, "head.w": head.w, "head.b": head.b},
                {**wgrads, "head.w": dw, "head.b": db},
            )
            head.w = new.pop("head.w")
            head.b = new.pop("head.b")
            backbone.params = new
    backbone.freeze()
    return backbone
