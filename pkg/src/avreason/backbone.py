"""Small pre-norm decoder-only transformer over hybrid sequences.

Queries and keys of every head are rotated by the position plan's timestamps.
Execution is chunked: :func:`forward_chunk` extends a :class:`Cache` of rotated
keys and values, so a latent phase can be run one position at a time while the
tape still sees a single differentiable graph.  :func:`forward` is one chunk
over a fresh cache.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import ospe
from . import tensor as tc
from .errors import CapacityError, ContractError, DataError, NumericError, ShapeError
from .ospe import PositionPlan
from .sequence import (AudioFeature, HybridSequence, LatentState, Stop, TextToken, Trigger,
                       VisualFeature)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 64
    vocab_size: int = 64
    feature_dim_visual: int = 16
    feature_dim_audio: int = 16
    max_sequence: int = 512
    rope_base: float = 10000.0
    init_std: float = 0.02
    ffn_mult: int = 4

    def __post_init__(self):
        for name in ("layers", "heads", "dim", "vocab_size", "feature_dim_visual", "feature_dim_audio",
                     "max_sequence", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.dim % self.heads or (self.dim // self.heads) % 2:
            raise ContractError(f"dim {self.dim} must split into {self.heads} heads of even size")
        if self.vocab_size < 4:
            raise ContractError("vocab_size must be at least 4")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def as_dict(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.dim, cfg.ffn_mult * cfg.dim
    shapes = [
        ("embed", (cfg.vocab_size, d), "normal"),
        ("proj.visual", (cfg.feature_dim_visual, d), "normal"),
        ("proj.audio", (cfg.feature_dim_audio, d), "normal"),
    ]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.gain", (d,), "ones"), (p + "ln1.bias", (d,), "zeros"),
            (p + "attn.qkv.weight", (d, 3 * d), "normal"), (p + "attn.qkv.bias", (3 * d,), "zeros"),
            (p + "attn.out.weight", (d, d), "normal"), (p + "attn.out.bias", (d,), "zeros"),
            (p + "ln2.gain", (d,), "ones"), (p + "ln2.bias", (d,), "zeros"),
            (p + "ffn.in.weight", (d, f), "normal"), (p + "ffn.in.bias", (f,), "zeros"),
            (p + "ffn.out.weight", (f, d), "normal"), (p + "ffn.out.bias", (d,), "zeros"),
        ]
    shapes += [
        ("ln_f.gain", (d,), "ones"), ("ln_f.bias", (d,), "zeros"),
        ("head.weight", (d, cfg.vocab_size), "normal"), ("head.bias", (cfg.vocab_size,), "zeros"),
        ("sync.log_tau", (), "log_tau"),
    ]
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: "OrderedDict[str, tc.Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> tc.Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def parameters(self) -> list[tc.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "ModelState":
        out = ModelState(self.config)
        for k, v in self.params.items():
            out.params[k] = tc.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
        return out

    def is_finite(self) -> bool:
        return tc.parameters_finite(self.params.values())


def init_state(config: ModelConfig, seed: int = 0) -> ModelState:
    """Seeded initialization; parameters are created in manifest order."""
    from .losses import TAU_INIT

    rng = np.random.default_rng(seed)
    state = ModelState(config)
    for name, shape, kind in _param_shapes(config):
        if kind == "normal":
            data = rng.normal(0.0, config.init_std, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "log_tau":
            data = np.asarray(np.log(TAU_INIT))
        else:
            data = np.zeros(shape)
        state.params[name] = tc.Tensor(data, requires_grad=True, name=name)
    return state


# ---------------------------------------------------------------- embedding

def embed_element(element, state: ModelState) -> tc.Tensor:
    cfg = state.config
    if isinstance(element, (TextToken, Trigger, Stop)):
        if not 0 <= element.id < cfg.vocab_size:
            raise DataError(f"token id {element.id} outside vocabulary of {cfg.vocab_size}")
        return tc.embedding(state["embed"], element.id)
    if isinstance(element, LatentState):
        v = element.vector
        if v is None:
            raise DataError("latent state has no vector")
        v = tc.as_tensor(v)
        if v.shape != (cfg.dim,):
            raise ShapeError(f"latent state of shape {v.shape}, expected ({cfg.dim},)")
        return v
    if isinstance(element, (VisualFeature, AudioFeature)):
        key, width = (("proj.visual", cfg.feature_dim_visual) if isinstance(element, VisualFeature)
                      else ("proj.audio", cfg.feature_dim_audio))
        v = tc.as_tensor(element.vector)
        if v.shape != (width,):
            raise ShapeError(f"feature of shape {v.shape}, expected ({width},)")
        return tc.matmul(tc.reshape(v, (1, width)), state[key]).reshape(cfg.dim)
    raise DataError(f"cannot embed {type(element).__name__}")


def project_features(visual, audio, state: ModelState) -> tuple[tc.Tensor, tc.Tensor]:
    """Both prompt streams projected to the model width, one row per frame."""
    cfg = state.config
    visual = np.asarray(visual, dtype=np.float64).reshape(-1, cfg.feature_dim_visual)
    audio = np.asarray(audio, dtype=np.float64).reshape(-1, cfg.feature_dim_audio)
    return tc.linear(tc.Tensor(visual), state["proj.visual"]), tc.linear(tc.Tensor(audio), state["proj.audio"])


def embed_tokens(ids, state: ModelState) -> tc.Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= state.config.vocab_size):
        raise DataError(f"token id outside vocabulary of {state.config.vocab_size}")
    return tc.embedding(state["embed"], ids)


def embed_prompt(seq: HybridSequence, state: ModelState) -> tc.Tensor:
    parts = []
    if seq.n_visual or seq.n_audio:
        hv, ha = project_features(seq.visual if seq.n_visual else np.zeros((0,)),
                                  seq.audio if seq.n_audio else np.zeros((0,)), state)
        parts += [hv, ha]
    if seq.question:
        parts.append(embed_tokens(seq.question, state))
    if not parts:
        raise DataError("empty prompt")
    return tc.concat(parts) if len(parts) > 1 else parts[0]


def embed_elements(elements, state: ModelState) -> tc.Tensor:
    """Stack the embeddings of generated-region elements, batching runs of tokens."""
    rows: list[tc.Tensor] = []
    ids: list[int] = []
    for e in elements:
        if isinstance(e, (TextToken, Trigger, Stop)):
            ids.append(e.id)
            continue
        if ids:
            rows.append(embed_tokens(ids, state))
            ids = []
        rows.append(tc.reshape(embed_element(e, state), (1, state.config.dim)))
    if ids:
        rows.append(embed_tokens(ids, state))
    return tc.concat(rows) if len(rows) > 1 else rows[0]


# ---------------------------------------------------------------- attention

@dataclass
class Cache:
    """Per layer, the packed output of the last attention block (keys and values of every processed position)."""

    packed: list = field(default_factory=list)
    length: int = 0


@dataclass
class ChunkOutput:
    hidden: tc.Tensor  # [m, d], after the final norm
    logits: tc.Tensor  # [m, |V|]
    attention: list  # per layer, array [heads, m, n]


def _ln_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _ln_backward(g, gain, xhat, inv):
    gx_hat = g * gain
    gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _heads(a, heads):
    # [n, d] -> [heads, n, d/heads]
    n, d = a.shape
    return a.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge(a):
    h, n, hd = a.shape
    return a.transpose(1, 0, 2).reshape(n, h * hd)


def attention_block(x: tc.Tensor, prev: tc.Tensor | None, n0: int, params: Sequence[tc.Tensor], cos, sin,
                    heads: int) -> tuple[tc.Tensor, np.ndarray]:
    """Pre-norm causal self-attention with rotated queries and keys, plus the residual.

    ``prev`` is the previous block output of this layer covering ``n0``
    positions (None when ``n0`` is 0).  The result
    packs ``[keys (n rows); values (n rows); x + attention (m rows)]`` so later
    chunks can attend to every processed position.  Also returns the attention
    weights ``[heads, m, n]``.
    """
    gain, bias, w_qkv, b_qkv, w_o, b_o = params
    m, d = x.shape
    hd = d // heads
    s = 1.0 / np.sqrt(hd)
    h, xhat, inv = _ln_forward(x.data, gain.data, bias.data)
    qkv = h @ w_qkv.data + b_qkv.data
    q = _heads(qkv[:, :d], heads)
    k = _heads(qkv[:, d:2 * d], heads)
    v = _heads(qkv[:, 2 * d:], heads)
    qr = q * cos + ospe._pair_swap(q) * sin
    kr = k * cos + ospe._pair_swap(k) * sin
    if prev is not None:
        k_all = np.concatenate([_heads(prev.data[:n0], heads), kr], axis=1)
        v_all = np.concatenate([_heads(prev.data[n0:2 * n0], heads), v], axis=1)
    else:
        k_all, v_all = kr, v
    n = n0 + m
    mask = np.arange(n)[None, :] <= (n0 + np.arange(m))[:, None]
    scores = np.where(mask, (qr @ k_all.transpose(0, 2, 1)) * s, -np.inf)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    att = e / e.sum(axis=-1, keepdims=True)
    o = _merge(att @ v_all)
    out = x.data + o @ w_o.data + b_o.data
    packed = np.concatenate([_merge(k_all), _merge(v_all), out])

    def backward(g):
        gk_all = _heads(g[:n], heads)
        gv_all = _heads(g[n:2 * n], heads).copy()
        gout = g[2 * n:]
        gw_o = o.T @ gout
        gb_o = gout.sum(axis=0)
        go = _heads(gout @ w_o.data.T, heads)
        ga = go @ v_all.transpose(0, 2, 1)
        gv_all += att.transpose(0, 2, 1) @ go
        gs = att * (ga - (ga * att).sum(axis=-1, keepdims=True)) * s
        gqr = gs @ k_all
        gk_all = gk_all + gs.transpose(0, 2, 1) @ qr
        gkr = gk_all[:, n0:]
        gq = gqr * cos - ospe._pair_swap(gqr * sin)
        gk = gkr * cos - ospe._pair_swap(gkr * sin)
        gqkv = np.concatenate([_merge(gq), _merge(gk), _merge(gv_all[:, n0:])], axis=1)
        gw_qkv = h.T @ gqkv
        gb_qkv = gqkv.sum(axis=0)
        gx_ln, g_gain, g_bias = _ln_backward(gqkv @ w_qkv.data.T, gain.data, xhat, inv)
        grads = [gout + gx_ln]
        if prev is not None:
            gp = np.zeros_like(prev.data)
            gp[:n0] = _merge(gk_all[:, :n0])
            gp[n0:2 * n0] = _merge(gv_all[:, :n0])
            grads.append(gp)
        return tuple(grads) + (g_gain, g_bias, gw_qkv, gb_qkv, gw_o, gb_o)

    parents = (x,) + ((prev,) if prev is not None else ()) + tuple(params)
    return tc.custom_op(packed, parents, backward, "attention"), att


def ffn_block(x: tc.Tensor, params: Sequence[tc.Tensor]) -> tc.Tensor:
    """``x + W2 gelu(W1 norm(x) + b1) + b2``."""
    gain, bias, w1, b1, w2, b2 = params
    h, xhat, inv = _ln_forward(x.data, gain.data, bias.data)
    pre = h @ w1.data + b1.data
    c = np.sqrt(2.0 / np.pi)
    u = c * (pre + 0.044715 * pre ** 3)
    t = np.tanh(u)
    act = 0.5 * pre * (1.0 + t)
    out = x.data + act @ w2.data + b2.data

    def backward(g):
        gw2 = act.T @ g
        gb2 = g.sum(axis=0)
        gact = g @ w2.data.T
        dact = 0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * pre ** 2)
        gpre = gact * dact
        gx_ln, g_gain, g_bias = _ln_backward(gpre @ w1.data.T, gain.data, xhat, inv)
        return g + gx_ln, g_gain, g_bias, h.T @ gpre, gpre.sum(axis=0), gw2, gb2

    return tc.custom_op(out, (x,) + tuple(params), backward, "ffn")


def _layer_params(state: ModelState, i: int) -> tuple[list, list]:
    p = f"layers.{i}."
    attn = [state[p + n] for n in ("ln1.gain", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias",
                                   "attn.out.weight", "attn.out.bias")]
    ffn = [state[p + n] for n in ("ln2.gain", "ln2.bias", "ffn.in.weight", "ffn.in.bias",
                                  "ffn.out.weight", "ffn.out.bias")]
    return attn, ffn


def forward_chunk(x: tc.Tensor, timestamps, state: ModelState, cache: Cache) -> ChunkOutput:
    """Run ``m`` new positions (inputs ``x``) after the ``cache.length`` cached ones."""
    cfg = state.config
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ShapeError(f"forward expects inputs of shape [n, {cfg.dim}], got {x.shape}")
    m = x.shape[0]
    if timestamps.shape != (m,):
        raise ShapeError(f"{m} positions but {timestamps.shape} timestamps")
    n0 = cache.length
    if n0 + m > cfg.max_sequence:
        raise CapacityError(f"sequence of {n0 + m} positions exceeds max_sequence {cfg.max_sequence}")
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite input embedding")
    cos, sin = ospe.angles(timestamps, ospe.build_basis(cfg.head_dim, cfg.rope_base))
    cos, sin = cos[None], sin[None]
    n = n0 + m
    attention = []
    h = x
    for i in range(cfg.layers):
        attn_params, ffn_params = _layer_params(state, i)
        prev = cache.packed[i] if n0 else None
        try:
            packed, weights = attention_block(h, prev, n0, attn_params, cos, sin, cfg.heads)
            h = ffn_block(tc.index(packed, slice(2 * n, None)), ffn_params)
        except NumericError as exc:
            raise NumericError(f"layer {i}: {exc}") from None
        if n0:
            cache.packed[i] = packed
        else:
            cache.packed.append(packed)
        attention.append(weights)
    try:
        hidden = tc.layer_norm(h, state["ln_f.gain"], state["ln_f.bias"])
        logits = tc.linear(hidden, state["head.weight"], state["head.bias"])
    except NumericError as exc:
        raise NumericError(f"output head: {exc}") from None
    cache.length = n
    return ChunkOutput(hidden, logits, attention)


def forward(x: tc.Tensor, plan: PositionPlan, state: ModelState):
    """Full causal pass: ``(hidden [n, d], logits [n, |V|], attention per layer [heads, n, n])``."""
    if len(plan) != x.shape[0]:
        raise ShapeError(f"plan has {len(plan)} positions for {x.shape[0]} inputs")
    out = forward_chunk(x, plan.timestamps, state, Cache())
    return out.hidden, out.logits, out.attention


def forward_reference(x: tc.Tensor, plan: PositionPlan, state: ModelState):
    """The same network composed from primitive tensor operations (slow, used as a cross-check)."""
    cfg = state.config
    n, d = x.shape
    cos, sin = ospe.angles(plan.timestamps, ospe.build_basis(cfg.head_dim, cfg.rope_base))
    mask = np.tril(np.ones((n, n), dtype=bool))[None]
    h = x
    attention = []
    for i in range(cfg.layers):
        (g1, b1, wqkv, bqkv, wo, bo), (g2, b2, w1, c1, w2, c2) = _layer_params(state, i)
        qkv = tc.linear(tc.layer_norm(h, g1, b1), wqkv, bqkv)
        split = [tc.transpose(tc.reshape(tc.index(qkv, (slice(None), slice(j * d, (j + 1) * d))),
                                         (n, cfg.heads, cfg.head_dim)), (1, 0, 2)) for j in range(3)]
        q, k = (ospe.rotate(t, cos[None], sin[None]) for t in split[:2])
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(cfg.head_dim))
        att = tc.softmax(scores, axis=-1, mask=mask)
        o = tc.reshape(tc.transpose(tc.matmul(att, split[2]), (1, 0, 2)), (n, d))
        h = tc.add(h, tc.linear(o, wo, bo))
        f = tc.linear(tc.gelu(tc.linear(tc.layer_norm(h, g2, b2), w1, c1)), w2, c2)
        h = tc.add(h, f)
        attention.append(att.data)
    hidden = tc.layer_norm(h, state["ln_f.gain"], state["ln_f.bias"])
    return hidden, tc.linear(hidden, state["head.weight"], state["head.bias"]), attention
