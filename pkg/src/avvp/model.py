"""Messenger-guided mid-fusion transformer and its ablation variants.

Shapes follow the convention ``(..., T, d)``: the building blocks accept a
single video ``(T, d)`` or a batch ``(B, T, d)``. Parameters live in a flat
``dict[str, Tensor]`` keyed by dotted names such as ``"v.dec0.cross.wq"``.

Variants
--------
full
    per-modality encoders, messengers, decoders whose cross-attention context
    is the other modality's messengers.
no_msg
    decoders attend to the other modality's full encoder output.
no_fa
    the visual decoder attends to its own encoder output; audio as in full.
han
    one early-fusion layer per modality with parallel self- and
    cross-attention on the tokenised inputs.
han_ca
    han with the cross-attention fed by the modality itself.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .tensor import Tensor

VARIANTS = ("full", "no_msg", "han", "han_ca", "no_fa")
MODALITIES = ("a", "v")


@dataclass
class ModelConfig:
    T: int = 10
    C: int = 25
    d: int = 64
    d_a: int = 128
    d_v: int = 128
    L: int = 1
    M: int = 1
    heads: int = 1
    n_a: int = 1
    n_v: int = 1
    ffn_mult: int = 4
    variant: str = "full"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.L < 1 or self.M < 1:
            raise ConfigError("L and M must be at least 1")
        for name in ("n_a", "n_v"):
            n = getattr(self, name)
            if not 1 <= n <= self.T:
                raise ConfigError(f"{name}={n} outside [1, T={self.T}]")
        if min(self.T, self.C, self.d_a, self.d_v, self.ffn_mult) < 1:
            raise ConfigError("T, C, d_a, d_v and ffn_mult must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def in_dim(self, m: str) -> int:
        return self.d_a if m == "a" else self.d_v

    def messengers(self, m: str) -> int:
        return self.n_a if m == "a" else self.n_v


@dataclass
class PredictionSet:
    """Segment-level and video-level probabilities for one video or a batch."""

    P_a: Tensor
    P_v: Tensor
    Ptilde_a: Tensor
    Ptilde_v: Tensor
    Ptilde_video: Tensor
    attention: dict[str, np.ndarray] = field(default_factory=dict)

    def numpy(self) -> dict[str, np.ndarray]:
        return {
            "P_a": self.P_a.data,
            "P_v": self.P_v.data,
            "Ptilde_a": self.Ptilde_a.data,
            "Ptilde_v": self.Ptilde_v.data,
            "Ptilde_video": self.Ptilde_video.data,
        }


# -- parameter layout ------------------------------------------------------------


def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple, int]]:
    out = []
    for w in ("q", "k", "v", "o"):
        out.append((f"{prefix}.w{w}", (d, d), d))
        out.append((f"{prefix}.b{w}", (d,), d))
    return out


def _ffn_shapes(prefix: str, d: int, mult: int) -> list[tuple[str, tuple, int]]:
    h = d * mult
    return [
        (f"{prefix}.w1", (d, h), d),
        (f"{prefix}.b1", (h,), d),
        (f"{prefix}.w2", (h, d), h),
        (f"{prefix}.b2", (d,), h),
    ]


def _ln_shapes(prefix: str, d: int) -> list[tuple[str, tuple, int]]:
    return [(f"{prefix}.g", (d,), 0), (f"{prefix}.b", (d,), 0)]


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple, int]]:
    """Ordered ``(name, shape, fan_in)`` for every learnable tensor.

    ``fan_in`` of 0 marks a layer-norm affine (gamma or beta).
    """
    d, C = cfg.d, cfg.C
    layout: list[tuple[str, tuple, int]] = []
    for m in MODALITIES:
        other = "v" if m == "a" else "a"
        layout.append((f"{m}.enc_proj", (cfg.in_dim(m), d), cfg.in_dim(m)))
        if cfg.variant in ("han", "han_ca"):
            for l in range(cfg.L):
                p = f"{m}.han{l}"
                layout += _attn_shapes(f"{p}.self", d)
                layout += _attn_shapes(f"{p}.cross", d)
                layout += _ln_shapes(f"{p}.ln1", d)
                layout += _ffn_shapes(f"{p}.ffn", d, cfg.ffn_mult)
                layout += _ln_shapes(f"{p}.ln2", d)
        else:
            for l in range(cfg.L):
                p = f"{m}.enc{l}"
                layout += _attn_shapes(f"{p}.self", d)
                layout += _ln_shapes(f"{p}.ln1", d)
                layout += _ffn_shapes(f"{p}.ffn", d, cfg.ffn_mult)
                layout += _ln_shapes(f"{p}.ln2", d)
            if _uses_messengers_of(cfg, m, other):
                layout.append((f"{m}.msg", (d, d), d))
            for l in range(cfg.M):
                p = f"{m}.dec{l}"
                layout += _attn_shapes(f"{p}.self", d)
                layout += _ln_shapes(f"{p}.ln1", d)
                layout += _attn_shapes(f"{p}.cross", d)
                layout += _ln_shapes(f"{p}.ln2", d)
                layout += _ffn_shapes(f"{p}.ffn", d, cfg.ffn_mult)
                layout += _ln_shapes(f"{p}.ln3", d)
        layout.append((f"{m}.cls", (d, C), d))
        layout.append((f"{m}.tpool", (d, C), d))
    layout.append(("mpool", (d, C), d))
    return layout


def _uses_messengers_of(cfg: ModelConfig, m: str, other: str) -> bool:
    """Whether modality ``m``'s messengers feed the ``other`` decoder."""
    if cfg.variant == "full":
        return True
    if cfg.variant == "no_fa":
        # only the audio decoder still consumes (visual) messengers
        return m == "v"
    return False


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) linear maps, unit/zero layer-norm affines."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in param_layout(cfg):
        if fan_in == 0:
            value = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = tn.parameter(value)
    return params


def sinusoidal_pe(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- building blocks ---------------------------------------------------------------


def tokenize(features, W_enc, PE) -> Tensor:
    """Project segment features to tokens and add the positional embedding."""
    features = tn.as_tensor(features)
    PE = tn.as_tensor(PE)
    if features.shape[-2] != PE.shape[-2]:
        raise DimensionError(
            f"tokenize: {features.shape[-2]} segments but positional embedding has {PE.shape[-2]}"
        )
    return features @ W_enc + PE


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = x.reshape(tuple(lead) + (T, heads, d // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return tn.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = tn.transpose(x, axes)
    *lead, T, h, dh = x.shape
    return x.reshape(tuple(lead) + (T, h * dh))


def attention(query, context, params: dict, prefix: str, heads: int = 1):
    """Scaled dot-product attention with input and output projections.

    Returns ``(output, weights)`` where weights has shape ``(..., [heads,] Tq, Tk)``
    and each row sums to one.
    """
    p = lambda k: params[f"{prefix}.{k}"]
    q = query @ p("wq") + p("bq")
    k = context @ p("wk") + p("bk")
    v = context @ p("wv") + p("bv")
    d = q.shape[-1]
    if heads > 1:
        q, k, v = (_split_heads(x, heads) for x in (q, k, v))
    scores = (q @ tn.transpose(k)) * (1.0 / math.sqrt(d // heads))
    w = tn.softmax(scores, axis=-1)
    out = w @ v
    if heads > 1:
        out = _merge_heads(out)
    return out @ p("wo") + p("bo"), w


def _ln(x, params, prefix, eps):
    return tn.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def ffn(x, params: dict, prefix: str) -> Tensor:
    h = tn.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def encoder_layer(S, params: dict, prefix: str, heads: int = 1, eps: float = 1e-5, record=None):
    """Post-norm transformer encoder layer: self-attention then FFN."""
    a, w = attention(S, S, params, f"{prefix}.self", heads)
    if record is not None:
        record[f"{prefix}.self"] = w.data
    S_tilde = _ln(a + S, params, f"{prefix}.ln1", eps)
    return _ln(ffn(S_tilde, params, f"{prefix}.ffn") + S_tilde, params, f"{prefix}.ln2", eps)


def compute_messengers(S_L, W_msg, n: int) -> Tensor:
    """Project, average-pool the time axis to ``n`` rows, squash with tanh."""
    S_L = tn.as_tensor(S_L)
    if not 1 <= n <= S_L.shape[-2]:
        raise ValueError(f"messenger count {n} outside [1, {S_L.shape[-2]}]")
    return tn.tanh(tn.mean_pool_segments(S_L @ W_msg, n))


def decoder_layer(R, context, params: dict, prefix: str, heads: int = 1, eps: float = 1e-5, record=None):
    """Self-attention, cross-attention to ``context``, FFN; each post-norm residual."""
    a, w_self = attention(R, R, params, f"{prefix}.self", heads)
    R_tilde = _ln(a + R, params, f"{prefix}.ln1", eps)
    c, w_cross = attention(R_tilde, context, params, f"{prefix}.cross", heads)
    R_hat = _ln(c + R_tilde, params, f"{prefix}.ln2", eps)
    if record is not None:
        record[f"{prefix}.self"] = w_self.data
        record[f"{prefix}.cross"] = w_cross.data
    return _ln(ffn(R_hat, params, f"{prefix}.ffn") + R_hat, params, f"{prefix}.ln3", eps)


def han_layer(S, other, params: dict, prefix: str, heads: int = 1, eps: float = 1e-5, record=None):
    """Early-fusion layer with parallel self- and cross-attention."""
    a, w_self = attention(S, S, params, f"{prefix}.self", heads)
    c, w_cross = attention(S, other, params, f"{prefix}.cross", heads)
    if record is not None:
        record[f"{prefix}.self"] = w_self.data
        record[f"{prefix}.cross"] = w_cross.data
    x = _ln(a + c + S, params, f"{prefix}.ln1", eps)
    return _ln(ffn(x, params, f"{prefix}.ffn") + x, params, f"{prefix}.ln2", eps)


def classify(R_M, W_cls) -> Tensor:
    return tn.sigmoid(R_M @ W_cls)


def pool_video_level(P_a, P_v, R_a, R_v, params: dict):
    """Attentive MIL pooling of segment probabilities to video level.

    Per modality a class-wise softmax over time weights the segment
    probabilities. For the modality-agnostic prediction a per-(t, c) softmax
    over the two modalities mixes the segment probabilities, and the two
    temporal weightings, mixed the same way and renormalised over time, pool
    the result. Every weight is convex, so each video-level value stays within
    the range of the segment values it summarises.
    """
    w_a = tn.softmax(R_a @ params["a.tpool"], axis=-2)
    w_v = tn.softmax(R_v @ params["v.tpool"], axis=-2)
    Pt_a = (w_a * P_a).sum(axis=-2)
    Pt_v = (w_v * P_v).sum(axis=-2)
    alpha = tn.softmax(tn.stack([R_a @ params["mpool"], R_v @ params["mpool"]], axis=0), axis=0)
    alpha_a, alpha_v = alpha[0], alpha[1]
    P_video = alpha_a * P_a + alpha_v * P_v
    u = alpha_a * w_a + alpha_v * w_v
    u = u / u.sum(axis=-2, keepdims=True)
    Pt_video = (u * P_video).sum(axis=-2)
    return Pt_a, Pt_v, Pt_video


# -- the model ---------------------------------------------------------------------


class MMT:
    """Audio-visual parser holding a config, parameters and a fixed PE."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.pe = sinusoidal_pe(cfg.T, cfg.d)

    def named_parameters(self):
        return list(self.params.items())

    def forward(self, audio, visual, record: bool = False) -> PredictionSet:
        """Run one video ``(T, d_in)`` or a batch ``(B, T, d_in)``."""
        cfg, p = self.cfg, self.params
        if cfg.variant not in VARIANTS:
            raise ValueError(f"unknown variant {cfg.variant!r}")
        audio = np.asarray(audio, dtype=np.float64)
        visual = np.asarray(visual, dtype=np.float64)
        if audio.shape[-1] != cfg.d_a or visual.shape[-1] != cfg.d_v:
            raise DimensionError(
                f"feature dims {audio.shape[-1]}/{visual.shape[-1]} != config {cfg.d_a}/{cfg.d_v}"
            )
        if audio.shape[-2] != cfg.T or visual.shape[-2] != cfg.T:
            raise DimensionError(f"expected T={cfg.T} segments, got {audio.shape[-2]}/{visual.shape[-2]}")
        rec = {} if record else None
        kw = dict(heads=cfg.heads, eps=cfg.ln_eps, record=rec)

        S = {
            "a": tokenize(audio, p["a.enc_proj"], self.pe),
            "v": tokenize(visual, p["v.enc_proj"], self.pe),
        }
        if cfg.variant in ("han", "han_ca"):
            for l in range(cfg.L):
                prev = dict(S)
                for m, o in (("a", "v"), ("v", "a")):
                    ctx = prev[o] if cfg.variant == "han" else prev[m]
                    S[m] = han_layer(prev[m], ctx, p, f"{m}.han{l}", **kw)
            R = S
        else:
            for m in MODALITIES:
                for l in range(cfg.L):
                    S[m] = encoder_layer(S[m], p, f"{m}.enc{l}", **kw)
            context = self._decoder_contexts(S)
            R = dict(S)
            for m in MODALITIES:
                for l in range(cfg.M):
                    R[m] = decoder_layer(R[m], context[m], p, f"{m}.dec{l}", **kw)

        P_a = classify(R["a"], p["a.cls"])
        P_v = classify(R["v"], p["v.cls"])
        Pt_a, Pt_v, Pt_video = pool_video_level(P_a, P_v, R["a"], R["v"], p)
        return PredictionSet(P_a, P_v, Pt_a, Pt_v, Pt_video, rec or {})

    __call__ = forward

    def _decoder_contexts(self, S: dict[str, Tensor]) -> dict[str, Tensor]:
        cfg, p = self.cfg, self.params
        if cfg.variant == "no_msg":
            return {"a": S["v"], "v": S["a"]}
        M_v = compute_messengers(S["v"], p["v.msg"], cfg.n_v)
        if cfg.variant == "no_fa":
            return {"a": M_v, "v": S["v"]}
        M_a = compute_messengers(S["a"], p["a.msg"], cfg.n_a)
        return {"a": M_v, "v": M_a}

    def predict(self, audio, visual) -> dict[str, np.ndarray]:
        return self.forward(audio, visual).numpy()


def attention_entropy(weights: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of attention rows."""
    w = np.clip(weights, 1e-300, 1.0)
    return float(-(weights * np.log(w)).sum(axis=-1).mean())
