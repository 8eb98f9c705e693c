"""Speech-to-vertex model: audio encoder, causal transformer decoder, motion decoder.

Two style placements are supported:

* ``FACEFORMER``: autoregressive. The token at frame t is the encoded previous
  frame plus the subject's style code plus a positional term. A single linear
  layer maps transformer output to vertex offsets.
* ``IMITATOR``: tokens are the shared start token plus a positional term plus
  the frame-aligned audio features, so the transformer is person independent. The style code is added to the
  transformer output, which a 2-layer tanh MLP maps to vertex offsets.

Outputs are offsets from a subject's neutral pose, flattened to
``3 * n_vertices`` columns. Weights live in a flat ``dict[str, ndarray]``; a
linear layer ``name`` owns ``name.W`` (in x out) and, optionally, ``name.b``.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx

ModelWeights = dict  # str -> np.ndarray


class StyleMode(str, enum.Enum):
    FACEFORMER = "faceformer"
    IMITATOR = "imitator"


@dataclass(frozen=True)
class ModelConfig:
    d_audio: int = 16
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    n_vertices: int = 120
    fps: int = 25
    feature_rate: int = 50
    n_styles: int = 8
    style_mode: StyleMode = StyleMode.IMITATOR
    lip_vertex_ids: tuple = tuple(range(24))
    d_ff: int = 64
    d_motion_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "style_mode", StyleMode(self.style_mode))
        object.__setattr__(self, "lip_vertex_ids", tuple(int(i) for i in self.lip_vertex_ids))
        for name in ("d_audio", "d_model", "n_heads", "n_layers", "n_vertices", "fps",
                     "feature_rate", "n_styles", "d_ff", "d_motion_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("ModelConfig.d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("ModelConfig.d_model must be even (sinusoidal positions)")
        if not self.lip_vertex_ids or any(
            i < 0 or i >= self.n_vertices for i in self.lip_vertex_ids
        ):
            raise ValueError("ModelConfig.lip_vertex_ids must be a non-empty subset of [0, n_vertices)")

    @property
    def out_dim(self) -> int:
        return 3 * self.n_vertices

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style_mode"] = self.style_mode.value
        d["lip_vertex_ids"] = list(self.lip_vertex_ids)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


ATTN_PROJ = ("q", "k", "v", "o")


def transformer_linear_names(config: ModelConfig) -> list[str]:
    """All attention projections (self and cross) of every decoder layer."""
    return [
        f"dec.{l}.{kind}.{p}"
        for l in range(config.n_layers)
        for kind in ("self", "cross")
        for p in ATTN_PROJ
    ]


def motion_linear_names(config: ModelConfig) -> list[str]:
    if config.style_mode is StyleMode.IMITATOR:
        return ["motion.hidden", "motion.out"]
    return ["motion.out"]


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    d, out = config.d_model, config.out_dim
    shapes = {"audio.proj.W": (config.d_audio, d), "audio.proj.b": (1, d)}
    for l in range(config.n_layers):
        p = f"dec.{l}"
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"{p}.{ln}.g"] = (1, d)
            shapes[f"{p}.{ln}.b"] = (1, d)
        for kind in ("self", "cross"):
            for proj in ATTN_PROJ:
                shapes[f"{p}.{kind}.{proj}.W"] = (d, d)
        shapes[f"{p}.ff1.W"] = (d, config.d_ff)
        shapes[f"{p}.ff1.b"] = (1, config.d_ff)
        shapes[f"{p}.ff2.W"] = (config.d_ff, d)
        shapes[f"{p}.ff2.b"] = (1, d)
    shapes["dec.lnf.g"] = (1, d)
    shapes["dec.lnf.b"] = (1, d)
    if config.style_mode is StyleMode.IMITATOR:
        h = config.d_motion_hidden
        shapes["motion.hidden.W"] = (d, h)
        shapes["motion.hidden.b"] = (1, h)
        shapes["motion.out.W"] = (h, out)
        shapes["motion.out.b"] = (1, out)
        shapes["start_token"] = (1, d)
    else:
        shapes["motion.out.W"] = (d, out)
        shapes["motion.out.b"] = (1, out)
        shapes["vertex_enc.W"] = (out, d)
        shapes["vertex_enc.b"] = (1, d)
    shapes["style.table"] = (config.n_styles, d)
    return shapes


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".g"):
            w = np.ones(shape)
        elif name.endswith(".b"):
            w = np.zeros(shape)
        elif name == "style.table":
            w = rng.normal(0.0, 0.1, shape)
        elif name == "start_token":
            w = rng.normal(0.0, 1.0, shape)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            if name.endswith((".o.W", "ff2.W")):
                w *= 0.5
        weights[name] = w
    return weights


def check_weights(weights: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    expected = weight_shapes(config)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise KeyError(f"weights missing entries: {missing[:5]}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise nx.ShapeError(f"{name}: expected {shape}, got {weights[name].shape}")
        if not np.all(np.isfinite(weights[name])):
            raise ValueError(f"{name} has non-finite values")


def count_parameters(weights: Mapping[str, np.ndarray]) -> int:
    return int(sum(w.size for w in weights.values()))


# ----------------------------------------------------------------------------
# audio encoder


def resample_features(features: np.ndarray, feature_rate: float, fps: float) -> np.ndarray:
    """Linearly resample a (frames_in x C) feature track from feature_rate to fps."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("resample_features needs a non-empty 2-D feature array")
    n_in = features.shape[0]
    if n_in < 2:
        raise ValueError("resample_features needs at least 2 input frames")
    n_out = int(round(n_in * fps / feature_rate))
    pos = np.minimum(np.arange(n_out) * (feature_rate / fps), n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (pos - lo)[:, None]
    return features[lo] * (1.0 - frac) + features[hi] * frac


def project_audio(resampled: np.ndarray, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    return nx.linear(resampled, weights["audio.proj.W"], weights["audio.proj.b"])


def encode_audio(features: np.ndarray, weights: Mapping[str, np.ndarray], config: ModelConfig) -> np.ndarray:
    """Resample raw features to the animation frame rate and project to d_model."""
    return project_audio(resample_features(features, config.feature_rate, config.fps), weights)


def positional_term(t, d_model: int) -> np.ndarray:
    """Standard sinusoidal position vectors; ``t`` may be an int or an array of frame indices.

    Pair ``i`` holds ``(sin, cos)`` of ``t / 10000 ** (2 i / d_model)``.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("positional_term needs t >= 0")
    scalar = t.ndim == 0
    t = np.atleast_1d(t)[:, None]
    angle = t / 10000.0 ** (np.arange(d_model // 2) * 2.0 / d_model)
    out = np.empty((t.shape[0], d_model))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out[0] if scalar else out


# ----------------------------------------------------------------------------
# instrumentation


@dataclass
class AttentionCounter:
    """Counts unmasked self-attention score evaluations, per (layer, head)."""

    counts: dict = field(default_factory=lambda: defaultdict(int))

    def add(self, layer: int, head: int, n: int) -> None:
        self.counts[(layer, head)] += int(n)

    def per_layer_head(self) -> int:
        """The common per-(layer, head) count; raises if entries disagree."""
        values = set(self.counts.values())
        if len(values) > 1:
            raise AssertionError(f"uneven attention counts: {dict(self.counts)}")
        return values.pop() if values else 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())


# ----------------------------------------------------------------------------
# forward / backward building blocks


class _Layers:
    """Linear-layer access that transparently applies attached LoRA adaptors."""

    def __init__(self, weights, adaptors=None):
        self.w = weights
        self.adaptors = adaptors or {}

    def lin(self, name: str, x: np.ndarray):
        W = self.w[name + ".W"]
        b = self.w.get(name + ".b")
        y = nx.linear(x, W, b)
        ad = self.adaptors.get(name)
        xa = None
        if ad is not None:
            xa = x @ ad.A
            y = y + ad.scale * (xa @ ad.B.T)
        return y, (name, x, xa)

    def lin_back(self, dy: np.ndarray, cache, grads, need_dx: bool = True):
        name, x, xa = cache
        W = self.w[name + ".W"]
        grads[name + ".W"] += x.T @ dy
        if name + ".b" in self.w:
            grads[name + ".b"] += dy.sum(axis=0, keepdims=True)
        dx = dy @ W.T if need_dx else None
        ad = self.adaptors.get(name)
        if ad is not None:
            dyB = dy @ ad.B
            grads[name + ".lora_A"] += ad.scale * (x.T @ dyB)
            grads[name + ".lora_B"] += ad.scale * (dy.T @ xa)
            if need_dx:
                dx = dx + ad.scale * (dyB @ ad.A.T)
        return dx

    def ln(self, name: str, x: np.ndarray):
        return nx.layer_norm(x, self.w[name + ".g"], self.w[name + ".b"])

    def ln_back(self, dy, name, cache, grads):
        dx, dg, db = nx.layer_norm_backward(dy, cache)
        grads[name + ".g"] += dg
        grads[name + ".b"] += db
        return dx


def _split(x: np.ndarray, h: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, h, d // h).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def _attention(L: _Layers, prefix: str, xq, xkv, n_heads: int, causal: bool, counter=None, layer=0):
    q, cq = L.lin(prefix + ".q", xq)
    k, ck = L.lin(prefix + ".k", xkv)
    v, cv = L.lin(prefix + ".v", xkv)
    qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    p = nx.softmax_rows(scores, causal=causal)
    if counter is not None and causal:
        n = xq.shape[0]
        for h in range(n_heads):
            counter.add(layer, h, n * (n + 1) // 2)
    o = _merge(p @ vh)
    y, co = L.lin(prefix + ".o", o)
    return y, (cq, ck, cv, co, qh, kh, vh, p, scale, n_heads)


def _attention_back(L: _Layers, dy, cache, grads):
    cq, ck, cv, co, qh, kh, vh, p, scale, n_heads = cache
    do = _split(L.lin_back(dy, co, grads), n_heads)
    dp = do @ vh.transpose(0, 2, 1)
    dvh = p.transpose(0, 2, 1) @ do
    ds = nx.softmax_backward(dp, p) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 2, 1) @ qh
    dxq = L.lin_back(_merge(dqh), cq, grads)
    dxkv = L.lin_back(_merge(dkh), ck, grads) + L.lin_back(_merge(dvh), cv, grads)
    return dxq, dxkv


def _decoder_layer(L: _Layers, l: int, x, mem, config: ModelConfig, counter=None):
    p = f"dec.{l}"
    a, c_ln1 = L.ln(p + ".ln1", x)
    sa, c_sa = _attention(L, p + ".self", a, a, config.n_heads, True, counter, l)
    x1 = x + sa
    b, c_ln2 = L.ln(p + ".ln2", x1)
    ca, c_ca = _attention(L, p + ".cross", b, mem, config.n_heads, False)
    x2 = x1 + ca
    c, c_ln3 = L.ln(p + ".ln3", x2)
    f1, c_f1 = L.lin(p + ".ff1", c)
    hdn = nx.tanh(f1)
    f2, c_f2 = L.lin(p + ".ff2", hdn)
    return x2 + f2, (c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_f1, hdn, c_f2)


def _decoder_layer_back(L: _Layers, l: int, dout, cache, grads):
    p = f"dec.{l}"
    c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_f1, hdn, c_f2 = cache
    dx2 = dout
    dhdn = L.lin_back(dout, c_f2, grads)
    dc = L.lin_back(nx.tanh_backward(dhdn, hdn), c_f1, grads)
    dx2 = dx2 + L.ln_back(dc, p + ".ln3", c_ln3, grads)
    dx1 = dx2
    db, dmem = _attention_back(L, dx2, c_ca, grads)
    dx1 = dx1 + L.ln_back(db, p + ".ln2", c_ln2, grads)
    dx = dx1
    daq, dakv = _attention_back(L, dx1, c_sa, grads)
    dx = dx + L.ln_back(daq + dakv, p + ".ln1", c_ln1, grads)
    return dx, dmem


def _motion(L: _Layers, z, style, config: ModelConfig):
    if config.style_mode is StyleMode.IMITATOR:
        z = z + style
        h1, c1 = L.lin("motion.hidden", z)
        a1 = nx.tanh(h1)
        out, c2 = L.lin("motion.out", a1)
        return out, (c1, a1, c2)
    out, c2 = L.lin("motion.out", z)
    return out, (c2,)


def _motion_back(L: _Layers, dout, cache, config: ModelConfig, grads, need_dz: bool = True):
    if config.style_mode is StyleMode.IMITATOR:
        c1, a1, c2 = cache
        da1 = L.lin_back(dout, c2, grads)
        dz = L.lin_back(nx.tanh_backward(da1, a1), c1, grads)
        grads["style"] += dz.sum(axis=0, keepdims=True)
        return dz
    (c2,) = cache
    return L.lin_back(dout, c2, grads, need_dx=need_dz)


def _tokens(L: _Layers, style, prev, T: int, config: ModelConfig, audio=None):
    pos = positional_term(np.arange(T), config.d_model)
    if config.style_mode is StyleMode.IMITATOR:
        return L.w["start_token"] + pos + audio, None
    enc, c = L.lin("vertex_enc", prev)
    return enc + style + pos, c


def _check_style(style, config: ModelConfig) -> np.ndarray:
    style = np.asarray(style, dtype=np.float64).reshape(1, -1)
    if style.shape[1] != config.d_model:
        raise nx.ShapeError(f"style width {style.shape[1]} != d_model {config.d_model}")
    return style


def shift_previous(frames: np.ndarray) -> np.ndarray:
    """Teacher-forcing input: row t holds frame t-1, row 0 is zeros."""
    prev = np.zeros_like(frames)
    prev[1:] = frames[:-1]
    return prev


def forward(
    weights: Mapping[str, np.ndarray],
    resampled: np.ndarray,
    style,
    config: ModelConfig,
    prev: np.ndarray | None = None,
    adaptors=None,
    counter: AttentionCounter | None = None,
):
    """Full-sequence forward pass over T frames.

    ``resampled`` is the (T x d_audio) feature track already at the animation
    frame rate. In FACEFORMER mode ``prev`` supplies the previous-frame vertex
    offsets (teacher forcing); it defaults to zeros. Returns ``(offsets, cache)``.
    """
    style = _check_style(style, config)
    T = resampled.shape[0]
    if T < 1:
        raise ValueError("forward needs T >= 1")
    L = _Layers(weights, adaptors)
    audio, c_audio = L.lin("audio.proj", resampled)
    pos = positional_term(np.arange(T), config.d_model)
    mem = audio + pos
    if config.style_mode is StyleMode.FACEFORMER and prev is None:
        prev = np.zeros((T, config.out_dim))
    x, c_tok = _tokens(L, style, prev, T, config, audio)
    layer_caches = []
    for l in range(config.n_layers):
        x, c = _decoder_layer(L, l, x, mem, config, counter)
        layer_caches.append(c)
    z, c_lnf = L.ln("dec.lnf", x)
    out, c_mot = _motion(L, z, style, config)
    cache = (L, c_audio, c_tok, layer_caches, c_lnf, c_mot, T)
    return out, cache


def backward(dout: np.ndarray, cache, config: ModelConfig, motion_only: bool = False) -> dict:
    """Gradients of a scalar loss w.r.t. every weight, adaptor factor and the style vector.

    Keys: weight names, ``"<layer>.lora_A"``/``"<layer>.lora_B"`` for adaptors
    and ``"style"`` for the style vector. With ``motion_only`` the pass stops
    after the motion decoder (only motion weights and, in IMITATOR mode, the
    style vector receive gradients).
    """
    L, c_audio, c_tok, layer_caches, c_lnf, c_mot, T = cache
    grads = defaultdict(lambda: 0.0)
    grads["style"] = np.zeros((1, config.d_model))
    dz = _motion_back(L, dout, c_mot, config, grads, need_dz=not motion_only)
    if not motion_only:
        dx = L.ln_back(dz, "dec.lnf", c_lnf, grads)
        dmem = 0.0
        for l in reversed(range(config.n_layers)):
            dx, dm = _decoder_layer_back(L, l, dx, layer_caches[l], grads)
            dmem = dmem + dm
        if config.style_mode is StyleMode.IMITATOR:
            grads["start_token"] += dx.sum(axis=0, keepdims=True)
            dmem = dmem + dx
        else:
            grads["style"] += dx.sum(axis=0, keepdims=True)
            L.lin_back(dx, c_tok, grads, need_dx=False)
        L.lin_back(dmem, c_audio, grads, need_dx=False)
    return dict(grads)


# ----------------------------------------------------------------------------
# inference


def _incremental_step(L: _Layers, x_t, t, mem_cross, kv_cache, config: ModelConfig, counter=None):
    """Advance the decoder by one token using cached self-attention keys/values."""
    H = config.n_heads
    scale = 1.0 / np.sqrt(config.d_head)
    for l in range(config.n_layers):
        p = f"dec.{l}"
        a, _ = L.ln(p + ".ln1", x_t)
        q, _ = L.lin(p + ".self.q", a)
        k, _ = L.lin(p + ".self.k", a)
        v, _ = L.lin(p + ".self.v", a)
        K, V = kv_cache[l]
        K[t], V[t] = k[0], v[0]
        Kh, Vh = _split(K[: t + 1], H), _split(V[: t + 1], H)
        s = (_split(q, H) @ Kh.transpose(0, 2, 1)) * scale
        pr = nx.softmax_rows(s)
        if counter is not None:
            for h in range(H):
                counter.add(l, h, t + 1)
        sa, _ = L.lin(p + ".self.o", _merge(pr @ Vh))
        x_t = x_t + sa
        b, _ = L.ln(p + ".ln2", x_t)
        cq, _ = L.lin(p + ".cross.q", b)
        mk, mv = mem_cross[l]
        pr = nx.softmax_rows((_split(cq, H) @ mk.transpose(0, 2, 1)) * scale)
        ca, _ = L.lin(p + ".cross.o", _merge(pr @ mv))
        x_t = x_t + ca
        c, _ = L.ln(p + ".ln3", x_t)
        f1, _ = L.lin(p + ".ff1", c)
        f2, _ = L.lin(p + ".ff2", nx.tanh(f1))
        x_t = x_t + f2
    return x_t


def decode_sequence(
    audio_feats: np.ndarray,
    style,
    weights: Mapping[str, np.ndarray],
    config: ModelConfig,
    adaptors=None,
    counter: AttentionCounter | None = None,
) -> np.ndarray:
    """Infer vertex offsets (T x 3V) from projected audio features (T x d_model).

    FACEFORMER mode decodes autoregressively from a zero previous frame;
    IMITATOR mode runs a single causal pass.
    """
    style = _check_style(style, config)
    audio_feats = np.asarray(audio_feats, dtype=np.float64)
    T = audio_feats.shape[0]
    if T < 1:
        raise ValueError("decode_sequence needs T >= 1")
    L = _Layers(weights, adaptors)
    pos = positional_term(np.arange(T), config.d_model)
    mem = audio_feats + pos
    if config.style_mode is StyleMode.IMITATOR:
        x, _ = _tokens(L, style, None, T, config, audio_feats)
        for l in range(config.n_layers):
            x, _ = _decoder_layer(L, l, x, mem, config, counter)
        z, _ = L.ln("dec.lnf", x)
        return _motion(L, z, style, config)[0]

    H = config.n_heads
    mem_cross = []
    for l in range(config.n_layers):
        mk, _ = L.lin(f"dec.{l}.cross.k", mem)
        mv, _ = L.lin(f"dec.{l}.cross.v", mem)
        mem_cross.append((_split(mk, H), _split(mv, H)))
    kv_cache = [(np.empty((T, config.d_model)), np.empty((T, config.d_model))) for _ in range(config.n_layers)]
    out = np.empty((T, config.out_dim))
    prev = np.zeros((1, config.out_dim))
    for t in range(T):
        enc, _ = L.lin("vertex_enc", prev)
        x_t = enc + style + pos[t : t + 1]
        x_t = _incremental_step(L, x_t, t, mem_cross, kv_cache, config, counter)
        z, _ = L.ln("dec.lnf", x_t)
        prev = _motion(L, z, style, config)[0]
        out[t] = prev[0]
    return out


def infer(
    features: np.ndarray,
    style,
    weights: Mapping[str, np.ndarray],
    config: ModelConfig,
    adaptors=None,
    counter: AttentionCounter | None = None,
) -> np.ndarray:
    """Raw features at feature_rate -> vertex offsets at fps (full context)."""
    return decode_sequence(encode_audio(features, weights, config), style, weights, config, adaptors, counter)
