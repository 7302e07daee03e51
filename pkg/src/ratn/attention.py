"""Attention-weight machinery.

Scaled dot-product multi-head attention plus the regularizers built on top of
it: relaxed attention (a convex blend of the row-stochastic weights with the
uniform distribution over key positions), its fuzzy variant (the relaxation
coefficient drawn from a normal distribution during training), smoothed focus
(sigmoid-normalized weights instead of softmax), windowed attention with a
relative position bias, and attention dropout applied after relaxation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import (ShapeError, Tensor, embedding, matmul, mul, reshape,
                     sigmoid, softmax_rows, sub, transpose)

# Additive sentinel for masked logits. Large but finite: exp(sentinel - max)
# underflows to exactly 0, so masked positions get zero weight and zero
# gradient without producing NaN in backward.
MASK_SENTINEL = -1e30

MODE_OFF = "off"
MODE_TRAIN_ONLY = "train_only"
MODE_MATCHED = "matched"
_MODES = (MODE_OFF, MODE_TRAIN_ONLY, MODE_MATCHED)

WEIGHT_SOFTMAX = "softmax"
WEIGHT_SMOOTHED_FOCUS = "smoothed_focus"
_WEIGHT_FNS = (WEIGHT_SOFTMAX, WEIGHT_SMOOTHED_FOCUS)


class Phase(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class RelaxationConfig:
    """Per-attention-site relaxation settings.

    gamma0 is the relaxation coefficient in [0, 1]; sigma2 the fuzzy variance;
    mode decides whether relaxation applies in training only or also at
    inference (matched). mode "off" is bit-identical to standard attention in
    both phases.
    """

    gamma0: float = 0.0
    sigma2: float = 0.0
    mode: str = MODE_OFF
    fuzzy: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma0 <= 1.0:
            raise ValueError(f"gamma0 must be in [0, 1], got {self.gamma0}")
        if self.sigma2 < 0.0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.fuzzy and self.sigma2 <= 0.0:
            raise ValueError("fuzzy relaxation requires sigma2 > 0")

    @property
    def active(self) -> bool:
        return self.mode != MODE_OFF


def sample_fuzzy_gamma(cfg: RelaxationConfig | None, rng: RngStream | None,
                       phase: Phase) -> float:
    """Resolve the relaxation coefficient for one forward pass of one layer.

    Training draws gamma ~ N(gamma0, sigma2) when fuzzy (clamped to [0, 1]),
    otherwise uses gamma0. Eval uses gamma0 exactly under matched mode and 0
    under train-only mode. Consumes randomness only for fuzzy training draws,
    so non-fuzzy configs stay bit-reproducible against mode "off".
    """
    if cfg is None or cfg.mode == MODE_OFF:
        return 0.0
    if phase == Phase.EVAL:
        return cfg.gamma0 if cfg.mode == MODE_MATCHED else 0.0
    if cfg.fuzzy and cfg.sigma2 > 0.0:
        if rng is None:
            raise ValueError("fuzzy relaxation needs an RngStream in training")
        draw = float(rng.normal(mean=cfg.gamma0, std=math.sqrt(cfg.sigma2)))
        return min(1.0, max(0.0, draw))
    return cfg.gamma0


def relax_weights(g: Tensor, gamma: float, length: int) -> Tensor:
    """Blend row-stochastic weights with the uniform distribution.

    Returns (1 - gamma) * g + gamma / length, applied identically to every
    head. gamma == 0 returns g unchanged (bit-identical). Computed in the
    anchored form g + gamma * (1/length - g), which is exact when a row is
    already uniform (e.g. a single key position) for any gamma.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"relaxation coefficient must be in [0, 1], got {gamma}")
    if g.shape[-1] != length:
        raise ShapeError(f"relaxation length {length} does not match "
                         f"key dimension {g.shape[-1]}")
    if gamma == 0.0:
        return g
    return g + mul(sub(1.0 / length, g), gamma)


def smoothed_focus_weights(e: Tensor) -> Tensor:
    """Sigmoid-normalized attention weights.

    Each logit passes through the sigmoid and rows are normalized to sum to
    one. Unlike softmax this is not shift-invariant. Masked entries at
    MASK_SENTINEL get exactly zero weight; a fully masked row is an error.
    """
    s = sigmoid(e)
    denom = s.data.sum(axis=-1, keepdims=True)
    if np.any(denom <= 0.0):
        raise ValueError("smoothed focus undefined: a row has zero total activation")
    return s / s.sum(axis=-1, keepdims=True)


def attention_dropout(g: Tensor, p: float, rng: RngStream | None,
                      phase: Phase) -> Tensor:
    """Inverted dropout on attention weights.

    Training zeroes entries with probability p and scales survivors by
    1/(1-p); eval is the identity. Rows may leave the probability simplex
    afterwards -- expected, the weights are no longer probabilities. p == 0
    draws no randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if phase == Phase.EVAL or p == 0.0:
        return g
    if rng is None:
        raise ValueError("attention dropout needs an RngStream in training")
    mask = rng.bernoulli_mask(g.shape, 1.0 - p) / (1.0 - p)
    return mul(g, mask)


def causal_mask(n: int) -> np.ndarray:
    """Additive [n, n] mask closing off future positions."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = MASK_SENTINEL
    return m


# ---------------------------------------------------------------------------
# multi-head attention


@dataclass
class MhaParams:
    """Projections for one multi-head attention site.

    w_q/w_k/w_v are [d, d]; column block i (width d / n_heads) is head i's
    projection. w_o is the [d, d] output projection applied after
    concatenating the head outputs.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    d_model: int

    @classmethod
    def init(cls, d: int, n_heads: int, rng: RngStream) -> "MhaParams":
        if d % n_heads != 0:
            raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
        lim = 1.0 / math.sqrt(d)

        def w():
            return Tensor(rng.uniform((d, d), -lim, lim), requires_grad=True)

        return cls(w_q=w(), w_k=w(), w_v=w(), w_o=w(), n_heads=n_heads, d_model=d)

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., L, d] -> [..., n_heads, L, d/n_heads]."""
    *lead, length, d = x.shape
    r = reshape(x, (*lead, length, n_heads, d // n_heads))
    n = len(lead)
    return transpose(r, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    """[..., n_heads, L, dh] -> [..., L, n_heads * dh]."""
    *lead, n_heads, length, dh = x.shape
    n = len(lead)
    t = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(t, (*lead, length, n_heads * dh))


def _attention_weights(e: Tensor, weight_fn: str) -> Tensor:
    if weight_fn == WEIGHT_SOFTMAX:
        return softmax_rows(e)
    if weight_fn == WEIGHT_SMOOTHED_FOCUS:
        return smoothed_focus_weights(e)
    raise ValueError(f"weight_fn must be one of {_WEIGHT_FNS}, got {weight_fn!r}")


def attention_head(q: Tensor, k: Tensor, v: Tensor, params: MhaParams,
                   head: int, mask: np.ndarray | None = None,
                   relax: RelaxationConfig | None = None,
                   weight_fn: str = WEIGHT_SOFTMAX, dropout_p: float = 0.0,
                   rng: RngStream | None = None,
                   phase: Phase = Phase.EVAL) -> tuple[Tensor, Tensor]:
    """One attention head: logits, weights, relaxation, dropout, values.

    Logits are Q W_q (K W_k)^T scaled by 1/sqrt(d_model). Returns the head
    output [L, d/n_heads] and the post-relaxation weights (before dropout)
    for inspection.
    """
    d, nh = params.d_model, params.n_heads
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"q/k/v feature dims {q.shape[-1]}/{k.shape[-1]}/"
                         f"{v.shape[-1]} must equal model dim {d}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    dh = d // nh
    cols = slice(head * dh, (head + 1) * dh)
    qi = matmul(q, params.w_q[:, cols])
    ki = matmul(k, params.w_k[:, cols])
    vi = matmul(v, params.w_v[:, cols])
    e = mul(matmul(qi, transpose(ki, (1, 0))), 1.0 / math.sqrt(d))
    if mask is not None:
        e = e + mask
    weights = _attention_weights(e, weight_fn)
    gamma = sample_fuzzy_gamma(relax, rng, phase)
    weights = relax_weights(weights, gamma, k.shape[-2])
    dropped = attention_dropout(weights, dropout_p, rng, phase)
    return matmul(dropped, vi), weights


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: MhaParams,
                         mask: np.ndarray | None = None,
                         relax: RelaxationConfig | None = None,
                         weight_fn: str = WEIGHT_SOFTMAX,
                         dropout_p: float = 0.0,
                         rng: RngStream | None = None,
                         phase: Phase = Phase.EVAL, *,
                         gamma_rng: RngStream | None = None,
                         bias: Tensor | None = None,
                         scale: float | None = None,
                         relax_length: int | None = None,
                         gamma_out: list | None = None,
                         weights_out: list | None = None) -> Tensor:
    """All heads at once, concatenated and passed through the output layer.

    q/k/v may carry arbitrary leading batch axes. One relaxation coefficient
    is resolved per call and shared by every head (and every batch element);
    fuzzy draws come from gamma_rng (default rng) so they never perturb the
    dropout stream. The keyword-only extras serve the windowed variant
    (additive per-head bias, alternative logit scale, fixed relaxation
    length) and diagnostics.
    """
    d, nh = params.d_model, params.n_heads
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"q/k/v feature dims {q.shape[-1]}/{k.shape[-1]}/"
                         f"{v.shape[-1]} must equal model dim {d}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    qh = _split_heads(matmul(q, params.w_q), nh)
    kh = _split_heads(matmul(k, params.w_k), nh)
    vh = _split_heads(matmul(v, params.w_v), nh)
    kt = transpose(kh, (*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2))
    e = mul(matmul(qh, kt), scale if scale is not None else 1.0 / math.sqrt(d))
    if bias is not None:
        e = e + bias
    if mask is not None:
        e = e + mask
    weights = _attention_weights(e, weight_fn)
    gamma = sample_fuzzy_gamma(relax, gamma_rng if gamma_rng is not None else rng,
                               phase)
    weights = relax_weights(weights, gamma, relax_length or k.shape[-2])
    if gamma_out is not None and relax is not None and relax.active:
        gamma_out.append(gamma)
    if weights_out is not None:
        weights_out.append(weights)
    dropped = attention_dropout(weights, dropout_p, rng, phase)
    out = _merge_heads(matmul(dropped, vh))
    return matmul(out, params.w_o)


# ---------------------------------------------------------------------------
# windowed attention with relative position bias


@dataclass
class WindowAttnParams:
    """MhaParams over the channel dim plus a relative position bias table.

    The table has one row per relative offset in (-m, m) x (-m, m) and one
    column per head; rel_index maps (query slot, key slot) pairs within an
    m x m window to table rows.
    """

    mha: MhaParams
    bias_table: Tensor
    window: int
    rel_index: np.ndarray

    @classmethod
    def init(cls, channels: int, n_heads: int, window: int,
             rng: RngStream) -> "WindowAttnParams":
        mha = MhaParams.init(channels, n_heads, rng)
        n_rel = (2 * window - 1) ** 2
        table = Tensor(rng.normal((n_rel, n_heads), 0.0, 0.02), requires_grad=True)
        return cls(mha=mha, bias_table=table, window=window,
                   rel_index=relative_position_index(window))

    def tensors(self) -> dict[str, Tensor]:
        out = self.mha.tensors()
        out["bias_table"] = self.bias_table
        return out


def relative_position_index(m: int) -> np.ndarray:
    """[m^2, m^2] table-row index for each (query, key) slot pair."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)  # (2, m^2)
    rel = flat[:, :, None] - flat[:, None, :]  # (2, m^2, m^2), in (-m, m)
    rel = rel + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


def position_bias(params: WindowAttnParams) -> Tensor:
    """[n_heads, m^2, m^2] additive bias realized from the table."""
    m2 = params.window ** 2
    rows = embedding(params.bias_table, params.rel_index.reshape(-1))
    b = reshape(rows, (m2, m2, params.mha.n_heads))
    return transpose(b, (2, 0, 1))


def window_partition(x: Tensor, m: int) -> Tensor:
    """[..., h, w, c] -> [..., h*w/m^2, m^2, c], windows in row-major order."""
    *lead, h, w, c = x.shape
    if h % m != 0 or w % m != 0:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by window {m}")
    n = len(lead)
    r = reshape(x, (*lead, h // m, m, w // m, m, c))
    t = transpose(r, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return reshape(t, (*lead, (h // m) * (w // m), m * m, c))


def window_merge(x: Tensor, m: int, h: int, w: int) -> Tensor:
    """Inverse of window_partition; exact round trip."""
    *lead, nw, m2, c = x.shape
    if nw != (h // m) * (w // m) or m2 != m * m:
        raise ShapeError(f"window layout {nw}x{m2} does not match {h}x{w}, m={m}")
    n = len(lead)
    r = reshape(x, (*lead, h // m, w // m, m, m, c))
    t = transpose(r, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return reshape(t, (*lead, h, w, c))


def windowed_mha(x: Tensor, params: WindowAttnParams,
                 relax: RelaxationConfig | None = None,
                 dropout_p: float = 0.0, rng: RngStream | None = None,
                 phase: Phase = Phase.EVAL, *,
                 gamma_rng: RngStream | None = None,
                 gamma_out: list | None = None,
                 weights_out: list | None = None) -> Tensor:
    """Self-attention within non-overlapping m x m windows.

    Logits get the relative position bias added before normalization and are
    scaled by 1/sqrt(c/4); relaxation blends toward uniform over the fixed
    m^2 positions of a window. Output has the input's spatial layout.
    """
    *_, h, w, c = x.shape
    m = params.window
    windows = window_partition(x, m)
    out = multi_head_attention(
        windows, windows, windows, params.mha,
        relax=relax, dropout_p=dropout_p, rng=rng, phase=phase,
        gamma_rng=gamma_rng, bias=position_bias(params),
        scale=1.0 / math.sqrt(c / 4.0), relax_length=m * m,
        gamma_out=gamma_out, weights_out=weights_out)
    return window_merge(out, m, h, w)
