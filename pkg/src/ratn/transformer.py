"""Toy-scale encoder-decoder transformer.

Token embeddings scaled by sqrt(d) plus sinusoidal positions, post-norm
blocks (add, then normalize), ReLU feed-forward, and three dropout sites:
residual (sub-layer outputs before the residual add, also on embeddings),
activation (after ReLU), and attention (on the attention weights, after
relaxation). Encoder self-attention and decoder cross attention can be
relaxed; decoder masked self-attention never is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (MhaParams, Phase, RelaxationConfig, WEIGHT_SOFTMAX,
                        causal_mask, multi_head_attention)
from .rng import RngStream
from .tensor import (Tensor, embedding, layer_norm, matmul, mul, relu,
                     softmax_rows)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_SPECIAL = 3

# (residual, activation, attention) dropout presets used by full-scale
# recipes for the corresponding task families; the library default is 0.1
# everywhere at desk scale.
DROPOUT_PRESETS = {
    "speech": (0.2, 0.2, 0.2),
    "lipreading": (0.1, 0.1, 0.0),
    "translation": (0.3, 0.1, 0.1),
}


def check_token_sequence(tokens, vocab_size: int) -> np.ndarray:
    """Validate indices and the at-most-one-terminal-EOS convention."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ValueError(f"token id out of range for vocabulary of {vocab_size}")
    flat = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
    for row in flat:
        eos = np.nonzero(row == EOS_ID)[0]
        if eos.size > 1 or (eos.size == 1 and eos[0] != len(row) - 1):
            raise ValueError("EOS must appear at most once, in terminal position")
    return arr


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and regularizer settings for one model."""

    n_enc: int = 2
    n_dec: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 32
    max_len: int = 32
    dropout_residual: float = 0.1
    dropout_activation: float = 0.1
    dropout_attention: float = 0.1
    relax_self: RelaxationConfig = field(default_factory=RelaxationConfig)
    relax_cross: RelaxationConfig = field(default_factory=RelaxationConfig)
    weight_fn_self: str = WEIGHT_SOFTMAX
    weight_fn_cross: str = WEIGHT_SOFTMAX

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"{self.n_heads} heads")
        for name in ("dropout_residual", "dropout_activation", "dropout_attention"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError(f"vocab_size must exceed {NUM_SPECIAL} reserved ids")

    def param_count(self) -> int:
        """Closed-form total parameter count.

        Per encoder block: 4 d^2 attention projections, a feed-forward pair
        (2 d d_ff + d_ff + d) and two layer norms (4 d). Decoder blocks carry
        two attention sites (8 d^2) and three norms (6 d). Plus two D x d
        embeddings and the d x D (+ D bias) output layer.
        """
        d, dff, dv = self.d_model, self.d_ff, self.vocab_size
        enc = 4 * d * d + 2 * d * dff + dff + d + 4 * d
        dec = 8 * d * d + 2 * d * dff + dff + d + 6 * d
        return 2 * dv * d + self.n_enc * enc + self.n_dec * dec + d * dv + dv


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """Fixed sin/cos position table of shape [max_len, d]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, d: int) -> "LayerNormParams":
        return cls(gain=Tensor(np.ones(d), requires_grad=True),
                   bias=Tensor(np.zeros(d), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def tensors(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, d_ff: int, rng: RngStream) -> "FeedForward":
        l1, l2 = 1.0 / math.sqrt(d), 1.0 / math.sqrt(d_ff)
        return cls(w1=Tensor(rng.uniform((d, d_ff), -l1, l1), requires_grad=True),
                   b1=Tensor(np.zeros(d_ff), requires_grad=True),
                   w2=Tensor(rng.uniform((d_ff, d), -l2, l2), requires_grad=True),
                   b2=Tensor(np.zeros(d), requires_grad=True))

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class EncoderBlock:
    attn: MhaParams
    ln1: LayerNormParams
    ff: FeedForward
    ln2: LayerNormParams


@dataclass
class DecoderBlock:
    self_attn: MhaParams
    ln1: LayerNormParams
    cross_attn: MhaParams
    ln2: LayerNormParams
    ff: FeedForward
    ln3: LayerNormParams


class Seq2SeqModel:
    """Encoder-decoder transformer over a shared token vocabulary.

    All learned state lives in .parameters(); dropout and fuzzy-gamma draws
    come from streams derived from the construction seed, so (seed, config)
    fully determines behavior.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        init = RngStream(seed, "init")
        self._rng_dropout = RngStream(seed, "dropout")
        self._rng_gamma = RngStream(seed, "fuzzy-gamma")
        d, dv = config.d_model, config.vocab_size
        lim = 1.0 / math.sqrt(d)
        self.emb_enc = Tensor(init.uniform((dv, d), -lim, lim), requires_grad=True)
        self.emb_dec = Tensor(init.uniform((dv, d), -lim, lim), requires_grad=True)
        self.pos = sinusoidal_positions(config.max_len, d)
        self.enc_blocks = [
            EncoderBlock(attn=MhaParams.init(d, config.n_heads, init),
                         ln1=LayerNormParams.init(d),
                         ff=FeedForward.init(d, config.d_ff, init),
                         ln2=LayerNormParams.init(d))
            for _ in range(config.n_enc)]
        self.dec_blocks = [
            DecoderBlock(self_attn=MhaParams.init(d, config.n_heads, init),
                         ln1=LayerNormParams.init(d),
                         cross_attn=MhaParams.init(d, config.n_heads, init),
                         ln2=LayerNormParams.init(d),
                         ff=FeedForward.init(d, config.d_ff, init),
                         ln3=LayerNormParams.init(d))
            for _ in range(config.n_dec)]
        self.out_w = Tensor(init.uniform((d, dv), -lim, lim), requires_grad=True)
        self.out_b = Tensor(np.zeros(dv), requires_grad=True)
        # Relaxation coefficients actually applied during the latest forward.
        self.last_gammas: dict[str, list[float]] = {"self": [], "cross": []}

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"emb_enc": self.emb_enc, "emb_dec": self.emb_dec}
        for i, blk in enumerate(self.enc_blocks):
            for k, t in blk.attn.tensors().items():
                out[f"enc.{i}.attn.{k}"] = t
            for k, t in blk.ln1.tensors().items():
                out[f"enc.{i}.ln1.{k}"] = t
            for k, t in blk.ff.tensors().items():
                out[f"enc.{i}.ff.{k}"] = t
            for k, t in blk.ln2.tensors().items():
                out[f"enc.{i}.ln2.{k}"] = t
        for i, blk in enumerate(self.dec_blocks):
            for k, t in blk.self_attn.tensors().items():
                out[f"dec.{i}.self_attn.{k}"] = t
            for k, t in blk.ln1.tensors().items():
                out[f"dec.{i}.ln1.{k}"] = t
            for k, t in blk.cross_attn.tensors().items():
                out[f"dec.{i}.cross_attn.{k}"] = t
            for k, t in blk.ln2.tensors().items():
                out[f"dec.{i}.ln2.{k}"] = t
            for k, t in blk.ff.tensors().items():
                out[f"dec.{i}.ff.{k}"] = t
            for k, t in blk.ln3.tensors().items():
                out[f"dec.{i}.ln3.{k}"] = t
        out["out_w"] = self.out_w
        out["out_b"] = self.out_b
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    # -- forward pieces ----------------------------------------------------

    def _dropout(self, t: Tensor, p: float, phase: Phase) -> Tensor:
        if phase == Phase.EVAL or p == 0.0:
            return t
        mask = self._rng_dropout.bernoulli_mask(t.shape, 1.0 - p) / (1.0 - p)
        return mul(t, mask)

    def _embed(self, table: Tensor, tokens: np.ndarray, phase: Phase) -> Tensor:
        length = tokens.shape[-1]
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len "
                             f"{self.config.max_len}")
        x = mul(embedding(table, tokens), math.sqrt(self.config.d_model))
        x = x + self.pos[:length]
        return self._dropout(x, self.config.dropout_residual, phase)

    def encode(self, tokens, phase: Phase = Phase.EVAL) -> Tensor:
        """Encode source tokens ([T] or [B, T]) into [.., T, d_model]."""
        cfg = self.config
        arr = check_token_sequence(tokens, cfg.vocab_size)
        self.last_gammas["self"] = []
        x = self._embed(self.emb_enc, arr, phase)
        for blk in self.enc_blocks:
            a = multi_head_attention(
                x, x, x, blk.attn, relax=cfg.relax_self,
                weight_fn=cfg.weight_fn_self, dropout_p=cfg.dropout_attention,
                rng=self._rng_dropout, phase=phase, gamma_rng=self._rng_gamma,
                gamma_out=self.last_gammas["self"])
            x = blk.ln1(x + self._dropout(a, cfg.dropout_residual, phase))
            f = self._ffn(blk.ff, x, phase)
            x = blk.ln2(x + self._dropout(f, cfg.dropout_residual, phase))
        return x

    def _ffn(self, ff: FeedForward, x: Tensor, phase: Phase) -> Tensor:
        h = relu(matmul(x, ff.w1) + ff.b1)
        h = self._dropout(h, self.config.dropout_activation, phase)
        return matmul(h, ff.w2) + ff.b2

    def _decode_from_embeddings(self, h: Tensor, y: Tensor,
                                phase: Phase) -> Tensor:
        """Decoder stack on pre-embedded targets; returns [.., L, D] probs."""
        cfg = self.config
        length = y.shape[-2]
        mask = causal_mask(length)
        self.last_gammas["cross"] = []
        x = y
        for blk in self.dec_blocks:
            a = multi_head_attention(
                x, x, x, blk.self_attn, mask=mask,
                dropout_p=cfg.dropout_attention, rng=self._rng_dropout,
                phase=phase)
            x = blk.ln1(x + self._dropout(a, cfg.dropout_residual, phase))
            c = multi_head_attention(
                x, h, h, blk.cross_attn, relax=cfg.relax_cross,
                weight_fn=cfg.weight_fn_cross, dropout_p=cfg.dropout_attention,
                rng=self._rng_dropout, phase=phase, gamma_rng=self._rng_gamma,
                gamma_out=self.last_gammas["cross"])
            x = blk.ln2(x + self._dropout(c, cfg.dropout_residual, phase))
            f = self._ffn(blk.ff, x, phase)
            x = blk.ln3(x + self._dropout(f, cfg.dropout_residual, phase))
        return softmax_rows(matmul(x, self.out_w) + self.out_b)

    def decode_probs(self, h: Tensor, y_tokens, phase: Phase = Phase.EVAL) -> Tensor:
        """Teacher-forced next-token probabilities for every prefix of y."""
        arr = np.asarray(y_tokens, dtype=np.int64)
        if arr.shape[-1] > self.config.max_len:
            raise ValueError(f"target length {arr.shape[-1]} exceeds max_len "
                             f"{self.config.max_len}")
        if arr.size == 0:
            raise ValueError("target prefix must be non-empty")
        y = self._embed(self.emb_dec, arr, phase)
        return self._decode_from_embeddings(h, y, phase)

    def decode_step(self, h: Tensor, prefix, phase: Phase = Phase.EVAL) -> np.ndarray:
        """Next-token probability vector given a BOS-started prefix."""
        arr = np.asarray(prefix, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0 or arr[0] != BOS_ID:
            raise ValueError("prefix must be a non-empty sequence starting with BOS")
        probs = self.decode_probs(h, arr, phase)
        return probs.data[-1]

    def decode_step_batch(self, h: Tensor, prefixes: np.ndarray,
                          phase: Phase = Phase.EVAL) -> np.ndarray:
        """Next-token probabilities [B, D] for equal-length prefixes [B, t]."""
        probs = self.decode_probs(h, prefixes, phase)
        return probs.data[:, -1, :]

    def forward_teacher_forced(self, x_tokens, y_tokens,
                               phase: Phase = Phase.EVAL) -> Tensor:
        """Probabilities [.., L, D]; row l conditions on y[.., :l+1]."""
        h = self.encode(x_tokens, phase)
        return self.decode_probs(h, y_tokens, phase)
