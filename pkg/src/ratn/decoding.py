"""Autoregressive decoding with beam search and shallow LM fusion.

Fused scores are log P(model) + lambda * log P(LM), accumulated per emitted
token and never renormalized. A hypothesis finishes when it emits EOS; the
search stops once the best unfinished score drops below the best finished
score minus eos_margin (margin 0: no unfinished hypothesis can still win),
or at max_len. Final ranking divides scores by emitted-token count.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, no_grad
from .transformer import BOS_ID, EOS_ID, Seq2SeqModel

_LOG_FLOOR = 1e-300  # keeps log() finite; scores this low never win


@dataclass
class BeamHypothesis:
    """A partial decode: tokens start at BOS; score sums fused log-probs."""

    tokens: list[int]
    score: float
    finished: bool = False

    @property
    def emitted(self) -> list[int]:
        return self.tokens[1:]

    @property
    def normalized_score(self) -> float:
        return self.score / max(1, len(self.tokens) - 1)


class LmScorer(abc.ABC):
    """Token-level language model over the decoder's vocabulary."""

    @abc.abstractmethod
    def log_probs(self, prefix) -> np.ndarray:
        """Normalized log-distribution over all tokens given a prefix."""


class BigramLm(LmScorer):
    """Add-k smoothed bigram model on a D x D transition count matrix."""

    def __init__(self, counts: np.ndarray, k: float):
        if k <= 0:
            raise ValueError(f"smoothing constant k must be > 0, got {k}")
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"counts must be square, got {counts.shape}")
        self.counts = counts
        self.k = float(k)
        d = counts.shape[0]
        totals = counts.sum(axis=1, keepdims=True)
        self._log_cond = np.log(counts + k) - np.log(totals + k * d)

    @property
    def vocab_size(self) -> int:
        return self.counts.shape[0]

    def log_probs(self, prefix) -> np.ndarray:
        context = int(prefix[-1])
        return self._log_cond[context]


def bigram_lm_train(corpus, vocab_size: int, k: float) -> BigramLm:
    """Count transitions over BOS + sequence + EOS and smooth with add-k.

    Conditionals are (count(a, b) + k) / (sum_b count(a, b) + k * D); a row
    with no observations is uniform.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train a language model on an empty corpus")
    counts = np.zeros((vocab_size, vocab_size))
    for seq in corpus:
        path = [BOS_ID, *map(int, seq), EOS_ID]
        for a, b in zip(path, path[1:]):
            counts[a, b] += 1.0
    return BigramLm(counts, k)


def shallow_fusion(log_p: np.ndarray, log_p_lm: np.ndarray,
                   lam: float) -> np.ndarray:
    """log_p + lam * log_p_lm, elementwise; scores, not probabilities."""
    if lam < 0:
        raise ValueError(f"fusion weight lambda must be >= 0, got {lam}")
    if lam == 0.0:
        return log_p
    if log_p.shape != log_p_lm.shape:
        raise ValueError(f"score vectors disagree: {log_p.shape} vs {log_p_lm.shape}")
    return log_p + lam * log_p_lm


def greedy_decode(model: Seq2SeqModel, h: Tensor, max_len: int) -> list[int]:
    """Argmax token per step until EOS or max_len; ties take the lowest id.

    Returns the full token list including BOS (and EOS when emitted).
    """
    tokens = [BOS_ID]
    with no_grad():
        for _ in range(max_len):
            p = model.decode_step(h, tokens)
            tok = int(np.argmax(p))
            tokens.append(tok)
            if tok == EOS_ID:
                break
    return tokens


def beam_search(model: Seq2SeqModel, h: Tensor, beam: int,
                lm: LmScorer | None = None, lam: float = 0.0,
                max_len: int = 16, eos_margin: float = 0.0) -> list[BeamHypothesis]:
    """Beam expansion over fused scores.

    All live hypotheses share a length each step, so the model is queried
    once per step in a batch. Candidate selection is a stable sort on score,
    which breaks ties toward lower parent index, then lower token id (this
    makes beam=1 reproduce greedy decoding exactly). Hypotheses still alive
    at max_len are returned unfinished.

    The default margin 0 stops as soon as no continuation can beat the best
    finished raw score; since the final ranking is length-normalized, pass a
    large eos_margin (no truncation) when the search should be exhaustive
    over lengths, e.g. when comparing against an enumeration oracle.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    if lam < 0:
        raise ValueError(f"fusion weight lambda must be >= 0, got {lam}")
    if h.shape[-2] == 0:
        raise ValueError("empty encoder output")
    live = [BeamHypothesis([BOS_ID], 0.0)]
    finished: list[BeamHypothesis] = []
    with no_grad():
        for _ in range(max_len):
            prefixes = np.array([hyp.tokens for hyp in live], dtype=np.int64)
            probs = model.decode_step_batch(h, prefixes)
            scores = np.log(np.maximum(probs, _LOG_FLOOR))
            if lm is not None and lam > 0.0:
                lm_scores = np.stack([lm.log_probs(hyp.tokens) for hyp in live])
                scores = scores + lam * lm_scores
            total = np.asarray([hyp.score for hyp in live])[:, None] + scores
            flat = total.reshape(-1)
            order = np.argsort(-flat, kind="stable")[:beam]
            vocab = scores.shape[1]
            new_live: list[BeamHypothesis] = []
            for idx in order:
                parent, tok = divmod(int(idx), vocab)
                hyp = BeamHypothesis(live[parent].tokens + [tok], float(flat[idx]))
                if tok == EOS_ID:
                    hyp.finished = True
                    finished.append(hyp)
                else:
                    new_live.append(hyp)
            live = new_live
            if not live:
                break
            if finished:
                best_fin = max(f.score for f in finished)
                best_live = max(hyp.score for hyp in live)
                if best_live < best_fin - eos_margin:
                    live = []  # abandoned prefixes are not hypotheses
                    break
    pool = finished + live  # live survivors were cut at max_len
    pool.sort(key=lambda hyp: (-hyp.normalized_score, -hyp.score, hyp.tokens))
    return pool
