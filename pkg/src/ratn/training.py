"""Label-smoothed cross-entropy, Adam, and the phase-gated train loop."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import Phase
from .decoding import greedy_decode
from .rng import RngStream
from .tensor import Tensor, backward, clamp_min, log, mul, tsum
from .transformer import BOS_ID, EOS_ID, Seq2SeqModel

PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.1
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 200
    # stop once a dev evaluation reaches this accuracy (None: run all steps)
    target_eval_acc: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), "
                             f"got {self.label_smoothing}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def label_smoothed_nll(p: Tensor, targets, alpha: float) -> Tensor:
    """Mean cross-entropy against (1-alpha) * onehot + alpha / D targets.

    p holds probabilities over the last axis; targets is an integer array
    matching the leading axes. Probabilities below 1e-12 are floored before
    the log (with a warning) so a zero at the target cannot produce -inf.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != p.shape[:-1]:
        raise ValueError(f"targets shape {tgt.shape} does not match "
                         f"probability rows {p.shape[:-1]}")
    vocab = p.shape[-1]
    q = np.full(p.shape, alpha / vocab)
    np.put_along_axis(q, tgt[..., None], alpha / vocab + (1.0 - alpha), axis=-1)
    if np.any(p.data < PROB_FLOOR):
        warnings.warn("probabilities below 1e-12 floored in label_smoothed_nll",
                      RuntimeWarning)
    logp = log(clamp_min(p, PROB_FLOOR))
    n_rows = max(1, int(np.prod(p.shape[:-1])))
    return mul(tsum(mul(logp, q)), -1.0 / n_rows)


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus a step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter data."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} of shape {p.data.shape}")
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / (1.0 - cfg.beta1 ** t)
        v_hat = state.v[name] / (1.0 - cfg.beta2 ** t)
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def teacher_forcing_pair(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(decoder input, prediction target): BOS + y and y + EOS."""
    targets = np.asarray(targets, dtype=np.int64)
    bos = np.full((*targets.shape[:-1], 1), BOS_ID, dtype=np.int64)
    eos = np.full((*targets.shape[:-1], 1), EOS_ID, dtype=np.int64)
    return (np.concatenate([bos, targets], axis=-1),
            np.concatenate([targets, eos], axis=-1))


def sequence_accuracy(model: Seq2SeqModel, sources: np.ndarray,
                      targets: np.ndarray, max_len: int | None = None) -> float:
    """Exact-match rate of greedy decodes against references."""
    if max_len is None:
        max_len = targets.shape[1] + 2
    hits = 0
    for src, ref in zip(sources, targets):
        h = model.encode(src, Phase.EVAL)
        out = greedy_decode(model, h, max_len)
        emitted = out[1:-1] if out and out[-1] == EOS_ID else out[1:]
        hits += int(len(emitted) == len(ref) and np.array_equal(emitted, ref))
    return hits / len(sources)


def train(model: Seq2SeqModel, sources: np.ndarray, targets: np.ndarray,
          cfg: TrainConfig, dev: tuple[np.ndarray, np.ndarray] | None = None,
          eval_limit: int = 64) -> list[dict]:
    """Teacher-forced training with relaxation gated by phase.

    Steps run with phase TRAIN (dropout and relaxation active); the periodic
    dev evaluation runs with phase EVAL (relaxation per its mode, drawing no
    randomness, so it never perturbs the training streams). Returns one
    record per step: {step, loss, eval_acc, gamma_effective}.
    """
    params = model.parameters()
    state = AdamState.init(params)
    batches = RngStream(cfg.seed, "batch")
    records: list[dict] = []
    n = len(sources)
    for step in range(1, cfg.steps + 1):
        idx = batches.integers(0, n, cfg.batch_size)
        y_in, y_out = teacher_forcing_pair(targets[idx])
        probs = model.forward_teacher_forced(sources[idx], y_in, Phase.TRAIN)
        loss = label_smoothed_nll(probs, y_out, cfg.label_smoothing)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDiverged(f"loss became {loss_val} at step {step}")
        model.zero_grad()
        backward(loss)
        adam_step(params, {k: t.grad for k, t in params.items()}, state, cfg)
        gammas = model.last_gammas["self"] + model.last_gammas["cross"]
        record = {"step": step, "loss": loss_val, "eval_acc": None,
                  "gamma_effective": float(np.mean(gammas)) if gammas else 0.0}
        if dev is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            dsrc, dtgt = dev
            limit = min(eval_limit, len(dsrc))
            record["eval_acc"] = sequence_accuracy(model, dsrc[:limit], dtgt[:limit])
        records.append(record)
        if (cfg.target_eval_acc is not None and record["eval_acc"] is not None
                and record["eval_acc"] >= cfg.target_eval_acc):
            break
    return records
