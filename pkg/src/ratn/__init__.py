"""ratn: a desk-scale transformer library built around relaxed attention.

Uniform smoothing of attention weights (with matched-inference and fuzzy
variants), smoothed focus, windowed attention with relative position bias,
beam search with shallow LM fusion, and a seeded experiment harness --
all on a small float64 autodiff core.
"""

from .attention import (MODE_MATCHED, MODE_OFF, MODE_TRAIN_ONLY, MhaParams,
                        Phase, RelaxationConfig, WindowAttnParams,
                        attention_dropout, attention_head, multi_head_attention,
                        relax_weights, sample_fuzzy_gamma,
                        smoothed_focus_weights, window_merge, window_partition,
                        windowed_mha)
from .decoding import (BeamHypothesis, BigramLm, LmScorer, beam_search,
                       bigram_lm_train, greedy_decode, shallow_fusion)
from .metrics import EditAlignment, attention_entropy, corpus_bleu, edit_align, wer
from .rng import RngStream
from .tensor import Tensor, backward, finite_diff_grad, no_grad
from .training import TrainConfig, adam_step, label_smoothed_nll, train
from .transformer import BOS_ID, EOS_ID, PAD_ID, ModelConfig, Seq2SeqModel

__version__ = "0.1.0"

__all__ = [
    "BOS_ID", "BeamHypothesis", "BigramLm", "EOS_ID", "EditAlignment",
    "LmScorer", "MODE_MATCHED", "MODE_OFF", "MODE_TRAIN_ONLY", "MhaParams",
    "ModelConfig", "PAD_ID", "Phase", "RelaxationConfig", "RngStream",
    "Seq2SeqModel", "Tensor", "TrainConfig", "WindowAttnParams", "adam_step",
    "attention_dropout", "attention_entropy", "attention_head", "backward",
    "beam_search", "bigram_lm_train", "corpus_bleu", "edit_align",
    "finite_diff_grad", "greedy_decode", "label_smoothed_nll",
    "multi_head_attention", "no_grad", "relax_weights", "sample_fuzzy_gamma",
    "shallow_fusion", "smoothed_focus_weights", "train", "wer",
    "window_merge", "window_partition", "windowed_mha",
]
