"""Command-line entry points.

Subcommands: train, decode, eval, experiment, sweep-gamma, report-ilm. All
take an experiment spec (JSON); corpora are regenerated deterministically
from the spec, so decode/eval never need separate data files. The default
output root comes from $RATN_OUTPUT_ROOT (falling back to the current
directory), joined with the spec's output_dir.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

from .checkpoint import load_model, save_model
from .decoding import bigram_lm_train
from .experiment import (ExperimentSpec, LM_NONE, build_task_data,
                         decode_corpus, gamma_sweep, ilm_suppression_report,
                         provenance, resolve_model_config, run_experiment)
from .metrics import corpus_bleu, wer
from .training import TrainConfig, train
from .transformer import Seq2SeqModel

OUTPUT_ROOT_ENV = "RATN_OUTPUT_ROOT"


def _out_dir(args, spec: ExperimentSpec | None = None) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    return root / (spec.output_dir if spec else ".")


def _load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec)
    if getattr(args, "seed", None) is not None:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    return spec


def _config_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(provenance(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def cmd_train(args) -> int:
    spec = _load_spec(args)
    if spec.task == "window_classify":
        raise SystemExit("use `ratn experiment` for the window_classify task")
    out = _out_dir(args, spec)
    out.mkdir(parents=True, exist_ok=True)
    data = build_task_data(spec.task, spec.task_params)
    setting = spec.relax_grid[args.setting]
    seed = spec.seeds[0]
    cfg = resolve_model_config(spec, data, setting)
    model = Seq2SeqModel(cfg, seed=seed)
    records = train(model, data.train.sources, data.train.targets,
                    TrainConfig(**{**spec.train, "seed": seed}),
                    dev=(data.dev.sources, data.dev.targets))
    ckpt = out / "model.ratn"
    save_model(model, ckpt)
    with open(out / "metrics.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    final = records[-1]
    print(f"trained {setting.label} seed={seed}: loss={final['loss']:.4f} "
          f"eval_acc={final['eval_acc']}")
    print(f"checkpoint: {ckpt}")
    return 0


def _split_corpus(data, split: str):
    if split not in ("dev", "test"):
        raise SystemExit(f"unknown split {split!r}")
    return data.dev if split == "dev" else data.test


def cmd_decode(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args, spec)
    out.mkdir(parents=True, exist_ok=True)
    data = build_task_data(spec.task, spec.task_params)
    model = load_model(args.checkpoint)
    corpus = _split_corpus(data, args.split)
    lm = None
    if args.lm != LM_NONE:
        if spec.lm is None:
            raise SystemExit("spec has no lm section")
        lm = bigram_lm_train(data.text[args.lm], model.config.vocab_size,
                             spec.lm.k)
    lam = args.lm_lambda if lm is not None else 0.0
    decoded = decode_corpus(model, corpus.sources, args.beam or spec.beam,
                            lm=lm, lam=lam,
                            max_len=corpus.targets.shape[1] + 2,
                            eos_margin=spec.eos_margin)
    path = out / f"decoded.{args.split}.jsonl"
    with open(path, "w") as f:
        for i, (tokens, score) in enumerate(decoded):
            f.write(json.dumps({"id": i, "tokens": tokens, "score": score,
                                "lm_lambda": lam},
                               sort_keys=True) + "\n")
    print(f"decoded {len(decoded)} sequences -> {path}")
    return 0


def cmd_eval(args) -> int:
    spec = _load_spec(args)
    out = _out_dir(args, spec)
    out.mkdir(parents=True, exist_ok=True)
    data = build_task_data(spec.task, spec.task_params)
    corpus = _split_corpus(data, args.split)
    refs = [list(map(int, t)) for t in corpus.targets]
    hyps = []
    with open(args.hyps) as f:
        for line in f:
            hyps.append(json.loads(line)["tokens"])
    if args.metric == "wer":
        value = wer(refs, hyps)
    elif args.metric == "bleu":
        value = corpus_bleu(refs, hyps)
    else:
        raise SystemExit(f"unknown metric {args.metric!r}")
    report = {"metric": args.metric, "value": value, "n_utterances": len(hyps),
              "config_hash": _config_hash(spec)}
    print(json.dumps(report, sort_keys=True))
    (out / f"eval.{args.metric}.json").write_text(
        json.dumps(report, sort_keys=True, indent=1))
    return 0


def cmd_experiment(args) -> int:
    spec = _load_spec(args)
    paths = run_experiment(spec, workers=args.workers,
                           output_dir=str(_out_dir(args, spec)))
    print(f"results: {paths['results']}")
    print(f"summary: {paths['summary']}")
    return 0


def cmd_sweep_gamma(args) -> int:
    spec = _load_spec(args)
    path = gamma_sweep(spec, workers=args.workers,
                       output_dir=str(_out_dir(args, spec)))
    print(f"sweep: {path}")
    return 0


def cmd_report_ilm(args) -> int:
    report = ilm_suppression_report(args.results)
    text = json.dumps(report, indent=1, sort_keys=True)
    print(text)
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ilm_report.json").write_text(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ratn",
        description="Train, decode, and sweep relaxed-attention transformers "
                    "on synthetic tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True, workers=False):
        p.add_argument("--spec", required=True, help="experiment spec (JSON)")
        p.add_argument("--output-dir", default=None)
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the spec's seed list")
        if workers:
            p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train one model (first grid setting)")
    add_common(p)
    p.add_argument("--setting", type=int, default=0,
                   help="index into the spec's relax_grid")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="decode a split with a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--lm", default=LM_NONE,
                   choices=[LM_NONE, "in_domain", "extended"])
    p.add_argument("--lm-lambda", type=float, default=0.4,
                   help="fusion weight when --lm is set (speech-recipe "
                        "default 0.4); ignored without an LM")
    p.add_argument("--beam", type=int, default=None)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="score decoded output against references")
    add_common(p)
    p.add_argument("--hyps", required=True, help="decoded JSON-lines file")
    p.add_argument("--split", default="test")
    p.add_argument("--metric", default="wer", choices=["wer", "bleu"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run the full (setting x seed) grid")
    add_common(p, workers=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("sweep-gamma", help="metric-vs-gamma curves as CSV")
    add_common(p, workers=True)
    p.set_defaults(fn=cmd_sweep_gamma)

    p = sub.add_parser("report-ilm", help="LM-induced improvement table")
    p.add_argument("--results", required=True, help="results.jsonl from experiment")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(fn=cmd_report_ilm)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
