"""Declarative experiment runner.

An ExperimentSpec names a synthetic task, model/training settings, a grid of
relaxation settings, seeds, and optional LM fusion. Running it trains one
model per (setting, seed) cell, decodes dev and test splits with and without
the LM (fusion weight chosen on dev only), and writes JSON-lines results plus
a mean/std summary. Identical specs produce byte-identical files: no
timestamps, sorted keys, sorted rows, and every default materialized into
the output for provenance.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import MODE_TRAIN_ONLY, RelaxationConfig, _MODES
from .decoding import BigramLm, beam_search, bigram_lm_train
from .metrics import wer
from .tasks import (ParallelCorpus, ToyTranslateSpec, WindowClassifySpec,
                    gen_copy_task, gen_reverse_task, gen_toy_translate,
                    gen_window_classify)
from .training import TrainConfig, train
from .transformer import BOS_ID, EOS_ID, ModelConfig, Phase, Seq2SeqModel
from .rng import RngStream
from .window_classifier import (WindowClassifier, WindowClassifierConfig,
                                train_classifier)

SEQUENCE_TASKS = ("copy", "reverse", "toy_translate")
TASKS = SEQUENCE_TASKS + ("window_classify",)
LM_NONE = "none"

DEFAULT_GAMMA_GRID = {
    "self": (0.0, 0.0001, 0.001, 0.01, 0.05, 0.1),
    "cross": (0.0, 0.1, 0.15, 0.2, 0.25, 0.3),
}
DEFAULT_LAMBDA_GRID = (0.05, 0.1, 0.15, 0.2)
# fuzzy-relaxation defaults for the window-classification leg
DEFAULT_FUZZY_GAMMA0 = 0.1
DEFAULT_FUZZY_SIGMA2 = 0.03 ** 2


@dataclass(frozen=True)
class RelaxSetting:
    """One point of the relaxation grid: where and how much to relax."""

    site: str = "none"  # none | self | cross | window
    gamma: float = 0.0
    sigma2: float = 0.0
    mode: str = MODE_TRAIN_ONLY
    fuzzy: bool = False

    def __post_init__(self):
        if self.site not in ("none", "self", "cross", "window"):
            raise ValueError(f"unknown relaxation site {self.site!r}")
        if self.mode not in _MODES:
            raise ValueError(f"unknown relaxation mode {self.mode!r}")
        if self.fuzzy and self.sigma2 <= 0.0:
            object.__setattr__(self, "sigma2", DEFAULT_FUZZY_SIGMA2)

    def relaxation(self) -> RelaxationConfig:
        if self.site == "none":
            return RelaxationConfig()
        return RelaxationConfig(gamma0=self.gamma, sigma2=self.sigma2,
                                mode=self.mode, fuzzy=self.fuzzy)

    @property
    def label(self) -> str:
        if self.site == "none":
            return "baseline"
        parts = [self.site, f"g{self.gamma:g}", self.mode]
        if self.fuzzy:
            parts.append(f"fuzzy{self.sigma2:g}")
        return "_".join(parts)


@dataclass(frozen=True)
class LmSpec:
    """Which LM corpora to fuse and the fusion-weight search grid."""

    corpora: tuple[str, ...] = ("in_domain",)
    k: float = 0.5
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if not self.corpora:
            raise ValueError("lm.corpora must be non-empty")
        for c in self.corpora:
            if c not in ("in_domain", "extended"):
                raise ValueError(f"unknown lm corpus {c!r}")
        if not self.lambda_grid:
            raise ValueError("lm.lambda_grid must be non-empty")
        if any(l < 0 for l in self.lambda_grid):
            raise ValueError("fusion weights must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LmSpec":
        d = dict(d)
        corpus = d.pop("corpus", None)
        if corpus is not None:
            d["corpora"] = [corpus] if isinstance(corpus, str) else corpus
        if "corpora" in d:
            d["corpora"] = tuple(d["corpora"])
        if "lambda_grid" in d:
            d["lambda_grid"] = tuple(d["lambda_grid"])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentSpec:
    task: str
    seeds: tuple[int, ...] = (0,)
    relax_grid: tuple[RelaxSetting, ...] = (RelaxSetting(),)
    task_params: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    lm: LmSpec | None = None
    beam: int = 4
    eos_margin: float = 0.0
    gamma_grid: dict | None = None
    output_dir: str = "."

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; know {TASKS}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.relax_grid:
            raise ValueError("relax_grid must be non-empty")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["seeds"] = tuple(d.get("seeds", (0,)))
        d["relax_grid"] = tuple(RelaxSetting(**s) for s in d.get("relax_grid",
                                                                 ({"site": "none"},)))
        if d.get("lm") is not None:
            d["lm"] = LmSpec.from_dict(d["lm"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


# ---------------------------------------------------------------------------
# task data


@dataclass
class SequenceTaskData:
    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus
    text: dict[str, np.ndarray]  # lm corpus name -> target-side sequences
    vocab_size: int


def build_task_data(task: str, task_params: dict):
    params = dict(task_params)
    if task in ("copy", "reverse"):
        defaults = {"vocab_size": 16, "length": 6, "n_train": 2048,
                    "n_dev": 64, "n_test": 128, "data_seed": 1234}
        defaults.update(params)
        gen = gen_copy_task if task == "copy" else gen_reverse_task
        rng = RngStream(defaults["data_seed"], "data")
        mk = lambda label, n: gen(rng.child(label), defaults["vocab_size"],
                                  defaults["length"], n)
        train_c = mk("train", defaults["n_train"])
        dev_c = mk("dev", defaults["n_dev"])
        test_c = mk("test", defaults["n_test"])
        return SequenceTaskData(train=train_c, dev=dev_c, test=test_c,
                                text={"in_domain": train_c.targets},
                                vocab_size=defaults["vocab_size"])
    if task == "toy_translate":
        data = gen_toy_translate(ToyTranslateSpec(**params))
        return SequenceTaskData(train=data.train, dev=data.dev, test=data.test,
                                text={"in_domain": data.text_in_domain,
                                      "extended": data.text_extended},
                                vocab_size=data.vocab_size)
    if task == "window_classify":
        return gen_window_classify(WindowClassifySpec(**params))
    raise ValueError(f"unknown task {task!r}")


def resolve_model_config(spec: ExperimentSpec, data,
                         setting: RelaxSetting) -> ModelConfig:
    overrides = dict(spec.model)
    src_len = data.train.sources.shape[1]
    tgt_len = data.train.targets.shape[1]
    overrides.setdefault("vocab_size", data.vocab_size)
    overrides.setdefault("max_len", max(src_len, tgt_len + 4))
    relax = setting.relaxation()
    if setting.site == "self":
        overrides["relax_self"] = relax
    elif setting.site == "cross":
        overrides["relax_cross"] = relax
    elif setting.site == "window":
        raise ValueError("site 'window' applies to the window_classify task only")
    return ModelConfig(**overrides)


def resolve_classifier_config(spec: ExperimentSpec, data,
                              setting: RelaxSetting) -> WindowClassifierConfig:
    if setting.site not in ("none", "window"):
        raise ValueError(f"site {setting.site!r} does not apply to window_classify")
    s = data.spec
    overrides = dict(spec.model)
    overrides.setdefault("height", s.height)
    overrides.setdefault("width", s.width)
    overrides.setdefault("channels", s.channels)
    overrides.setdefault("window", s.window)
    overrides.setdefault("n_classes", s.n_classes)
    overrides["relax"] = setting.relaxation()
    return WindowClassifierConfig(**overrides)


# ---------------------------------------------------------------------------
# decoding and metrics per cell


def strip_specials(tokens) -> list[int]:
    return [int(t) for t in tokens if int(t) not in (BOS_ID, EOS_ID)]


def decode_corpus(model: Seq2SeqModel, sources: np.ndarray, beam: int,
                  lm=None, lam: float = 0.0, max_len: int | None = None,
                  eos_margin: float = 0.0) -> list[tuple[list[int], float]]:
    """Best beam hypothesis per source: (specials-stripped tokens, score)."""
    outs = []
    for src in sources:
        h = model.encode(src, Phase.EVAL)
        hyps = beam_search(model, h, beam, lm=lm, lam=lam,
                           max_len=max_len or model.config.max_len - 2,
                           eos_margin=eos_margin)
        outs.append((strip_specials(hyps[0].tokens), hyps[0].score))
    return outs


def _base_row(setting: RelaxSetting, seed: int) -> dict:
    return {"type": "result", "setting": setting.label, "site": setting.site,
            "gamma": setting.gamma, "sigma2": setting.sigma2,
            "mode": setting.mode, "fuzzy": setting.fuzzy, "seed": seed}


def run_sequence_cell(spec: ExperimentSpec, data: SequenceTaskData,
                      setting: RelaxSetting, seed: int) -> list[dict]:
    """Train one model and produce result rows for every decode performed.

    Decodes: dev without LM, dev per (corpus, lambda) on the grid, test
    without LM, and test once per corpus at the dev-selected lambda (ties go
    to the smaller lambda). Test is never used for selection.
    """
    cfg = resolve_model_config(spec, data, setting)
    train_cfg = TrainConfig(**{**spec.train, "seed": seed})
    model = Seq2SeqModel(cfg, seed=seed)
    train(model, data.train.sources, data.train.targets, train_cfg)
    lms: dict[str, BigramLm] = {}
    if spec.lm is not None:
        for name in spec.lm.corpora:
            if name not in data.text:
                raise ValueError(f"task {spec.task!r} has no {name!r} text corpus")
            lms[name] = bigram_lm_train(data.text[name], cfg.vocab_size, spec.lm.k)
    max_len = data.train.targets.shape[1] + 2
    rows: list[dict] = []

    def decode_and_score(split: str, corpus: ParallelCorpus, lm_name: str,
                         lam: float) -> float:
        decoded = decode_corpus(model, corpus.sources, spec.beam,
                                lm=lms.get(lm_name), lam=lam, max_len=max_len,
                                eos_margin=spec.eos_margin)
        hyps = [tokens for tokens, _ in decoded]
        value = wer([list(map(int, t)) for t in corpus.targets], hyps)
        rows.append({**_base_row(setting, seed), "split": split, "lm": lm_name,
                     "lambda": lam, "metric": "wer", "value": value})
        return value

    decode_and_score("dev", data.dev, LM_NONE, 0.0)
    selected: dict[str, float] = {}
    for name in lms:
        best_lam, best_val = None, None
        for lam in spec.lm.lambda_grid:
            val = decode_and_score("dev", data.dev, name, float(lam))
            if best_val is None or val < best_val:
                best_lam, best_val = float(lam), val
        selected[name] = best_lam
    decode_and_score("test", data.test, LM_NONE, 0.0)
    for name, lam in selected.items():
        decode_and_score("test", data.test, name, lam)
    return rows


def run_classify_cell(spec: ExperimentSpec, data, setting: RelaxSetting,
                      seed: int) -> list[dict]:
    cfg = resolve_classifier_config(spec, data, setting)
    train_cfg = TrainConfig(**{**spec.train, "seed": seed})
    model = WindowClassifier(cfg, seed=seed)
    train_classifier(model, data.train.inputs, data.train.labels, train_cfg)
    rows = []
    for split, corpus in (("dev", data.dev), ("test", data.test)):
        err = 1.0 - model.accuracy(corpus.inputs, corpus.labels)
        rows.append({**_base_row(setting, seed), "split": split, "lm": LM_NONE,
                     "lambda": 0.0, "metric": "error_rate", "value": err})
    return rows


def run_cell(spec: ExperimentSpec, data, setting: RelaxSetting,
             seed: int) -> list[dict]:
    if spec.task == "window_classify":
        return run_classify_cell(spec, data, setting, seed)
    return run_sequence_cell(spec, data, setting, seed)


def _cell_job(spec_dict: dict, setting_idx: int, seed: int) -> list[dict]:
    spec = ExperimentSpec.from_dict(spec_dict)
    data = build_task_data(spec.task, spec.task_params)
    setting = spec.relax_grid[setting_idx]
    try:
        return run_cell(spec, data, setting, seed)
    except Exception as err:  # record the failure, keep the run going
        return [{"type": "cell_failed", "setting": setting.label, "seed": seed,
                 "error": f"{type(err).__name__}: {err}"}]


def _row_sort_key(row: dict):
    return (row.get("setting", ""), row.get("seed", -1), row.get("split", ""),
            row.get("lm", ""), row.get("lambda", -1.0), row.get("metric", ""),
            row.get("type", ""))


def provenance(spec: ExperimentSpec) -> dict:
    """The spec with every default materialized, for the results header."""
    data_defaults = {"copy": {"vocab_size": 16, "length": 6, "n_train": 2048,
                              "n_dev": 64, "n_test": 128, "data_seed": 1234}}
    data_defaults["reverse"] = data_defaults["copy"]
    if spec.task == "toy_translate":
        task_params = dataclasses.asdict(ToyTranslateSpec(**spec.task_params))
    elif spec.task == "window_classify":
        task_params = dataclasses.asdict(WindowClassifySpec(**spec.task_params))
    else:
        task_params = {**data_defaults[spec.task], **spec.task_params}
    out = {
        "type": "spec",
        "task": spec.task,
        "task_params": task_params,
        "model": spec.model,
        "train": dataclasses.asdict(TrainConfig(**spec.train)),
        "relax_grid": [dataclasses.asdict(s) for s in spec.relax_grid],
        "lm": dataclasses.asdict(spec.lm) if spec.lm else None,
        "seeds": list(spec.seeds),
        "beam": spec.beam,
        "eos_margin": spec.eos_margin,
        "gamma_grid": spec.gamma_grid or {k: list(v)
                                          for k, v in DEFAULT_GAMMA_GRID.items()},
        "note": "gamma/lambda selection uses the dev split only; "
                "test is decoded once per selected setting",
    }
    return _jsonable(out)


def _write_rows(path: Path, header: dict, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")


def summarize(rows: list[dict]) -> dict:
    """Mean +/- std across seeds of every test-split metric."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        if row.get("type") != "result" or row.get("split") != "test":
            continue
        groups.setdefault((row["setting"], row["lm"], row["metric"]), []).append(
            row["value"])
    table = []
    for (setting, lm, metric), values in sorted(groups.items()):
        arr = np.asarray(values)
        table.append({"setting": setting, "lm": lm, "metric": metric,
                      "mean": float(arr.mean()),
                      "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                      "n_seeds": len(arr)})
    return {"summary": table}


def run_experiment(spec: ExperimentSpec, workers: int = 1,
                   output_dir: str | None = None) -> dict[str, Path]:
    """Run every (setting, seed) cell; write results.jsonl and summary.json."""
    out_dir = Path(output_dir or spec.output_dir)
    cells = [(i, seed) for i in range(len(spec.relax_grid)) for seed in spec.seeds]
    spec_dict = provenance(spec)
    spec_dict.pop("type")
    spec_for_job = {k: v for k, v in spec_dict.items() if k != "note"}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_cell_job, spec_for_job, i, s) for i, s in cells]
            shards = [f.result() for f in futures]
    else:
        data = build_task_data(spec.task, spec.task_params)
        shards = []
        for i, seed in cells:
            try:
                shards.append(run_cell(spec, data, spec.relax_grid[i], seed))
            except Exception as err:
                shards.append([{"type": "cell_failed",
                                "setting": spec.relax_grid[i].label,
                                "seed": seed,
                                "error": f"{type(err).__name__}: {err}"}])
    rows = sorted((r for shard in shards for r in shard), key=_row_sort_key)
    results_path = out_dir / "results.jsonl"
    _write_rows(results_path, provenance(spec), rows)
    summary_path = out_dir / "summary.json"
    summary = {"spec": provenance(spec), **summarize(rows)}
    summary_path.write_text(json.dumps(_jsonable(summary), sort_keys=True, indent=1))
    return {"results": results_path, "summary": summary_path}


# ---------------------------------------------------------------------------
# gamma sweep


def resolve_gamma_grid(spec: ExperimentSpec) -> dict[str, list[float]]:
    """Sweep grid per site; defaults to the standard search sets, and every
    site's grid must include gamma = 0 (the baseline point)."""
    if spec.gamma_grid is not None:
        grid = {site: [float(g) for g in gammas]
                for site, gammas in spec.gamma_grid.items()}
    elif spec.task == "window_classify":
        grid = {"window": list(DEFAULT_GAMMA_GRID["self"])}
    else:
        grid = {site: list(gammas) for site, gammas in DEFAULT_GAMMA_GRID.items()}
    for site, gammas in grid.items():
        if 0.0 not in gammas:
            raise ValueError(f"gamma grid for site {site!r} must include 0")
    return grid


def gamma_sweep(spec: ExperimentSpec, workers: int = 1,
                output_dir: str | None = None) -> Path:
    """Dev-split metric for every (site, gamma, seed) grid point, as CSV.

    The grid must include gamma = 0 per site; that point runs the identical
    code path as a baseline cell, so its value matches the baseline
    bit-exactly under the same seed.
    """
    grid = resolve_gamma_grid(spec)
    sweep_grid = tuple(RelaxSetting(site=site, gamma=float(g), mode=MODE_TRAIN_ONLY)
                       for site, gammas in grid.items() for g in gammas)
    sweep_spec = dataclasses.replace(spec, relax_grid=sweep_grid, lm=None)

    rows: list[tuple] = []
    if workers > 1:
        spec_dict = provenance(sweep_spec)
        spec_dict.pop("type")
        spec_dict.pop("note")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {}
            for i, setting in enumerate(sweep_spec.relax_grid):
                for seed in sweep_spec.seeds:
                    futures[(setting.site, setting.gamma, seed)] = pool.submit(
                        _cell_job, spec_dict, i, seed)
            results = {k: f.result() for k, f in futures.items()}
    else:
        data = build_task_data(sweep_spec.task, sweep_spec.task_params)
        results = {}
        for setting in sweep_spec.relax_grid:
            for seed in sweep_spec.seeds:
                results[(setting.site, setting.gamma, seed)] = run_cell(
                    sweep_spec, data, setting, seed)
    for (site, gamma, seed), cell_rows in results.items():
        dev = [r for r in cell_rows if r.get("split") == "dev"
               and r.get("lm") == LM_NONE]
        if not dev:
            raise RuntimeError(f"sweep cell ({site}, {gamma}, {seed}) failed: "
                               f"{cell_rows}")
        rows.append((site, gamma, seed, dev[0]["metric"], dev[0]["value"]))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    out_dir = Path(output_dir or spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "gamma_sweep.csv"
    with open(path, "w") as f:
        f.write("site,gamma,seed,metric,value\n")
        for site, gamma, seed, metric, value in rows:
            f.write(f"{site},{gamma:g},{seed},{metric},{value!r}\n")
    return path


# ---------------------------------------------------------------------------
# LM-induced improvement report


def ilm_suppression_report(results_path) -> dict:
    """Per approach: absolute test metric and the improvement the LM bought.

    Needs test rows without LM and with each fused LM; the improvement for a
    corpus is metric(no LM) - metric(selected lambda with that LM), reported
    per seed with mean and median across seeds.
    """
    rows = []
    with open(results_path) as f:
        for line in f:
            row = json.loads(line)
            if row.get("type") == "result" and row.get("split") == "test":
                rows.append(row)
    if not rows:
        raise ValueError(f"no test result rows in {results_path}")
    settings = sorted({r["setting"] for r in rows},
                      key=lambda s: (s != "baseline", s))
    corpora = sorted({r["lm"] for r in rows} - {LM_NONE})
    report_rows = []
    for setting in settings:
        mine = [r for r in rows if r["setting"] == setting]
        seeds = sorted({r["seed"] for r in mine})
        no_lm = {r["seed"]: r["value"] for r in mine if r["lm"] == LM_NONE}
        if set(seeds) - set(no_lm):
            raise ValueError(f"missing no-LM test rows for {setting}")
        entry = {"approach": setting,
                 "no_lm": {"mean": float(np.mean([no_lm[s] for s in seeds])),
                           "per_seed": [no_lm[s] for s in seeds]},
                 "with_lm": {}}
        for corpus in corpora:
            vals = {r["seed"]: (r["value"], r["lambda"]) for r in mine
                    if r["lm"] == corpus}
            if set(seeds) - set(vals):
                raise ValueError(f"missing {corpus} LM test rows for {setting}")
            reductions = [no_lm[s] - vals[s][0] for s in seeds]
            entry["with_lm"][corpus] = {
                "mean": float(np.mean([vals[s][0] for s in seeds])),
                "lambda_per_seed": [vals[s][1] for s in seeds],
                "reduction_per_seed": reductions,
                "reduction_mean": float(np.mean(reductions)),
                "reduction_median": float(np.median(reductions)),
            }
        report_rows.append(entry)
    return {"note": "fusion weights were selected on the dev split; "
                    "reductions are measured on test",
            "rows": report_rows}
