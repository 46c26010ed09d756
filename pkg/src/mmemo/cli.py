"""Command-line entry point: ``mmemo <subcommand> ...``.

Outputs go to ``--out-dir``, else ``$MMEMO_OUTPUT_DIR``, else the config's
``output_dir``. Every subcommand appends newline-delimited JSON records to
``<out>/log.ndjson``; evaluation commands also append per-fold metrics to
``<out>/metrics.ndjson``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import corpus as corpus_io
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, Setting, load_config, load_corpus_spec
from .downstream import write_records
from .model import EmotionModel
from .tokenizer import Vocab
from .trainer import ablate, ablation_report, pretrain, run_seeds

OUTPUT_ENV = "MMEMO_OUTPUT_DIR"


class NDJSONLog:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, event: str, **fields) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"event": event, **fields}, sort_keys=True) + "\n")


def _output_dir(args, cfg: RunConfig | None) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg.output_dir if cfg is not None else "runs")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _pick(flag, fallback: str, what: str) -> str:
    value = flag or fallback
    if not value:
        raise ValueError(f"no {what} given (use the flag or set it in the config)")
    return value


def cmd_gen_data(args) -> int:
    spec = load_corpus_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    samples = corpus_io.generate(spec)
    path = corpus_io.save(samples, args.out, spec)
    log = NDJSONLog(_output_dir(args, None) / "log.ndjson")
    log("gen-data", out=str(path), n_records=len(samples), spec_hash=spec.digest())
    print(f"wrote {len(samples)} records to {path} (manifest {corpus_io.manifest_path(path)})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, steps=args.steps))
    out = _output_dir(args, cfg)
    data = corpus_io.load(_pick(args.data, cfg.unlabeled_data, "unlabeled corpus"))
    vocab = Vocab.load()
    log = NDJSONLog(out / "log.ndjson")
    log("pretrain.start", config_hash=cfg.digest(), n_samples=len(data), steps=cfg.pretrain.steps)
    model = EmotionModel.create(cfg.model, vocab, seed=cfg.seed)
    result = pretrain(model, data, cfg, on_step=lambda rec: log("pretrain.step", **rec))
    windows = {t: result.window_means(t) for t in cfg.pretrain.tasks}
    ckpt = Path(args.checkpoint or cfg.checkpoint or out / "pretrain.ckpt")
    save_checkpoint(ckpt, model.params, dataclasses.asdict(cfg.model), cfg.digest(),
                    {"steps": cfg.pretrain.steps, "tasks": list(cfg.pretrain.tasks),
                     "windows": {t: list(w) for t, w in windows.items()}})
    log("pretrain.done", checkpoint=str(ckpt), windows={t: list(w) for t, w in windows.items()})
    for t, (first, last) in windows.items():
        print(f"{t:14s} first-window {first:.4f}  last-window {last:.4f}  ratio {last / first:.3f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _evaluate(args, setting: Setting) -> int:
    cfg = _config(args)
    out = _output_dir(args, cfg)
    vocab = Vocab.load()
    data = corpus_io.load(_pick(args.data, cfg.labeled_data, "labeled corpus"))
    if any(s.label is None for s in data):
        raise ValueError("downstream evaluation needs a labeled corpus")
    pretrained = bert = None
    ckpt = args.checkpoint or cfg.checkpoint
    if setting in (Setting.PRETRAIN_FINETUNE, Setting.PRETRAIN_PROMPT):
        pretrained, _ = load_checkpoint(_pick(ckpt, "", "checkpoint"),
                                        expect_model=dataclasses.asdict(cfg.model))
    elif setting is Setting.BERT_DIRECT and (args.bert_weights or cfg.bert_weights):
        bert, _ = load_checkpoint(args.bert_weights or cfg.bert_weights)
    fraction = cfg.downstream.fraction if args.fraction is None else args.fraction
    seeds = tuple(args.seeds) if args.seeds else cfg.downstream.seeds
    log = NDJSONLog(out / "log.ndjson")
    log("eval.start", setting=setting.value, fraction=fraction, seeds=list(seeds),
        config_hash=cfg.digest())
    results = run_seeds(setting, data, cfg, vocab, pretrained, bert, fraction, seeds)
    uars = [r.mean_uar for r in results]
    was = [r.mean_wa for r in results]
    for seed, r in zip(seeds, results):
        write_records(r.records(cfg.digest(), setting=setting.value, seed=seed, fraction=fraction),
                      out / "metrics.ndjson")
        print(r.report(f"{setting.value}  seed={seed}  fraction={fraction}"))
    summary = {"setting": setting.value, "fraction": fraction, "seeds": list(seeds),
               "mean_wa": sum(was) / len(was), "mean_uar": sum(uars) / len(uars),
               "uar_per_seed": uars, "wa_per_seed": was}
    log("eval.done", **summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_finetune(args) -> int:
    return _evaluate(args, Setting.PRETRAIN_FINETUNE)


def cmd_prompt(args) -> int:
    return _evaluate(args, Setting.PRETRAIN_PROMPT)


def cmd_eval(args) -> int:
    return _evaluate(args, Setting.parse(args.setting) if args.setting else _config(args).setting)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _output_dir(args, cfg)
    vocab = Vocab.load()
    unlabeled = corpus_io.load(_pick(args.unlabeled, cfg.unlabeled_data, "unlabeled corpus"))
    labeled = corpus_io.load(_pick(args.labeled, cfg.labeled_data, "labeled corpus"))
    setting = Setting.parse(args.setting) if args.setting else cfg.setting
    log = NDJSONLog(out / "log.ndjson")
    log("ablate.start", setting=setting.value, config_hash=cfg.digest())
    rows = ablate(unlabeled, labeled, cfg, vocab, setting)
    for r in rows:
        log("ablate.row", name=r.name, tasks=list(r.tasks), span_whole_word=r.span_whole_word,
            uars=r.uars, was=r.was, mean_uar=r.mean_uar, mean_wa=r.mean_wa)
    report = ablation_report(rows)
    (out / "ablation.txt").write_text(report + "\n", "utf-8")
    print(report)
    return 0


def _add_common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="key/value run config file")
    p.add_argument("--out-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    _add_common(p)
    p.add_argument("--data", help="labeled corpus (JSONL)")
    p.add_argument("--checkpoint", help="pre-trained checkpoint")
    p.add_argument("--bert-weights", help="text-only checkpoint for bert+direct")
    p.add_argument("--fraction", type=float, help="fraction of each training fold to use")
    p.add_argument("--seeds", type=int, nargs="+", help="downstream seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmemo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus and its manifest")
    p.add_argument("--spec", required=True, help="corpus spec file with a [corpus] section")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, help="override the corpus seed")
    p.add_argument("--out-dir", help="where log.ndjson goes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="multi-task pre-training")
    _add_common(p)
    p.add_argument("--data", help="unlabeled corpus (JSONL)")
    p.add_argument("--checkpoint", help="checkpoint path to write")
    p.add_argument("--steps", type=int, help="override pretrain.steps")
    p.set_defaults(func=cmd_pretrain)

    for name, func, text in (("finetune", cmd_finetune, "pretrain+finetune evaluation"),
                             ("prompt", cmd_prompt, "pretrain+prompt evaluation")):
        p = sub.add_parser(name, help=text)
        _add_eval_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="cross-validated evaluation of any setting")
    _add_eval_flags(p)
    p.add_argument("--setting", help="direct | bert+direct | pretrain+finetune | pretrain+prompt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pre-training task ablation grid")
    _add_common(p)
    p.add_argument("--unlabeled", help="unlabeled corpus for pre-training")
    p.add_argument("--labeled", help="labeled corpus for evaluation")
    p.add_argument("--setting", help="downstream setting used to score each variant")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except (ValueError, OSError) as exc:
        print(f"mmemo {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"[{args.command} finished in {time.perf_counter() - start:.1f}s]", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
