"""Training loops: multi-task pre-training, downstream adaptation, the four
experiment settings, and the pre-training task ablation grid."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TASKS, RunConfig, Setting
from .downstream import (
    CVResult, cross_validate, finetune_loss, finetune_predict, prompt_loss, prompt_predict,
)
from .masking import Task, plan_for_task
from .model import EmotionModel
from .optim import AdamW, linear_schedule
from .params import CLASSIFIER_KEYS, ModelParams, add_classifier
from .tokenizer import Vocab

log = logging.getLogger(__name__)

# Parameter prefixes a text-only checkpoint may provide for the BERT+Direct setting.
TEXT_IMPORT_PREFIXES = ("embed.text.", "layer", "final_ln.", "head.mlm.")


def stream(seed: int, *names: int) -> np.random.Generator:
    return np.random.default_rng([seed, *names])


class BatchSampler:
    """Cycles through shuffled epochs of sample indices."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order: list[int] = []

    def next(self) -> list[int]:
        if len(self._order) < self.batch_size:
            self._order = list(self.rng.permutation(self.n))
        out, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return out


@dataclass
class PretrainResult:
    model: EmotionModel
    history: list[dict] = field(default_factory=list)

    def losses(self, task: str) -> np.ndarray:
        return np.array([h["loss"] for h in self.history if h["task"] == task])

    def window_means(self, task: str, frac: float = 0.1) -> tuple[float, float]:
        x = self.losses(task)
        k = max(1, int(math.ceil(frac * len(x))))
        return float(x[:k].mean()), float(x[-k:].mean())


def check_teacher(samples, k: int) -> None:
    for s in samples:
        t = getattr(s, "visual_teacher", None)
        if t is None or t.ndim != 2 or t.shape != (s.visual.shape[0], k):
            raise ValueError(f"sample {s.id} lacks teacher rows of width {k} required by span_mvfc_kl")


def pretrain(model: EmotionModel, corpus, cfg: RunConfig,
             on_step: Callable[[dict], None] | None = None) -> PretrainResult:
    """Round-robin over the enabled tasks, one task per step, AdamW with warmup/decay."""
    pc = cfg.pretrain
    tasks = [Task(t) for t in pc.tasks]
    if Task.SPAN_MVFC_KL in tasks:
        check_teacher(corpus, model.cfg.k)
    opt = AdamW(model.params, pc.lr, (pc.beta1, pc.beta2), pc.eps, pc.weight_decay)
    sampler = BatchSampler(len(corpus), pc.batch_size, stream(cfg.seed, 1))
    mask_rng = stream(cfg.seed, 2)
    result = PretrainResult(model)
    for step in range(pc.steps):
        task = tasks[step % len(tasks)]
        samples = [corpus[i] for i in sampler.next()]
        plans = [plan_for_task(s, task, cfg.masking, mask_rng, model.vocab) for s in samples]
        loss = model.task_loss(task, samples, plans)
        ad.backward(loss)
        lr = linear_schedule(step + 1, pc.steps, pc.lr, pc.warmup_frac)
        opt.step(lr)
        opt.zero_grad()
        rec = {"step": step, "task": task.value, "loss": float(loss.value), "lr": lr}
        result.history.append(rec)
        if on_step is not None:
            on_step(rec)
        if pc.log_every and step % pc.log_every == 0:
            log.info("step %d %s loss=%.4f lr=%.2e", step, task.value, rec["loss"], lr)
    return result


# ---------------------------------------------------------------- downstream

def trainable_names(params: ModelParams, freeze_backbone: bool) -> list[str]:
    if not freeze_backbone:
        return list(params)
    return [k for k in params if k.startswith(("classifier.", "head."))]


def train_downstream(model: EmotionModel, samples, mode: str, cfg: RunConfig, lr: float,
                     seed: int) -> list[float]:
    """Full-model training with either the classifier loss or the prompt loss."""
    dc = cfg.downstream
    loss_fn = prompt_loss if mode == "prompt" else (
        lambda m, batch: finetune_loss(m, batch, dc.pooling))
    opt = AdamW(model.params, lr, weight_decay=dc.weight_decay,
                trainable=trainable_names(model.params, dc.freeze_backbone))
    rng = stream(seed, 3)
    n = len(samples)
    per_epoch = math.ceil(n / dc.batch_size)
    total = dc.epochs * per_epoch
    losses = []
    step = 0
    for _ in range(dc.epochs):
        order = rng.permutation(n)
        for start in range(0, n, dc.batch_size):
            batch = [samples[i] for i in order[start:start + dc.batch_size]]
            loss = loss_fn(model, batch)
            ad.backward(loss)
            step += 1
            opt.step(linear_schedule(step, total + 1, lr, dc.warmup_frac))
            opt.zero_grad()
            losses.append(float(loss.value))
    return losses


def setting_mode(setting: Setting) -> str:
    return "prompt" if setting is Setting.PRETRAIN_PROMPT else "finetune"


def build_model(setting: Setting, cfg: RunConfig, vocab: Vocab, seed: int,
                pretrained: ModelParams | None = None, bert: ModelParams | None = None) -> EmotionModel:
    """Initial model for one experiment setting (before downstream training)."""
    setting = Setting(setting)
    mcfg = cfg.model
    if setting in (Setting.PRETRAIN_FINETUNE, Setting.PRETRAIN_PROMPT):
        if pretrained is None:
            raise ValueError(f"setting {setting.value} needs a pre-trained checkpoint")
        model = EmotionModel(mcfg, vocab, pretrained.without(CLASSIFIER_KEYS).clone())
    elif setting is Setting.BERT_DIRECT:
        model = EmotionModel.create(mcfg, vocab, seed=int(stream(seed, 5).integers(2**31)))
        if bert is not None:
            for name, node in bert.items():
                if name.startswith(TEXT_IMPORT_PREFIXES) and name in model.params \
                        and model.params[name].shape == node.shape:
                    model.params[name] = node.value.copy()
    else:
        model = EmotionModel.create(mcfg, vocab, seed=int(stream(seed, 4).integers(2**31)))
    if setting_mode(setting) == "finetune":
        add_classifier(model.params, mcfg, stream(seed, 6))
    return model


def run_setting(setting: Setting, labeled, cfg: RunConfig, vocab: Vocab,
                pretrained: ModelParams | None = None, bert: ModelParams | None = None,
                fraction: float | None = None, seed: int | None = None) -> CVResult:
    """Cross-validated downstream evaluation of one experiment setting for one seed."""
    setting = Setting(setting)
    fraction = cfg.downstream.fraction if fraction is None else fraction
    seed = cfg.seed if seed is None else seed
    lr = cfg.downstream.lr_for(fraction)
    mode = setting_mode(setting)

    def train_fn(train, fold):
        model = build_model(setting, cfg, vocab, seed * 1000 + fold, pretrained, bert)
        train_downstream(model, train, mode, cfg, lr, seed * 1000 + fold)
        return model

    def predict_fn(model, test):
        out = []
        for start in range(0, len(test), 64):
            chunk = test[start:start + 64]
            out += prompt_predict(model, chunk) if mode == "prompt" else finetune_predict(
                model, chunk, cfg.downstream.pooling)
        return out

    return cross_validate(labeled, train_fn, predict_fn, cfg.downstream.folds, seed=seed,
                          fraction=fraction)


def run_seeds(setting, labeled, cfg, vocab, pretrained=None, bert=None, fraction=None,
              seeds=None) -> list[CVResult]:
    seeds = cfg.downstream.seeds if seeds is None else seeds
    return [run_setting(setting, labeled, cfg, vocab, pretrained, bert, fraction, s) for s in seeds]


# ---------------------------------------------------------------- ablation grid

ABLATIONS = {
    "full": {},
    "w/o span-whole_word": {"masking": {"span_whole_word": False}},
    "w/o visual tasks": {"pretrain": {"tasks": ("wwmlm", "span_mafr")}},
    "w/o acoustic task": {"pretrain": {"tasks": ("wwmlm", "span_mvfr", "span_mvfc_kl")}},
}


def ablation_config(cfg: RunConfig, name: str) -> RunConfig:
    out = cfg
    for section, changes in ABLATIONS[name].items():
        out = dataclasses.replace(out, **{section: dataclasses.replace(getattr(out, section), **changes)})
    return out


@dataclass
class AblationRow:
    name: str
    tasks: tuple[str, ...]
    span_whole_word: bool
    uars: list[float]
    was: list[float]

    @property
    def mean_uar(self) -> float:
        return float(np.mean(self.uars))

    @property
    def mean_wa(self) -> float:
        return float(np.mean(self.was))


def ablate(unlabeled, labeled, cfg: RunConfig, vocab: Vocab,
           setting: Setting = Setting.PRETRAIN_PROMPT,
           pretrained: dict[str, ModelParams] | None = None) -> list[AblationRow]:
    """Pre-train one model per ablation variant and evaluate each over all seeds.

    ``pretrained`` may supply parameters for variants already trained under
    ``ablation_config(cfg, name)``; those variants skip pre-training.
    """
    pretrained = pretrained or {}
    rows = []
    for name in ABLATIONS:
        vcfg = ablation_config(cfg, name)
        params = pretrained.get(name)
        if params is None:
            model = EmotionModel.create(vcfg.model, vocab, seed=vcfg.seed)
            pretrain(model, unlabeled, vcfg)
            params = model.params
        results = run_seeds(setting, labeled, vcfg, vocab, pretrained=params)
        rows.append(AblationRow(name, tuple(vcfg.pretrain.tasks), vcfg.masking.span_whole_word,
                                [r.mean_uar for r in results], [r.mean_wa for r in results]))
    return rows


def ablation_report(rows: list[AblationRow]) -> str:
    lines = [f"{'variant':24s} {'WA':>8s} {'UAR':>8s}  per-seed UAR"]
    for r in rows:
        per = " ".join(f"{u:.4f}" for u in r.uars)
        lines.append(f"{r.name:24s} {r.mean_wa:8.4f} {r.mean_uar:8.4f}  {per}")
    return "\n".join(lines)


__all__ = ["TASKS", "pretrain", "train_downstream", "build_model", "run_setting", "run_seeds",
           "ablate", "ablation_report", "ABLATIONS", "PretrainResult"]
