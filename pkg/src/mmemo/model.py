"""Model facade tying configuration, vocabulary and parameters together."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node
from .backbone import PackedBatch, encode, pack
from .config import ModelConfig
from .masking import MaskPlan, Task
from .params import ModelParams, init_params
from .tasks import task_loss
from .tokenizer import Vocab


@dataclass
class EmotionModel:
    cfg: ModelConfig
    vocab: Vocab
    params: ModelParams

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocab, seed: int = 0) -> "EmotionModel":
        if cfg.vocab_size != len(vocab):
            raise ValueError(f"model vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        return cls(cfg, vocab, init_params(cfg, np.random.default_rng(seed)))

    def pack(self, samples, plans=None, prompt: bool = False, extra_pad: int = 0,
             embed: bool = True) -> PackedBatch:
        return pack(samples, plans, vocab=self.vocab, params=self.params if embed else None,
                    max_len=self.cfg.max_len, prompt=prompt, extra_pad=extra_pad,
                    ln_eps=self.cfg.ln_eps)

    def encode(self, batch: PackedBatch, return_attention: bool = False):
        return encode(self.params, batch, self.cfg.layers, self.cfg.heads, self.cfg.ln_eps,
                      return_attention=return_attention)

    def task_loss(self, task: Task, samples, plans: list[MaskPlan]) -> Node:
        batch = self.pack(samples, plans)
        return task_loss(task, self.encode(batch), batch, self.params)
