"""Named parameter store and initialisation for the full model."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Node
from .config import ModelConfig

MODALITIES = ("text", "visual", "acoustic")
TYPE_ID = {"text": 0, "visual": 1, "acoustic": 2}
CLASSIFIER_KEYS = ("classifier.w", "classifier.b")


class ModelParams:
    """Ordered mapping from parameter name to leaf :class:`Node`."""

    def __init__(self, nodes: dict[str, Node] | None = None):
        self.nodes: dict[str, Node] = dict(nodes or {})

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def __setitem__(self, name: str, value) -> None:
        node = value if isinstance(value, Node) else Node.param(value, name=name)
        node.name = name
        node.requires_grad = True
        self.nodes[name] = node

    def __contains__(self, name: str) -> bool:
        return name in self.nodes

    def __iter__(self) -> Iterator[str]:
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def items(self):
        return self.nodes.items()

    def count(self) -> int:
        return sum(n.value.size for n in self.nodes.values())

    def zero_grad(self) -> None:
        for n in self.nodes.values():
            n.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: n.value for k, n in self.nodes.items()}

    def clone(self) -> "ModelParams":
        return ModelParams({k: Node.param(n.value.copy(), name=k) for k, n in self.nodes.items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls({k: Node.param(np.array(v, dtype=np.float64), name=k) for k, v in arrays.items()})

    def without(self, prefixes: tuple[str, ...]) -> "ModelParams":
        return ModelParams({k: n for k, n in self.nodes.items() if not k.startswith(prefixes)})


def _normal(rng, std, *shape):
    return rng.standard_normal(shape) * std


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Pre-training model: three embedders, the shared backbone, and four task heads."""
    h, s = cfg.hidden, cfg.init_std
    p = ModelParams()
    for modality in MODALITIES:
        pre = f"embed.{modality}."
        if modality == "text":
            p[pre + "tokens"] = _normal(rng, cfg.token_init_std, cfg.vocab_size, h)
        else:
            din = cfg.dv if modality == "visual" else cfg.da
            p[pre + "proj.w"] = _normal(rng, s, din, h)
            p[pre + "proj.b"] = np.zeros(h)
        p[pre + "pos"] = _normal(rng, s, cfg.max_len, h)
        p[pre + "type"] = _normal(rng, s, 3, h)
        p[pre + "ln.gain"] = np.ones(h)
        p[pre + "ln.bias"] = np.zeros(h)
    for i in range(cfg.layers):
        pre = f"layer{i}."
        p[pre + "ln1.gain"] = np.ones(h)
        p[pre + "ln1.bias"] = np.zeros(h)
        for w in ("q", "k", "v", "o"):
            p[pre + f"attn.w{w}"] = _normal(rng, s, h, h)
            p[pre + f"attn.b{w}"] = np.zeros(h)
        p[pre + "ln2.gain"] = np.ones(h)
        p[pre + "ln2.bias"] = np.zeros(h)
        p[pre + "ffn.w1"] = _normal(rng, s, h, cfg.ffn)
        p[pre + "ffn.b1"] = np.zeros(cfg.ffn)
        p[pre + "ffn.w2"] = _normal(rng, s, cfg.ffn, h)
        p[pre + "ffn.b2"] = np.zeros(h)
    p["final_ln.gain"] = np.ones(h)
    p["final_ln.bias"] = np.zeros(h)
    # MLM head; its output projection is the (tied) text token table.
    p["head.mlm.dense.w"] = _normal(rng, s, h, h)
    p["head.mlm.dense.b"] = np.zeros(h)
    p["head.mlm.ln.gain"] = np.ones(h)
    p["head.mlm.ln.bias"] = np.zeros(h)
    p["head.mlm.bias"] = np.zeros(cfg.vocab_size)
    p["head.visual_reg.w"] = _normal(rng, s, h, cfg.dv)
    p["head.visual_reg.b"] = np.zeros(cfg.dv)
    p["head.acoustic_reg.w"] = _normal(rng, s, h, cfg.da)
    p["head.acoustic_reg.b"] = np.zeros(cfg.da)
    p["head.visual_cls.w"] = _normal(rng, s, h, cfg.k)
    p["head.visual_cls.b"] = np.zeros(cfg.k)
    return p


def add_classifier(params: ModelParams, cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Attach a freshly initialised [H x n_classes] emotion classifier."""
    params["classifier.w"] = _normal(rng, cfg.init_std, cfg.hidden, cfg.n_classes)
    params["classifier.b"] = np.zeros(cfg.n_classes)
    return params
