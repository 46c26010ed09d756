"""Packing of multimodal samples and the shared cross-modality transformer.

Packed layout per sample: ``[CLS] text [SEP] visual acoustic``, right-padded
to the longest sample in the batch. Padding never receives attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .embedders import embed, mask_frame_input
from .errors import LengthError
from .masking import Action, MaskPlan
from .params import ModelParams
from .tokenizer import TokenSequence, Vocab, build_prompt_suffix

_NEG = -1e9


@dataclass
class PackedBatch:
    text_ids: np.ndarray  # [B, Lt] including CLS and SEP
    visual: np.ndarray  # [B, Tv, Dv]
    acoustic: np.ndarray  # [B, Ta, Da]
    gather: np.ndarray  # [B, L] row index into the flattened modality embeddings
    attention_mask: np.ndarray  # [B, L]
    spans: list[dict[str, tuple[int, int]]]
    sample_ids: list[str]
    plans: list[MaskPlan | None] = field(default_factory=list)
    prompt_positions: np.ndarray | None = None
    embeddings: Node | None = None

    @property
    def batch_size(self) -> int:
        return self.gather.shape[0]

    @property
    def length(self) -> int:
        return self.gather.shape[1]

    def unpack(self, b: int) -> dict[str, np.ndarray]:
        """Per-modality raw inputs of sample ``b`` (text without CLS/SEP)."""
        sp = self.spans[b]
        nt = sp["text"][1] - sp["text"][0]
        nv = sp["visual"][1] - sp["visual"][0]
        na = sp["acoustic"][1] - sp["acoustic"][0]
        return {
            "text": self.text_ids[b, 1:1 + nt].copy(),
            "visual": self.visual[b, :nv].copy(),
            "acoustic": self.acoustic[b, :na].copy(),
        }


def _apply_text_plan(ids: list[int], plan: MaskPlan | None) -> list[int]:
    if plan is None or plan.modality != "text":
        return ids
    ids = list(ids)
    for pos, action, repl in plan.text_actions:
        if action is not Action.KEEP:
            ids[pos] = repl
    return ids


def pack(
    samples,
    plans=None,
    *,
    vocab: Vocab,
    params: ModelParams | None = None,
    max_len: int = 128,
    prompt: bool = False,
    extra_pad: int = 0,
    ln_eps: float = 1e-12,
) -> PackedBatch:
    """Apply mask plans, lay samples out as ``[CLS] text [SEP] visual acoustic`` and pad.

    With ``prompt=True`` the suffix ``i am [MASK] .`` is appended to each text
    before SEP and ``prompt_positions`` records the packed mask slot.
    If ``params`` is given the packed embeddings are computed as well.
    """
    plans = list(plans) if plans is not None else [None] * len(samples)
    if len(plans) != len(samples):
        raise ValueError("need one plan (or None) per sample")
    suffix, suffix_mask = build_prompt_suffix(vocab) if prompt else (TokenSequence(), 0)
    dv = samples[0].visual.shape[1]
    da = samples[0].acoustic.shape[1]

    texts, visuals, acoustics, prompt_pos = [], [], [], []
    for s, plan in zip(samples, plans):
        ids = _apply_text_plan(list(s.text.ids), plan) + list(suffix.ids)
        if prompt:
            prompt_pos.append(1 + len(s.text.ids) + suffix_mask)
        vis, ac = s.visual, s.acoustic
        if plan is not None and plan.modality == "visual":
            vis = mask_frame_input(vis, plan.frame_positions)
        elif plan is not None and plan.modality == "acoustic":
            ac = mask_frame_input(ac, plan.frame_positions)
        if len(ids) + 2 > max_len or vis.shape[0] > max_len or ac.shape[0] > max_len:
            raise LengthError(f"sample {s.id} exceeds the per-modality maximum length {max_len}")
        texts.append([vocab.cls_id] + ids + [vocab.sep_id])
        visuals.append(vis)
        acoustics.append(ac)

    bsz = len(samples)
    lt = max(len(t) for t in texts)
    tv = max(v.shape[0] for v in visuals)
    ta = max(a.shape[0] for a in acoustics)
    text_ids = np.full((bsz, lt), vocab.pad_id, dtype=np.int64)
    visual = np.zeros((bsz, tv, dv))
    acoustic = np.zeros((bsz, ta, da))
    lengths = []
    for b in range(bsz):
        text_ids[b, :len(texts[b])] = texts[b]
        visual[b, :visuals[b].shape[0]] = visuals[b]
        acoustic[b, :acoustics[b].shape[0]] = acoustics[b]
        lengths.append(len(texts[b]) + visuals[b].shape[0] + acoustics[b].shape[0])

    length = max(lengths) + extra_pad
    zero_row = bsz * (lt + tv + ta)
    gather = np.full((bsz, length), zero_row, dtype=np.int64)
    mask = np.zeros((bsz, length))
    spans = []
    for b in range(bsz):
        nt, nv, na = len(texts[b]), visuals[b].shape[0], acoustics[b].shape[0]
        gather[b, :nt] = b * lt + np.arange(nt)
        gather[b, nt:nt + nv] = bsz * lt + b * tv + np.arange(nv)
        gather[b, nt + nv:nt + nv + na] = bsz * (lt + tv) + b * ta + np.arange(na)
        mask[b, :nt + nv + na] = 1.0
        spans.append({
            "text": (1, nt - 1),
            "visual": (nt, nt + nv),
            "acoustic": (nt + nv, nt + nv + na),
        })

    batch = PackedBatch(
        text_ids=text_ids, visual=visual, acoustic=acoustic, gather=gather,
        attention_mask=mask, spans=spans, sample_ids=[s.id for s in samples], plans=plans,
        prompt_positions=np.array(prompt_pos, dtype=np.int64) if prompt else None,
    )
    if params is not None:
        batch.embeddings = embed_batch(params, batch, ln_eps)
    return batch


def embed_batch(params: ModelParams, batch: PackedBatch, ln_eps: float = 1e-12) -> Node:
    bsz, lt = batch.text_ids.shape
    h = params["embed.text.pos"].shape[1]
    pieces = [ad.reshape(embed(params, "text", batch.text_ids, ln_eps), (bsz * lt, h))]
    for name, raw in (("visual", batch.visual), ("acoustic", batch.acoustic)):
        if raw.shape[1] > 0:
            e = embed(params, name, raw, ln_eps)
            pieces.append(ad.reshape(e, (bsz * raw.shape[1], h)))
    pieces.append(ad.constant(np.zeros((1, h))))
    flat = ad.concat(pieces, axis=0)
    return ad.reshape(ad.take_rows(flat, batch.gather.ravel()), (bsz, batch.length, h))


def _split_heads(x: Node, bsz: int, length: int, heads: int) -> Node:
    dh = x.shape[-1] // heads
    return ad.transpose(ad.reshape(x, (bsz, length, heads, dh)), (0, 2, 1, 3))


def encode(params: ModelParams, batch: PackedBatch, n_layers: int, heads: int,
           ln_eps: float = 1e-12, return_attention: bool = False):
    """Pre-norm transformer encoder over the packed embeddings."""
    if np.any(batch.attention_mask.sum(axis=1) == 0):
        raise ValueError("encode: a sample has no unmasked positions")
    if batch.embeddings is None:
        batch.embeddings = embed_batch(params, batch, ln_eps)
    x = batch.embeddings
    bsz, length, h = x.shape
    dh = h // heads
    bias = ((1.0 - batch.attention_mask) * _NEG)[:, None, None, :]
    attn_maps = []
    for i in range(n_layers):
        pre = f"layer{i}."
        y = ad.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"], ln_eps)
        q = _split_heads(ad.linear(y, params[pre + "attn.wq"], params[pre + "attn.bq"]), bsz, length, heads)
        k = _split_heads(ad.linear(y, params[pre + "attn.wk"], params[pre + "attn.bk"]), bsz, length, heads)
        v = _split_heads(ad.linear(y, params[pre + "attn.wv"], params[pre + "attn.bv"]), bsz, length, heads)
        scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), bias)
        probs = ad.softmax(scores, axis=-1)
        if return_attention:
            attn_maps.append(probs.value)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (bsz, length, h))
        x = ad.add(x, ad.linear(ctx, params[pre + "attn.wo"], params[pre + "attn.bo"]))
        y = ad.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"], ln_eps)
        f = ad.gelu(ad.linear(y, params[pre + "ffn.w1"], params[pre + "ffn.b1"]))
        x = ad.add(x, ad.linear(f, params[pre + "ffn.w2"], params[pre + "ffn.b2"]))
    out = ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], ln_eps)
    return (out, attn_maps) if return_attention else out
