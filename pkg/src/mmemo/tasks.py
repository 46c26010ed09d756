"""Pre-training heads and their losses at masked positions."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .backbone import PackedBatch
from .errors import TaskMismatchError
from .masking import Task
from .params import ModelParams


def gather_positions(encoded: Node, flat_index) -> Node:
    bsz, length, h = encoded.shape
    return ad.take_rows(ad.reshape(encoded, (bsz * length, h)), flat_index)


def mlm_logits(params: ModelParams, h: Node, ln_eps: float = 1e-12) -> Node:
    """Transform, normalise, then score against the tied token table."""
    x = ad.gelu(ad.linear(h, params["head.mlm.dense.w"], params["head.mlm.dense.b"]))
    x = ad.layer_norm(x, params["head.mlm.ln.gain"], params["head.mlm.ln.bias"], ln_eps)
    table_t = ad.transpose(params["embed.text.tokens"])
    return ad.add(ad.matmul(x, table_t), params["head.mlm.bias"])


def _check(batch: PackedBatch, task: Task) -> None:
    for plan in batch.plans:
        if plan is None or plan.task is not task:
            got = None if plan is None else plan.task.value
            raise TaskMismatchError(f"{task.value} loss received a plan for {got}")


def masked_index(batch: PackedBatch, task: Task) -> tuple[np.ndarray, list[np.ndarray]]:
    """Flat ``b * L + position`` indices of masked slots plus per-sample targets."""
    modality = task.modality
    flat, targets = [], []
    for b, plan in enumerate(batch.plans):
        start = batch.spans[b][modality][0]
        local = plan.text_positions if modality == "text" else plan.frame_positions
        flat.extend(b * batch.length + start + p for p in local)
        if len(local):
            targets.append(np.asarray(plan.targets))
    return np.asarray(flat, dtype=np.int64), targets


def wwmlm_loss(encoded: Node, batch: PackedBatch, params: ModelParams, ln_eps: float = 1e-12) -> Node:
    _check(batch, Task.WWMLM)
    idx, targets = masked_index(batch, Task.WWMLM)
    logits = mlm_logits(params, gather_positions(encoded, idx), ln_eps)
    return ad.cross_entropy(logits, np.concatenate(targets))


def _frame_reg_loss(encoded, batch, params, task: Task, head: str) -> Node:
    _check(batch, task)
    idx, targets = masked_index(batch, task)
    h = gather_positions(encoded, idx)
    pred = ad.linear(h, params[f"head.{head}.w"], params[f"head.{head}.b"])
    return ad.l2_loss(pred, np.concatenate(targets, axis=0))


def span_mafr_loss(encoded: Node, batch: PackedBatch, params: ModelParams) -> Node:
    return _frame_reg_loss(encoded, batch, params, Task.SPAN_MAFR, "acoustic_reg")


def span_mvfr_loss(encoded: Node, batch: PackedBatch, params: ModelParams) -> Node:
    return _frame_reg_loss(encoded, batch, params, Task.SPAN_MVFR, "visual_reg")


def visual_cls_logits(params: ModelParams, h: Node) -> Node:
    return ad.linear(h, params["head.visual_cls.w"], params["head.visual_cls.b"])


def span_mvfc_kl_loss(encoded: Node, batch: PackedBatch, params: ModelParams) -> Node:
    _check(batch, Task.SPAN_MVFC_KL)
    idx, targets = masked_index(batch, Task.SPAN_MVFC_KL)
    logits = visual_cls_logits(params, gather_positions(encoded, idx))
    return ad.kl_div(logits, np.concatenate(targets, axis=0))


LOSSES = {
    Task.WWMLM: wwmlm_loss,
    Task.SPAN_MVFR: span_mvfr_loss,
    Task.SPAN_MVFC_KL: span_mvfc_kl_loss,
    Task.SPAN_MAFR: span_mafr_loss,
}


def task_loss(task: Task, encoded: Node, batch: PackedBatch, params: ModelParams) -> Node:
    return LOSSES[Task(task)](encoded, batch, params)
