"""Modality embedders: projection + position + type embedding, then layer norm."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import LengthError
from .params import TYPE_ID, ModelParams


def mask_frame_input(raw: np.ndarray, positions) -> np.ndarray:
    """Return a copy of ``raw`` with the rows at ``positions`` set to zero."""
    raw = np.asarray(raw, dtype=np.float64)
    positions = np.asarray(sorted(set(int(p) for p in positions)), dtype=np.int64)
    if positions.size and (positions[0] < 0 or positions[-1] >= raw.shape[0]):
        raise IndexError(f"frame position out of range [0, {raw.shape[0]})")
    out = raw.copy()
    out[positions] = 0.0
    return out


def embed(params: ModelParams, modality: str, raw, eps: float = 1e-12) -> Node:
    """Embed one modality.

    ``raw`` is token ids ``[..., T]`` for text or frame features ``[..., T, D]``
    otherwise. Returns a node of shape ``[..., T, H]``.
    """
    pre = f"embed.{modality}."
    pos_table = params[pre + "pos"]
    lmax, h = pos_table.shape
    if modality == "text":
        ids = np.asarray(raw, dtype=np.int64)
        t = ids.shape[-1]
        x = ad.reshape(ad.embedding(params[pre + "tokens"], ids.ravel()), ids.shape + (h,))
    else:
        frames = np.asarray(raw, dtype=np.float64)
        t = frames.shape[-2]
        x = ad.linear(ad.constant(frames), params[pre + "proj.w"], params[pre + "proj.b"])
    if t > lmax:
        raise LengthError(f"{modality} length {t} exceeds maximum {lmax}")
    pos = ad.take_rows(pos_table, np.arange(t))
    typ = ad.take_rows(params[pre + "type"], [TYPE_ID[modality]])
    x = ad.add(ad.add(x, pos), typ)
    return ad.layer_norm(x, params[pre + "ln.gain"], params[pre + "ln.bias"], eps)
