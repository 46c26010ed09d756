"""Masking planners: whole-word text masking, span frame masking, and the
conditional strategy that touches exactly one modality per example."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import MaskingConfig
from .tokenizer import TokenSequence, Vocab


class Task(str, Enum):
    WWMLM = "wwmlm"
    SPAN_MVFR = "span_mvfr"
    SPAN_MVFC_KL = "span_mvfc_kl"
    SPAN_MAFR = "span_mafr"

    @property
    def modality(self) -> str:
        return {"wwmlm": "text", "span_mvfr": "visual", "span_mvfc_kl": "visual",
                "span_mafr": "acoustic"}[self.value]


class Action(str, Enum):
    MASK = "mask"
    RANDOM = "random"
    KEEP = "keep"


@dataclass(frozen=True, eq=False)
class MaskPlan:
    task: Task
    text_actions: tuple[tuple[int, Action, int], ...] = ()
    frame_positions: tuple[int, ...] = ()
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def modality(self) -> str:
        return self.task.modality

    @property
    def text_positions(self) -> tuple[int, ...]:
        return tuple(p for p, _, _ in self.text_actions)

    def n_masked(self) -> int:
        return len(self.text_actions) if self.modality == "text" else len(self.frame_positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (
            self.task == other.task
            and self.text_actions == other.text_actions
            and self.frame_positions == other.frame_positions
            and np.asarray(self.targets).shape == np.asarray(other.targets).shape
            and np.array_equal(self.targets, other.targets)
        )


def _draw_action(cfg: MaskingConfig, rng) -> Action:
    u = rng.random()
    if u < cfg.mask_prob:
        return Action.MASK
    if u < cfg.mask_prob + cfg.random_prob:
        return Action.RANDOM
    return Action.KEEP


def _word_actions(groups, cfg: MaskingConfig, vocab: Vocab, rng) -> list[tuple[int, Action, int]]:
    ordinary = vocab.ordinary_ids()
    actions = []
    for positions in groups:
        action = _draw_action(cfg, rng)
        for pos in positions:
            repl = vocab.mask_id
            if action is Action.RANDOM:
                repl = ordinary[int(rng.integers(len(ordinary)))]
            actions.append((pos, action, repl))
    return actions


def _word_groups(seq: TokenSequence, vocab: Vocab, whole_word: bool) -> list[list[int]]:
    specials = vocab.special_ids()
    if whole_word:
        spans = seq.word_spans()
        return [[p for p in spans[w] if seq.ids[p] not in specials] for w in sorted(spans)
                if any(seq.ids[p] not in specials for p in spans[w])]
    return [[p] for p, (i, w) in enumerate(zip(seq.ids, seq.word_ids))
            if w is not None and i not in specials]


def _text_plan(seq, actions, task=Task.WWMLM) -> MaskPlan:
    actions = sorted(actions)
    targets = np.array([seq.ids[p] for p, _, _ in actions], dtype=np.int64)
    return MaskPlan(task, text_actions=tuple(actions), targets=targets)


def plan_whole_word(seq: TokenSequence, rate: float, rng, vocab: Vocab,
                    cfg: MaskingConfig | None = None) -> MaskPlan:
    """Select words i.i.d. at ``rate``; every sub-token of a selected word gets the same action."""
    cfg = cfg or MaskingConfig()
    groups = _word_groups(seq, vocab, cfg.span_whole_word)
    chosen = [g for g in groups if rng.random() < rate]
    return _text_plan(seq, _word_actions(chosen, cfg, vocab, rng))


def span_positions(starts, span_len: int, length: int) -> tuple[int, ...]:
    """Union of ``[start, min(start + span_len, length))`` over ``starts``."""
    covered: set[int] = set()
    for s in starts:
        covered.update(range(int(s), min(int(s) + span_len, length)))
    return tuple(sorted(covered))


def span_start_prob(rate: float, span_len: int) -> float:
    """Start probability giving an expected masked fraction of ``rate``.

    Spans are separated by at least one unmasked frame, so each start
    consumes ``span_len + 1`` frames and the masked fraction is
    ``p*L / (1 + p*L)``.
    """
    if rate >= 1.0:
        return 1.0
    return min(1.0, rate / (span_len * (1.0 - rate)))


def draw_span_starts(length: int, span_len: int, rate: float, rng) -> list[int]:
    p = span_start_prob(rate, span_len)
    starts = []
    i = 0
    while i < length:
        if rng.random() < p:
            starts.append(i)
            i += span_len + 1
        else:
            i += 1
    return starts


def plan_span(length: int, span_len: int, rate: float, rng, task: Task = Task.SPAN_MAFR) -> MaskPlan:
    """Mask runs of ``span_len`` consecutive frames (truncated at the sequence end)."""
    if length < 1 or span_len < 1:
        raise ValueError("plan_span needs length >= 1 and span_len >= 1")
    starts = draw_span_starts(length, span_len, rate, rng)
    return MaskPlan(task, frame_positions=span_positions(starts, span_len, length))


def _with_frame_targets(plan: MaskPlan, sample) -> MaskPlan:
    idx = np.asarray(plan.frame_positions, dtype=np.int64)
    if plan.task is Task.SPAN_MAFR:
        targets = sample.acoustic[idx]
    elif plan.task is Task.SPAN_MVFR:
        targets = sample.visual[idx]
    else:
        targets = sample.visual_teacher[idx]
    return MaskPlan(plan.task, frame_positions=plan.frame_positions, targets=targets.copy())


def plan_for_task(sample, task: Task, cfg: MaskingConfig, rng, vocab: Vocab) -> MaskPlan:
    """Plan masking for one sample under one task; the other two modalities stay intact.

    If the random draw masks nothing, one word (text) or one span (frames)
    is forced so every example contributes to its loss.
    """
    task = Task(task)
    if task is Task.WWMLM:
        plan = plan_whole_word(sample.text, cfg.text_rate, rng, vocab, cfg)
        if plan.n_masked() == 0:
            groups = _word_groups(sample.text, vocab, cfg.span_whole_word)
            if groups:
                g = groups[int(rng.integers(len(groups)))]
                plan = _text_plan(sample.text, _word_actions([g], cfg, vocab, rng))
        return plan
    frames = sample.acoustic if task is Task.SPAN_MAFR else sample.visual
    length = frames.shape[0]
    span_len = cfg.span_len if cfg.span_whole_word else 1
    plan = plan_span(length, span_len, cfg.frame_rate, rng, task)
    if plan.n_masked() == 0 and length > 0:
        start = int(rng.integers(max(length - span_len, 0) + 1))
        plan = MaskPlan(task, frame_positions=span_positions([start], span_len, length))
    return _with_frame_targets(plan, sample)


def empty_plan(task: Task = Task.WWMLM) -> MaskPlan:
    return MaskPlan(Task(task), targets=np.zeros(0, dtype=np.int64))
