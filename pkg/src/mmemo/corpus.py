"""Synthetic three-modality emotion corpus: generation, pooling, serialization.

Every sample carries a latent emotion class. The class leaves a mean offset
in the visual and acoustic frames, biases word choice in the text, and sets
the teacher distribution attached to each visual frame. Signal strength is
controlled per modality so that tasks range from pure noise to trivially
separable.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusFormatError
from .labels import IEMOCAP_COUNTS, MSP_IMPROV_COUNTS, EmotionClass
from .tokenizer import TokenSequence, Vocab, tokenize

# Teacher label space follows the eight FER+ expression classes.
TEACHER_CLASSES = (
    "neutral", "happiness", "surprise", "sadness", "anger", "disgust", "fear", "contempt",
)
TEACHER_INDEX = {
    EmotionClass.HAPPY: 1,
    EmotionClass.ANGER: 4,
    EmotionClass.SADNESS: 3,
    EmotionClass.NEUTRAL: 0,
}

# Short class-typical phrases; sentences are strung together from these so a
# masked word is predictable from its phrase context plus the latent class.
CLASS_PHRASES = {
    EmotionClass.HAPPY: [
        "i love this so much", "what a great day", "this is so much fun", "we had a wonderful time",
    ],
    EmotionClass.ANGER: [
        "i hate this so much", "that is so stupid", "shut up right now", "this is really ridiculous",
    ],
    EmotionClass.SADNESS: [
        "i miss you so much", "i feel so alone", "it is all hopeless", "he is gone now",
    ],
    EmotionClass.NEUTRAL: [
        "the meeting is tomorrow", "i have a report", "the train is at one", "see you at the office",
    ],
}
# Multi-word on purpose: a masked word is recoverable from the rest of its phrase.
FILLER_PHRASES = ["you know what", "i think that"]


@dataclass(eq=False)
class MultimodalSample:
    id: str
    text: TokenSequence
    visual: np.ndarray  # [Tv, Dv]
    visual_teacher: np.ndarray  # [Tv, K]
    acoustic: np.ndarray  # [Ta, Da]
    label: EmotionClass | None = None
    speaker: int = 0

    def validate(self) -> None:
        if self.visual.ndim != 2 or self.visual.shape[0] < 1:
            raise ValueError(f"{self.id}: visual must be [Tv>=1, Dv]")
        if self.acoustic.ndim != 2 or self.acoustic.shape[0] < 1:
            raise ValueError(f"{self.id}: acoustic must be [Ta>=1, Da]")
        if self.visual_teacher.shape[0] != self.visual.shape[0]:
            raise ValueError(f"{self.id}: teacher rows must match visual frames")
        if np.any(np.abs(self.visual_teacher.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError(f"{self.id}: teacher rows must sum to 1")
        for arr in (self.visual, self.visual_teacher, self.acoustic):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{self.id}: non-finite feature values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.text == other.text
            and self.label == other.label
            and self.speaker == other.speaker
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.visual, other.visual),
                    (self.visual_teacher, other.visual_teacher),
                    (self.acoustic, other.acoustic),
                )
            )
        )


@dataclass
class CorpusSpec:
    counts: dict = field(default_factory=lambda: {c: 64 for c in EmotionClass})
    labeled: bool = True
    dv: int = 32
    da: int = 32
    k: int = 8
    text_phrases: tuple[int, int] = (1, 3)
    visual_frames: tuple[int, int] = (6, 14)
    acoustic_raw_frames: tuple[int, int] = (15, 42)
    pool_window: int = 3
    snr_text: float = 1.0
    snr_visual: float = 1.0
    snr_acoustic: float = 1.0
    self_report_prob: float = 0.5
    frame_smoothness: float = 0.8
    teacher_softening: float = 0.9
    n_speakers: int = 4
    speaker_shift: float = 0.3
    seed: int = 0
    world_seed: int = 1234
    id_prefix: str = "utt"

    def __post_init__(self):
        self.counts = {EmotionClass(c) if not isinstance(c, str) else EmotionClass.parse(c): int(n)
                       for c, n in self.counts.items()}
        self.text_phrases = tuple(self.text_phrases)
        self.visual_frames = tuple(self.visual_frames)
        self.acoustic_raw_frames = tuple(self.acoustic_raw_frames)
        self.check()

    def check(self) -> None:
        if any(n < 0 for n in self.counts.values()):
            raise ConfigError("class counts must be >= 0")
        if min(self.snr_text, self.snr_visual, self.snr_acoustic) < 0:
            raise ConfigError("SNR must be >= 0")
        if self.k < 4:
            raise ConfigError("teacher class count K must be >= 4")
        if self.n_speakers < 1:
            raise ConfigError("need at least one speaker")
        for lo, hi in (self.text_phrases, self.visual_frames, self.acoustic_raw_frames):
            if lo < 1 or hi < lo:
                raise ConfigError(f"invalid length range ({lo}, {hi})")

    @classmethod
    def from_proportions(cls, total: int, reference: dict | None = None, **kw) -> "CorpusSpec":
        """Scale reference class counts to ``total`` by largest remainder."""
        reference = reference or IEMOCAP_COUNTS
        ref_total = sum(reference.values())
        raw = {c: total * n / ref_total for c, n in reference.items()}
        counts = {c: math.floor(v) for c, v in raw.items()}
        leftover = total - sum(counts.values())
        for c in sorted(raw, key=lambda c: raw[c] - counts[c], reverse=True)[:leftover]:
            counts[c] += 1
        return cls(counts=counts, **kw)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {c.name: n for c, n in self.counts.items()}
        d["text_phrases"] = list(self.text_phrases)
        d["visual_frames"] = list(self.visual_frames)
        d["acoustic_raw_frames"] = list(self.acoustic_raw_frames)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


REFERENCE_COUNTS = {"iemocap": IEMOCAP_COUNTS, "msp_improv": MSP_IMPROV_COUNTS}


def toy_specs(seed: int = 0, n_unlabeled: int = 512, n_labeled: int = 256,
              snr: float = 3.0) -> tuple[CorpusSpec, CorpusSpec]:
    """High-SNR unlabeled and labeled specs drawn from the same emotion world."""
    common = dict(snr_text=snr, snr_visual=snr, snr_acoustic=snr)
    unlabeled = CorpusSpec.from_proportions(n_unlabeled, labeled=False, seed=2 * seed + 1,
                                            id_prefix="pre", **common)
    labeled = CorpusSpec.from_proportions(n_labeled, seed=2 * seed + 2, id_prefix="lab", **common)
    return unlabeled, labeled

def pool_frames(frames: np.ndarray, window: int = 3) -> np.ndarray:
    """Non-overlapping mean pooling; a trailing partial window is averaged over its length."""
    frames = np.asarray(frames, dtype=np.float64)
    t = frames.shape[0]
    if t < 1:
        raise ValueError("pool_frames needs at least one frame")
    n_out = -(-t // window)
    out = np.empty((n_out,) + frames.shape[1:], dtype=np.float64)
    for i in range(n_out):
        out[i] = frames[i * window:(i + 1) * window].mean(axis=0)
    return out


def _world(spec: CorpusSpec):
    rng = np.random.default_rng(spec.world_seed)
    visual_means = rng.standard_normal((len(EmotionClass), spec.dv))
    acoustic_means = rng.standard_normal((len(EmotionClass), spec.da))
    return visual_means, acoustic_means


def _smooth_noise(rng, t: int, d: int, rho: float) -> np.ndarray:
    eps = rng.standard_normal((t, d))
    out = np.empty_like(eps)
    out[0] = eps[0]
    scale = math.sqrt(1.0 - rho * rho)
    for i in range(1, t):
        out[i] = rho * out[i - 1] + scale * eps[i]
    return out


def _feature_scale(snr: float, shift: float) -> float:
    # class mean, speaker offset and noise are independent with per-dim
    # variances snr^2, shift^2 and 1; dividing keeps features at unit variance
    return math.sqrt(snr * snr + shift * shift + 1.0)


def _teacher_row(label: EmotionClass, spec: CorpusSpec) -> np.ndarray:
    if spec.snr_visual == 0:
        return np.full(spec.k, 1.0 / spec.k)
    row = np.full(spec.k, (1.0 - spec.teacher_softening) / (spec.k - 1))
    row[TEACHER_INDEX[label]] = spec.teacher_softening
    return row


def _make_text(rng, label: EmotionClass, spec: CorpusSpec, vocab: Vocab) -> TokenSequence:
    n = int(rng.integers(spec.text_phrases[0], spec.text_phrases[1] + 1))
    p_class = spec.snr_text / (1.0 + spec.snr_text)
    phrases = []
    for _ in range(n):
        pool = CLASS_PHRASES[label] if rng.random() < p_class else FILLER_PHRASES
        phrases.append(pool[int(rng.integers(len(pool)))])
    if rng.random() < spec.self_report_prob * p_class:
        phrases.append(f"i am {vocab.verbalizer_words[label]}")
    return tokenize(" , ".join(phrases) + " .", vocab)


def generate(spec: CorpusSpec, vocab: Vocab | None = None) -> list[MultimodalSample]:
    vocab = vocab or Vocab.load()
    visual_means, acoustic_means = _world(spec)
    base = np.random.default_rng(spec.seed)
    labels = [c for c in EmotionClass for _ in range(spec.counts.get(c, 0))]
    order = base.permutation(len(labels))
    speaker_offsets_v = spec.speaker_shift * base.standard_normal((spec.n_speakers, spec.dv))
    speaker_offsets_a = spec.speaker_shift * base.standard_normal((spec.n_speakers, spec.da))

    samples = []
    for i, j in enumerate(order):
        label = labels[j]
        rng = np.random.default_rng([spec.seed, i])
        speaker = i % spec.n_speakers
        tv = int(rng.integers(spec.visual_frames[0], spec.visual_frames[1] + 1))
        ta_raw = int(rng.integers(spec.acoustic_raw_frames[0], spec.acoustic_raw_frames[1] + 1))
        visual = (
            spec.snr_visual * visual_means[label]
            + speaker_offsets_v[speaker]
            + _smooth_noise(rng, tv, spec.dv, spec.frame_smoothness)
        ) / _feature_scale(spec.snr_visual, spec.speaker_shift)
        acoustic_raw = (
            spec.snr_acoustic * acoustic_means[label]
            + speaker_offsets_a[speaker]
            + _smooth_noise(rng, ta_raw, spec.da, spec.frame_smoothness)
        ) / _feature_scale(spec.snr_acoustic, spec.speaker_shift)
        sample = MultimodalSample(
            id=f"{spec.id_prefix}{i:06d}",
            text=_make_text(rng, label, spec, vocab),
            visual=visual,
            visual_teacher=np.tile(_teacher_row(label, spec), (tv, 1)),
            acoustic=pool_frames(acoustic_raw, spec.pool_window),
            label=label if spec.labeled else None,
            speaker=speaker,
        )
        sample.validate()
        samples.append(sample)
    return samples


# ---------------------------------------------------------------- serialization

def _encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    shape = tuple(d["shape"])
    raw = base64.b64decode(d["data"], validate=True)
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != math.prod(shape):
        raise ValueError(f"array payload has {arr.size} values, shape {list(shape)} needs {math.prod(shape)}")
    return arr.reshape(shape).astype(np.float64)


def _record(s: MultimodalSample) -> dict:
    return {
        "id": s.id,
        "speaker": s.speaker,
        "label": None if s.label is None else s.label.name,
        "ids": list(s.text.ids),
        "word_ids": list(s.text.word_ids),
        "visual": _encode_array(s.visual),
        "visual_teacher": _encode_array(s.visual_teacher),
        "acoustic": _encode_array(s.acoustic),
    }


def _from_record(rec: dict) -> MultimodalSample:
    return MultimodalSample(
        id=rec["id"],
        text=TokenSequence(tuple(rec["ids"]), tuple(rec["word_ids"])),
        visual=_decode_array(rec["visual"]),
        visual_teacher=_decode_array(rec["visual_teacher"]),
        acoustic=_decode_array(rec["acoustic"]),
        label=None if rec["label"] is None else EmotionClass[rec["label"]],
        speaker=int(rec["speaker"]),
    )


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save(samples: list[MultimodalSample], path: str | Path, spec: CorpusSpec | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(_record(s), sort_keys=True) + "\n")
    counts: dict[str, int] = {}
    for s in samples:
        key = "UNLABELED" if s.label is None else s.label.name
        counts[key] = counts.get(key, 0) + 1
    first = samples[0] if samples else None
    manifest = {
        "n_records": len(samples),
        "counts": counts,
        "dims": {
            "dv": None if first is None else first.visual.shape[1],
            "da": None if first is None else first.acoustic.shape[1],
            "k": None if first is None else first.visual_teacher.shape[1],
        },
        "seed": None if spec is None else spec.seed,
        "spec_hash": None if spec is None else spec.digest(),
        "spec": None if spec is None else spec.to_dict(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return path


def load(path: str | Path) -> list[MultimodalSample]:
    path = Path(path)
    samples = []
    with path.open("r", encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sample = _from_record(rec)
                sample.validate()
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path.name}: {exc}", index=index) from exc
            samples.append(sample)
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text("utf-8"))
        if manifest["n_records"] != len(samples):
            raise CorpusFormatError(
                f"{path.name}: manifest lists {manifest['n_records']} records, file holds {len(samples)}",
                index=len(samples),
            )
    return samples
