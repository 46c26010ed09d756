"""Greedy longest-match sub-word tokenizer with word-boundary tracking."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .labels import EmotionClass

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
CONT = "##"

DEFAULT_VERBALIZER = {
    EmotionClass.HAPPY: "happy",
    EmotionClass.ANGER: "angry",
    EmotionClass.SADNESS: "sad",
    EmotionClass.NEUTRAL: "neutral",
}

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass(frozen=True)
class TokenSequence:
    """Sub-token ids plus the index of the source word for each sub-token.

    ``word_ids`` holds ``None`` for special tokens.
    """

    ids: tuple[int, ...] = ()
    word_ids: tuple[int | None, ...] = ()

    def __post_init__(self):
        if len(self.ids) != len(self.word_ids):
            raise ValueError("ids and word_ids must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        offset = self.n_words()
        shifted = tuple(None if w is None else w + offset for w in other.word_ids)
        return TokenSequence(self.ids + other.ids, self.word_ids + shifted)

    def n_words(self) -> int:
        real = [w for w in self.word_ids if w is not None]
        return max(real) + 1 if real else 0

    def word_spans(self) -> dict[int, list[int]]:
        spans: dict[int, list[int]] = {}
        for pos, w in enumerate(self.word_ids):
            if w is not None:
                spans.setdefault(w, []).append(pos)
        return spans


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    verbalizer_words: dict = field(default_factory=lambda: dict(DEFAULT_VERBALIZER))

    def __post_init__(self):
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ConfigError("vocab contains duplicate tokens")
        missing = [s for s in SPECIALS if s not in index]
        if missing:
            raise ConfigError(f"vocab is missing special tokens {missing}")
        for label, word in self.verbalizer_words.items():
            if word not in index or word.startswith(CONT):
                raise ConfigError(f"verbalizer word {word!r} for {label.name} must be a whole-word token")
        if len(set(self.verbalizer_words.values())) != len(self.verbalizer_words):
            raise ConfigError("verbalizer words must be distinct")
        object.__setattr__(self, "_index", index)

    @classmethod
    def load(cls, path: str | Path | None = None, verbalizer: dict | None = None) -> "Vocab":
        if path is None:
            text = resources.files("mmemo.data").joinpath("vocab.txt").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        tokens = tuple(line.strip() for line in text.splitlines() if line.strip())
        return cls(tokens, dict(verbalizer or DEFAULT_VERBALIZER))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index[token]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    def special_ids(self) -> frozenset[int]:
        return frozenset(self._index[s] for s in SPECIALS)

    def ordinary_ids(self) -> list[int]:
        specials = self.special_ids()
        return [i for i in range(len(self.tokens)) if i not in specials]

    def whole_words(self) -> list[str]:
        return [t for t in self.tokens if t not in SPECIALS and not t.startswith(CONT)]

    # verbalizer ------------------------------------------------------------

    def verbalizer(self, label: EmotionClass) -> int:
        return self._index[self.verbalizer_words[EmotionClass(label)]]

    def verbalizer_ids(self) -> list[int]:
        return [self.verbalizer(c) for c in EmotionClass]

    def label_for(self, token_id: int) -> EmotionClass:
        for c in EmotionClass:
            if self.verbalizer(c) == token_id:
                return c
        raise KeyError(f"token id {token_id} is not a verbalizer token")


def _split_word(word: str, vocab: Vocab) -> list[int]:
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONT + piece
            if piece in vocab:
                found = piece
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        pieces.append(vocab.id(found))
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    ids: list[int] = []
    word_ids: list[int] = []
    for w, word in enumerate(_WORD_RE.findall(text.lower())):
        for piece in _split_word(word, vocab):
            ids.append(piece)
            word_ids.append(w)
    return TokenSequence(tuple(ids), tuple(word_ids))


def detokenize(seq: TokenSequence | list[int], vocab: Vocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    words: list[str] = []
    for i in ids:
        tok = vocab.token(i)
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)


def build_prompt_suffix(vocab: Vocab) -> tuple[TokenSequence, int]:
    """Tokens for ``i am [MASK] .`` and the index of the mask slot."""
    needed = ["i", "am", ".", MASK]
    missing = [t for t in needed if t not in vocab]
    if missing:
        raise ConfigError(f"vocab lacks prompt tokens {missing}")
    ids = (vocab.id("i"), vocab.id("am"), vocab.mask_id, vocab.id("."))
    return TokenSequence(ids, (0, 1, 2, 3)), 2
