import numpy as np
import pytest

from mmemo.config import ModelConfig
from mmemo.corpus import CorpusSpec, generate
from mmemo.model import EmotionModel
from mmemo.tokenizer import Vocab


def fd_grad(f, node, index, h=1e-5):
    """Central finite difference of scalar f() w.r.t. node.value[index]."""
    old = node.value[index]
    node.value[index] = old + h
    fp = float(f())
    node.value[index] = old - h
    fm = float(f())
    node.value[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture(scope="session")
def vocab():
    return Vocab.load()


@pytest.fixture(scope="session")
def tiny_cfg(vocab):
    return ModelConfig(vocab_size=len(vocab), hidden=16, heads=2, layers=2, ffn=24, dv=6, da=5, k=8,
                       max_len=48)


@pytest.fixture(scope="session")
def tiny_corpus(vocab):
    spec = CorpusSpec(counts={0: 3, 1: 3, 2: 3, 3: 3}, dv=6, da=5, snr_visual=2.0, snr_acoustic=2.0,
                      visual_frames=(4, 8), acoustic_raw_frames=(9, 20), seed=3)
    return generate(spec, vocab)


@pytest.fixture
def tiny_model(tiny_cfg, vocab):
    return EmotionModel.create(tiny_cfg, vocab, seed=11)


# One summary line per acceptance criterion, filled in by tests/test_acceptance.py.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
