import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmemo import autodiff as ad
from mmemo.backbone import encode, pack
from mmemo.config import MaskingConfig
from mmemo.embedders import embed, mask_frame_input
from mmemo.errors import LengthError
from mmemo.masking import Task, plan_for_task
from mmemo.model import EmotionModel
from mmemo.params import TYPE_ID


def test_type_ids_distinct():
    assert sorted(TYPE_ID.values()) == [0, 1, 2]


def test_embed_shapes(tiny_model, tiny_corpus):
    p = tiny_model.params
    s = tiny_corpus[0]
    assert embed(p, "text", np.array(s.text.ids)).shape == (len(s.text), 16)
    assert embed(p, "visual", s.visual).shape == (s.visual.shape[0], 16)
    assert embed(p, "acoustic", s.acoustic).shape == (s.acoustic.shape[0], 16)


def test_embed_rows_are_normalized(tiny_model, tiny_corpus):
    out = embed(tiny_model.params, "visual", tiny_corpus[0].visual).value
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-8)


def test_embed_too_long(tiny_model, tiny_cfg):
    with pytest.raises(LengthError):
        embed(tiny_model.params, "acoustic", np.zeros((tiny_cfg.max_len + 1, tiny_cfg.da)))


def test_zero_frames_still_embedded(tiny_model, tiny_cfg):
    # A fully masked frame still carries position and type information.
    out = embed(tiny_model.params, "visual", np.zeros((3, tiny_cfg.dv))).value
    assert np.all(np.isfinite(out))
    assert not np.allclose(out[0], out[1])


def test_mask_frame_input_copies():
    raw = np.arange(12.0).reshape(4, 3)
    out = mask_frame_input(raw, [1, 3])
    assert raw[1, 0] == 3.0
    np.testing.assert_array_equal(out[[1, 3]], 0.0)
    np.testing.assert_array_equal(out[[0, 2]], raw[[0, 2]])
    with pytest.raises(IndexError):
        mask_frame_input(raw, [4])


def test_packed_length(tiny_model, tiny_corpus):
    batch = tiny_model.pack(tiny_corpus[:1])
    s = tiny_corpus[0]
    assert batch.length == 2 + len(s.text) + s.visual.shape[0] + s.acoustic.shape[0]
    sp = batch.spans[0]
    assert sp["text"] == (1, 1 + len(s.text))
    assert sp["visual"][0] == len(s.text) + 2


def test_unpack_round_trip(tiny_model, tiny_corpus):
    batch = tiny_model.pack(tiny_corpus[:5], embed=False)
    for b, s in enumerate(tiny_corpus[:5]):
        got = batch.unpack(b)
        assert tuple(got["text"]) == s.text.ids
        np.testing.assert_array_equal(got["visual"], s.visual)
        np.testing.assert_array_equal(got["acoustic"], s.acoustic)


def test_too_long_sample_named(vocab, tiny_corpus, tiny_cfg):
    with pytest.raises(LengthError, match=tiny_corpus[0].id):
        pack(tiny_corpus[:1], vocab=vocab, max_len=3)


def test_attention_rows_sum_to_one(tiny_model, tiny_corpus):
    batch = tiny_model.pack(tiny_corpus[:4])
    _, maps = tiny_model.encode(batch, return_attention=True)
    assert len(maps) == tiny_model.cfg.layers
    for a in maps:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)
        # padding columns get no weight
        pad = np.broadcast_to((batch.attention_mask == 0)[:, None, None, :], a.shape)
        assert np.all(a[pad] == 0.0)


@settings(max_examples=10, deadline=None)
@given(extra=st.integers(1, 6))
def test_padding_invariance(extra, tiny_cfg, vocab, tiny_corpus):
    tiny_model = EmotionModel.create(tiny_cfg, vocab, seed=11)
    cfg = tiny_model.cfg
    base = tiny_model.pack(tiny_corpus[:3])
    padded = tiny_model.pack(tiny_corpus[:3], extra_pad=extra)
    a = encode(tiny_model.params, base, cfg.layers, cfg.heads).value
    b = encode(tiny_model.params, padded, cfg.layers, cfg.heads).value
    for i in range(3):
        n = int(base.attention_mask[i].sum())
        np.testing.assert_allclose(b[i, :n], a[i, :n], atol=1e-10)


def test_batch_composition_invariance(tiny_model, tiny_corpus):
    cfg = tiny_model.cfg
    alone = encode(tiny_model.params, tiny_model.pack(tiny_corpus[:1]), cfg.layers, cfg.heads).value
    mixed = encode(tiny_model.params, tiny_model.pack(tiny_corpus[:6]), cfg.layers, cfg.heads).value
    n = alone.shape[1]
    np.testing.assert_allclose(mixed[0, :n], alone[0], atol=1e-10)


def test_permutation_equivariance_without_positions(tiny_model, tiny_corpus):
    # With position tables zeroed, permuting acoustic frames permutes their outputs.
    params = tiny_model.params.clone()
    for m in ("text", "visual", "acoustic"):
        params[f"embed.{m}.pos"] = np.zeros_like(params[f"embed.{m}.pos"].value)
    cfg = tiny_model.cfg
    s = tiny_corpus[0]
    perm = np.random.default_rng(0).permutation(s.acoustic.shape[0])
    shuffled = type(s)(s.id, s.text, s.visual, s.visual_teacher, s.acoustic[perm], s.label, s.speaker)
    b1 = pack([s], vocab=tiny_model.vocab, params=params, max_len=cfg.max_len)
    b2 = pack([shuffled], vocab=tiny_model.vocab, params=params, max_len=cfg.max_len)
    o1 = encode(params, b1, cfg.layers, cfg.heads).value[0]
    o2 = encode(params, b2, cfg.layers, cfg.heads).value[0]
    lo, hi = b1.spans[0]["acoustic"]
    np.testing.assert_allclose(o2[lo:hi], o1[lo:hi][perm], atol=1e-10)
    np.testing.assert_allclose(o2[:lo], o1[:lo], atol=1e-10)


def test_single_modality_input(tiny_model, tiny_corpus, tiny_cfg):
    s = tiny_corpus[0]
    text_only = type(s)(s.id, s.text, np.zeros((0, tiny_cfg.dv)), np.zeros((0, tiny_cfg.k)),
                        np.zeros((0, tiny_cfg.da)), s.label, s.speaker)
    batch = tiny_model.pack([text_only])
    assert batch.length == len(s.text) + 2
    out = tiny_model.encode(batch).value
    assert out.shape == (1, len(s.text) + 2, tiny_cfg.hidden)
    assert np.all(np.isfinite(out))


def test_every_layer_receives_gradient(tiny_model, tiny_corpus):
    rng = np.random.default_rng(0)
    cfg = MaskingConfig()
    samples = tiny_corpus[:4]
    for task in Task:
        tiny_model.params.zero_grad()
        plans = [plan_for_task(s, task, cfg, rng, tiny_model.vocab) for s in samples]
        ad.backward(tiny_model.task_loss(task, samples, plans))
        for i in range(tiny_model.cfg.layers):
            g = tiny_model.params[f"layer{i}.attn.wq"].grad
            assert np.linalg.norm(g) > 0, (task, i)


def test_identical_raw_input_embeds_differently_per_modality(vocab):
    from mmemo.config import ModelConfig
    cfg = ModelConfig(vocab_size=len(vocab), hidden=16, heads=2, layers=1, ffn=24, dv=6, da=6,
                      max_len=16)
    p = EmotionModel.create(cfg, vocab, seed=2).params
    raw = np.random.default_rng(0).normal(size=(5, 6))
    assert not np.allclose(embed(p, "visual", raw).value, embed(p, "acoustic", raw).value)


def test_mask_frame_input_examples():
    raw = np.random.default_rng(1).normal(size=(10, 4))
    out = mask_frame_input(raw, {4, 5, 6})
    np.testing.assert_array_equal(out[4:7], 0.0)
    np.testing.assert_array_equal(out[:4], raw[:4])
    np.testing.assert_array_equal(out[7:], raw[7:])
    np.testing.assert_array_equal(mask_frame_input(raw, []), raw)


@given(positions=st.sets(st.integers(0, 9)), seed=st.integers(0, 1000))
def test_mask_frame_input_idempotent(positions, seed):
    raw = np.random.default_rng(seed).normal(size=(10, 3))
    once = mask_frame_input(raw, positions)
    np.testing.assert_array_equal(mask_frame_input(once, positions), once)


@settings(max_examples=25, deadline=None)
@given(row=st.integers(0, 7), seed=st.integers(0, 1000))
def test_embed_is_row_local(vocab, row, seed):
    # Changing one input frame only changes that frame's embedding.
    from mmemo.config import ModelConfig
    cfg = ModelConfig(vocab_size=len(vocab), hidden=16, heads=2, layers=1, ffn=24, dv=6, da=5,
                      max_len=16)
    p = EmotionModel.create(cfg, vocab, seed=4).params
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(8, 6))
    changed = raw.copy()
    changed[row] = rng.normal(size=6)
    a, b = embed(p, "visual", raw).value, embed(p, "visual", changed).value
    keep = np.arange(8) != row
    np.testing.assert_array_equal(a[keep], b[keep])
    assert not np.allclose(a[row], b[row])
