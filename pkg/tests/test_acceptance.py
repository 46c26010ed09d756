"""Acceptance gate: one test per criterion, each recording a PASS/FAIL summary line.

The heavy criterion (toy learnability) pre-trains a desk-scale model once per
session; the ablation criterion reuses that run for its ``full`` variant.
"""
import dataclasses
import json
import math
import os
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from mmemo import autodiff as ad
from mmemo.config import MaskingConfig, RunConfig, Setting
from mmemo.corpus import MultimodalSample, generate, toy_specs
from mmemo.downstream import compute_metrics
from mmemo.masking import Task, plan_for_task, plan_span, plan_whole_word
from mmemo.model import EmotionModel
from mmemo.params import CLASSIFIER_KEYS
from mmemo.tokenizer import Vocab
from mmemo.trainer import (
    ABLATIONS, ablate, ablation_report, build_model, pretrain, run_seeds, run_setting,
)

from conftest import ACCEPTANCE, fd_grad, rel_err


@contextmanager
def criterion(n: int, title: str):
    info: list[str] = []
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0][:160] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE[n] = f"FAIL  {n:2d}. {title}: {'; '.join(info)} [{msg}]"
        print(ACCEPTANCE[n])
        raise
    ACCEPTANCE[n] = f"PASS  {n:2d}. {title}: {'; '.join(info)}"
    print(ACCEPTANCE[n])


# ---------------------------------------------------------------- 1. gradient integrity

def _op_cases(rng):
    def p(*shape, scale=1.0):
        return ad.Node.param(rng.normal(size=shape) * scale)

    teacher = rng.dirichlet(np.ones(5), size=3)
    return {
        "add": ([p(3, 4), p(4)], lambda a, b: ad.add(a, b)),
        "sub": ([p(3, 4), p(3, 1)], lambda a, b: ad.sub(a, b)),
        "mul": ([p(3, 4), p(1, 4)], lambda a, b: ad.mul(a, b)),
        "scale": ([p(5)], lambda a: ad.scale(a, -2.5)),
        "gelu": ([p(4, 5, scale=2.0)], ad.gelu),
        "square": ([p(6)], ad.square),
        "sum_all": ([p(3, 4)], ad.sum_all),
        "mean_all": ([p(3, 4)], ad.mean_all),
        "sum_axis": ([p(3, 4, 2)], lambda a: ad.sum_axis(a, 1)),
        "reshape": ([p(3, 4)], lambda a: ad.reshape(a, (2, 6))),
        "transpose": ([p(2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
        "concat": ([p(2, 3), p(4, 3)], lambda a, b: ad.concat([a, b], axis=0)),
        "take_rows": ([p(5, 3)], lambda a: ad.take_rows(a, [4, 0, 4, 2])),
        "embedding": ([p(7, 3)], lambda t: ad.embedding(t, np.array([1, 6, 1, 0]))),
        "matmul": ([p(3, 4), p(4, 5)], ad.matmul),
        "matmul_batched": ([p(2, 2, 3, 4), p(2, 2, 4, 3)], ad.matmul),
        "matmul_flat": ([p(2, 3, 4), p(4, 5)], ad.matmul),
        "linear": ([p(2, 3, 4), p(4, 5), p(5)], ad.linear),
        "softmax": ([p(3, 6, scale=3.0)], lambda a: ad.softmax(a, axis=-1)),
        "layer_norm": ([p(3, 8), p(8), p(8)], lambda x, g, b: ad.layer_norm(x, g, b)),
        "cross_entropy": ([p(4, 7, scale=2.0)], lambda z: ad.cross_entropy(z, [0, 6, 3, 3])),
        "l2_loss": ([p(3, 5)], lambda y: ad.l2_loss(y, np.ones((3, 5)))),
        "kl_div": ([p(3, 5, scale=2.0)], lambda z: ad.kl_div(z, teacher)),
    }


def test_criterion_01_gradient_integrity(tiny_cfg, vocab, tiny_corpus):
    with criterion(1, "gradient integrity (finite differences, rel. err < 1e-4)") as info:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = 0.0
        cases = _op_cases(rng)
        for name, (inputs, fn) in cases.items():
            out = fn(*inputs)
            weights = rng.normal(size=out.shape)

            def scalar():
                o = fn(*inputs)
                return ad.sum_all(ad.mul(o, weights)) if o.value.ndim else o

            for node in inputs:
                node.zero_grad()
            ad.backward(scalar())
            for _ in range(20):
                node = inputs[int(rng.integers(len(inputs)))]
                index = tuple(int(rng.integers(d)) for d in node.shape)
                num = fd_grad(lambda: scalar().value, node, index)
                err = rel_err(node.grad[index], num)
                worst = max(worst, err)
                assert err < 1e-4, f"{name} at {index}: analytic {node.grad[index]} vs {num}"

        model = EmotionModel.create(tiny_cfg, vocab, seed=3)
        samples = tiny_corpus[:3]
        mrng = np.random.default_rng(9)
        plans = {t: [plan_for_task(s, t, MaskingConfig(), mrng, vocab) for s in samples] for t in Task}

        def composite():
            total = None
            for t in Task:
                loss = model.task_loss(t, samples, plans[t])
                total = loss if total is None else ad.add(total, loss)
            return total

        ad.backward(composite())
        names = sorted(model.params)
        checked = 0
        while checked < 24:
            node = model.params[names[int(mrng.integers(len(names)))]]
            # Tiny gradients are dominated by finite-difference round-off.
            candidates = np.flatnonzero(np.abs(node.grad) > 1e-4)
            if candidates.size == 0:
                continue
            index = np.unravel_index(int(mrng.choice(candidates)), node.shape)
            err = rel_err(node.grad[index], fd_grad(lambda: composite().value, node, index))
            worst = max(worst, err)
            assert err < 1e-4
            checked += 1
        elapsed = time.perf_counter() - start
        info.append(f"{len(cases)} ops x 20 coords + composite x {checked} coords")
        info.append(f"worst rel. err {worst:.2e}")
        info.append(f"{elapsed:.1f}s")
        assert elapsed < 60


# ---------------------------------------------------------------- 2. conditional masking

def test_criterion_02_conditional_masking(tiny_model, tiny_corpus, vocab):
    with criterion(2, "conditional masking leaves other segments bitwise intact") as info:
        rng = np.random.default_rng(7)
        cfg = MaskingConfig()
        violations = 0
        for _ in range(1000):
            s = tiny_corpus[int(rng.integers(len(tiny_corpus)))]
            task = list(Task)[int(rng.integers(4))]
            plan = plan_for_task(s, task, cfg, rng, vocab)
            masked = tiny_model.pack([s], [plan])
            clean = tiny_model.pack([s], [None])
            lo, hi = masked.spans[0][task.modality]
            outside = np.ones(masked.length, dtype=bool)
            outside[lo:hi] = False
            same_ids = np.array_equal(masked.text_ids, clean.text_ids) or task.modality == "text"
            same_vis = np.array_equal(masked.visual, clean.visual) or task.modality == "visual"
            same_ac = np.array_equal(masked.acoustic, clean.acoustic) or task.modality == "acoustic"
            rows_equal = np.array_equal(masked.embeddings.value[0, outside],
                                        clean.embeddings.value[0, outside])
            violations += not (same_ids and same_vis and same_ac and rows_equal)
        info.append(f"{violations} violations in 1000 draws")
        assert violations == 0


# ---------------------------------------------------------------- 3. whole-word masking

def test_criterion_03_whole_word_masking(vocab):
    with criterion(3, "whole-word masking never splits words; selection rate 0.15 +/- 0.02") as info:
        specs = toy_specs(seed=5, n_unlabeled=200, n_labeled=4)
        texts = [s.text for s in generate(specs[0], vocab)]
        rng = np.random.default_rng(11)
        cfg = MaskingConfig()
        partial = selected = words = 0
        for i in range(10_000):
            seq = texts[i % len(texts)]
            plan = plan_whole_word(seq, cfg.text_rate, rng, vocab, cfg)
            spans = seq.word_spans()
            masked = dict((p, a) for p, a, _ in plan.text_actions)
            for w, positions in spans.items():
                hit = [p in masked for p in positions]
                if any(hit):
                    selected += 1
                    if not all(hit) or len({masked[p] for p in positions}) != 1:
                        partial += 1
            words += len(spans)
        rate = selected / words
        info.append(f"partial words {partial}")
        info.append(f"selection rate {rate:.4f} over {words} words")
        # Informational: plan_for_task's forced minimum raises the end-to-end rate slightly.
        hit = 0
        for seq in texts:
            sample = MultimodalSample("x", seq, np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1)))
            plan = plan_for_task(sample, Task.WWMLM, cfg, rng, vocab)
            hit += len({seq.word_ids[p] for p in plan.text_positions})
        e2e = hit / sum(len(t.word_spans()) for t in texts)
        info.append(f"with forced minimum {e2e:.3f}")
        assert partial == 0
        assert abs(rate - 0.15) <= 0.02


# ---------------------------------------------------------------- 4. span masking

def test_criterion_04_span_masking():
    with criterion(4, "span runs have length 3 (end truncation only); fraction in [0.13, 0.17]") as info:
        rng = np.random.default_rng(12)
        bad_runs = 0
        masked = total = 0
        for i in range(100_000):
            length = 6 + i % 40
            plan = plan_span(length, 3, 0.15, rng)
            mask = np.zeros(length, dtype=bool)
            mask[list(plan.frame_positions)] = True
            masked += int(mask.sum())
            total += length
            padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
            edges = np.flatnonzero(np.diff(padded))
            for start, stop in zip(edges[::2], edges[1::2]):
                if stop - start != 3 and stop != length:
                    bad_runs += 1
        frac = masked / total
        info.append(f"bad runs {bad_runs}")
        info.append(f"masked fraction {frac:.4f} over 1e5 draws")
        assert bad_runs == 0
        assert 0.13 <= frac <= 0.17


# ---------------------------------------------------------------- 5. analytic anchors

def test_criterion_05_analytic_anchors(tiny_cfg, vocab, tiny_corpus):
    with criterion(5, "loss anchors: ln V, ln K, zero L2") as info:
        V = len(vocab)
        uniform = ad.cross_entropy(ad.constant(np.zeros((5, V))), [0, 3, 9, 100, V - 1]).value
        kl = ad.kl_div(ad.constant(np.zeros((3, tiny_cfg.k))), np.eye(tiny_cfg.k)[[0, 4, 7]]).value
        target = np.random.default_rng(0).normal(size=(4, 6))
        l2 = ad.l2_loss(ad.constant(target.copy()), target).value

        model = EmotionModel.create(tiny_cfg, vocab, seed=1)
        model.params["head.mlm.ln.gain"] = np.zeros(tiny_cfg.hidden)
        samples = tiny_corpus[:4]
        rng = np.random.default_rng(0)
        plans = [plan_for_task(s, Task.WWMLM, MaskingConfig(), rng, vocab) for s in samples]
        model_level = model.task_loss(Task.WWMLM, samples, plans).value
        model.params["head.visual_cls.w"] = np.zeros_like(model.params["head.visual_cls.w"].value)
        one_hot = [MultimodalSample(s.id, s.text, s.visual, np.eye(tiny_cfg.k)[np.zeros(len(s.visual), int)],
                                    s.acoustic, s.label, s.speaker) for s in samples]
        kplans = [plan_for_task(s, Task.SPAN_MVFC_KL, MaskingConfig(), rng, vocab) for s in one_hot]
        model_kl = model.task_loss(Task.SPAN_MVFC_KL, one_hot, kplans).value

        errs = {"wwmlm": abs(uniform - math.log(V)), "kl": abs(kl - math.log(tiny_cfg.k)),
                "model wwmlm": abs(model_level - math.log(V)), "model kl": abs(model_kl - math.log(tiny_cfg.k))}
        info.append(", ".join(f"{k} err {v:.1e}" for k, v in errs.items()))
        info.append(f"l2 {l2}")
        assert max(errs.values()) <= 1e-9
        assert l2 == 0.0


# ---------------------------------------------------------------- 6. toy learnability

@pytest.fixture(scope="module")
def toy():
    start = time.perf_counter()
    vocab = Vocab.load()
    cfg = RunConfig()
    unlabeled_spec, labeled_spec = toy_specs(seed=0)
    unlabeled, labeled = generate(unlabeled_spec, vocab), generate(labeled_spec, vocab)
    model = EmotionModel.create(cfg.model, vocab, seed=cfg.seed)
    result = pretrain(model, unlabeled, cfg)
    return {"vocab": vocab, "cfg": cfg, "unlabeled": unlabeled, "labeled": labeled,
            "model": model, "result": result, "pretrain_seconds": time.perf_counter() - start}


@pytest.mark.slow
def test_criterion_06_toy_learnability(toy):
    with criterion(6, "toy learnability (loss halving, UAR >= 0.90, ordering at 10%, < 10 min)") as info:
        start = time.perf_counter()
        cfg, vocab, labeled = toy["cfg"], toy["vocab"], toy["labeled"]
        assert len(toy["unlabeled"]) >= 512 and len(labeled) >= 256
        result, params = toy["result"], toy["model"].params
        ratios = {}
        for task in cfg.pretrain.tasks:
            first, last = result.window_means(task)
            ratios[task] = last / first
        info.append("(a) ratios " + ", ".join(f"{t} {r:.3f}" for t, r in ratios.items()))

        full = {s: run_setting(s, labeled, cfg, vocab, pretrained=params, fraction=1.0, seed=0).mean_uar
                for s in (Setting.PRETRAIN_FINETUNE, Setting.PRETRAIN_PROMPT)}
        info.append("(b) " + ", ".join(f"{s.value} {u:.3f}" for s, u in full.items()))

        low = {}
        for s in (Setting.PRETRAIN_PROMPT, Setting.PRETRAIN_FINETUNE, Setting.DIRECT):
            runs = run_seeds(s, labeled, cfg, vocab, pretrained=params, fraction=0.1, seeds=(0, 1, 2))
            low[s] = float(np.mean([r.mean_uar for r in runs]))
        info.append("(c) 10%: " + ", ".join(f"{s.value} {u:.3f}" for s, u in low.items()))
        total = toy["pretrain_seconds"] + time.perf_counter() - start
        info.append(f"{total:.0f}s")

        assert all(r < 0.5 for r in ratios.values()), ratios
        assert all(u >= 0.90 for u in full.values()), full
        assert low[Setting.PRETRAIN_PROMPT] >= low[Setting.PRETRAIN_FINETUNE] >= low[Setting.DIRECT], low
        assert total < 600


# ---------------------------------------------------------------- 7. parameter accounting

def test_criterion_07_parameter_accounting(vocab):
    with criterion(7, "prompt adds 0 parameters, finetune adds H*4+4") as info:
        cfg = RunConfig()
        pre = EmotionModel.create(cfg.model, vocab, seed=0).params
        base = pre.count()
        prompt = build_model(Setting.PRETRAIN_PROMPT, cfg, vocab, 0, pretrained=pre)
        finetune = build_model(Setting.PRETRAIN_FINETUNE, cfg, vocab, 0, pretrained=pre)
        added_prompt = prompt.params.count() - base
        added_ft = finetune.params.count() - base
        h = cfg.model.hidden
        info.append(f"checkpoint {base}, prompt +{added_prompt}, finetune +{added_ft} (H={h})")
        assert added_prompt == 0
        assert added_ft == h * 4 + 4
        assert set(finetune.params) - set(pre) == set(CLASSIFIER_KEYS)


# ---------------------------------------------------------------- 8. metrics oracle

def test_criterion_08_metrics_oracle():
    with criterion(8, "compute_metrics equals a brute-force confusion matrix") as info:
        rng = np.random.default_rng(8)
        mismatches = 0
        for _ in range(1000):
            n = int(rng.integers(1, 80))
            labels = rng.integers(0, 4, n).tolist()
            preds = rng.integers(0, 4, n).tolist()
            cm = [[0] * 4 for _ in range(4)]
            for p, y in zip(preds, labels):
                cm[y][p] += 1
            wa = sum(cm[i][i] for i in range(4)) / n
            recalls = [cm[i][i] / sum(cm[i]) for i in range(4) if sum(cm[i])]
            uar = sum(recalls) / len(recalls)
            r = compute_metrics(preds, labels)
            mismatches += not (r.confusion.tolist() == cm and r.wa == wa and r.uar == uar)
        info.append(f"{mismatches} mismatches in 1000 sets")
        assert mismatches == 0


# ---------------------------------------------------------------- 9. ablation harness

@pytest.mark.slow
def test_criterion_09_ablation_harness(toy):
    with criterion(9, "ablation grid: full UAR >= each ablation - 0.02 over 3 seeds") as info:
        cfg = toy["cfg"]
        cfg = dataclasses.replace(cfg, downstream=dataclasses.replace(cfg.downstream, fraction=0.1))
        rows = ablate(toy["unlabeled"], toy["labeled"], cfg, toy["vocab"], Setting.PRETRAIN_PROMPT,
                      pretrained={"full": toy["model"].params})
        report = ablation_report(rows)
        print(report)
        assert [r.name for r in rows] == list(ABLATIONS)
        assert all(len(r.uars) == 3 for r in rows)
        by = {r.name: r.mean_uar for r in rows}
        info.append(", ".join(f"{k} {v:.3f}" for k, v in by.items()))
        assert all(by["full"] >= v - 0.02 for v in by.values())


# ---------------------------------------------------------------- 10. determinism

def _cli(args, cwd, env):
    proc = subprocess.run([sys.executable, "-m", "mmemo.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "reruns reproduce metrics to 1e-12") as info:
        (tmp_path / "u.spec").write_text("[corpus]\ntotal = 48\nlabeled = false\nsnr_text = 3\n"
                                         "snr_visual = 3\nsnr_acoustic = 3\nseed = 1\n")
        (tmp_path / "l.spec").write_text("[corpus]\ntotal = 40\nsnr_text = 3\nsnr_visual = 3\n"
                                         "snr_acoustic = 3\nseed = 2\nid_prefix = lab\n")
        (tmp_path / "run.cfg").write_text("[run]\nunlabeled_data = u.jsonl\nlabeled_data = l.jsonl\n\n"
                                          "[pretrain]\nsteps = 16\nlog_every = 0\n\n"
                                          "[downstream]\nepochs = 2\nseeds = 0, 1\n")
        outs = []
        for run in ("a", "b"):
            env = {**os.environ, "MMEMO_OUTPUT_DIR": str(tmp_path / run)}
            _cli(["gen-data", "--spec", "u.spec", "--out", "u.jsonl"], tmp_path, env)
            _cli(["gen-data", "--spec", "l.spec", "--out", "l.jsonl"], tmp_path, env)
            _cli(["pretrain", "--config", "run.cfg", "--checkpoint", f"{run}.ckpt"], tmp_path, env)
            for setting in ("pretrain+finetune", "pretrain+prompt"):
                _cli(["eval", "--config", "run.cfg", "--setting", setting, "--checkpoint", f"{run}.ckpt",
                      "--fraction", "0.5"], tmp_path, env)
            lines = (tmp_path / run / "metrics.ndjson").read_text().splitlines()
            outs.append([json.loads(x) for x in lines])
        a, b = outs
        assert len(a) == len(b) > 0
        worst = max(max(abs(x["wa"] - y["wa"]), abs(x["uar"] - y["uar"])) for x, y in zip(a, b))
        same_ckpt = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        info.append(f"{len(a)} fold records, max metric diff {worst:.1e}, checkpoints identical {same_ckpt}")
        assert worst <= 1e-12
        assert same_ckpt
