"""UAR against training-data fraction for every downstream setting.

Generates the toy corpora in memory, pre-trains once and evaluates each
setting at each fraction over the configured seeds. Writes one NDJSON record
per (setting, fraction) and prints a table.

    python scripts/fraction_sweep.py --fractions 0.05 0.1 0.2 0.5 1.0 --out runs/sweep
"""
import argparse
import json
import time
from pathlib import Path

from mmemo import corpus
from mmemo.config import RunConfig, Setting, load_config
from mmemo.model import EmotionModel
from mmemo.tokenizer import Vocab
from mmemo.trainer import pretrain, run_seeds


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run config (defaults are used otherwise)")
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.5, 1.0])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    vocab = Vocab.load()
    unlabeled_spec, labeled_spec = corpus.toy_specs(args.data_seed)
    unlabeled, labeled = corpus.generate(unlabeled_spec), corpus.generate(labeled_spec)

    start = time.perf_counter()
    model = EmotionModel.create(cfg.model, vocab, seed=cfg.seed)
    pretrain(model, unlabeled, cfg)
    print(f"pre-trained in {time.perf_counter() - start:.0f}s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with (out / "sweep.ndjson").open("w", encoding="utf-8") as fh:
        for setting in Setting:
            for fraction in args.fractions:
                results = run_seeds(setting, labeled, cfg, vocab, model.params, None, fraction,
                                    cfg.downstream.seeds)
                uar = sum(r.mean_uar for r in results) / len(results)
                wa = sum(r.mean_wa for r in results) / len(results)
                rec = {"setting": setting.value, "fraction": fraction, "mean_uar": uar,
                       "mean_wa": wa, "seeds": list(cfg.downstream.seeds)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                rows.append(rec)
                print(f"{setting.value:18s} fraction={fraction:<5} UAR={uar:.3f} WA={wa:.3f}")

    header = "setting".ljust(18) + "".join(f"{f:>8}" for f in args.fractions)
    print("\n" + header)
    for setting in Setting:
        cells = [r["mean_uar"] for r in rows if r["setting"] == setting.value]
        print(setting.value.ljust(18) + "".join(f"{u:8.3f}" for u in cells))


if __name__ == "__main__":
    main()
