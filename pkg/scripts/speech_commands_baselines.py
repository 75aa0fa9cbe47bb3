"""Full-model vs frozen-trunk-head baselines on Speech Commands.

Trains both model types on three training sets and scores each on the
dataset's test split:

  all_real         every real training example
  synthetic        the synthetic pool (e.g. TTS renderings of the 35 words)
  equivalent_real  real examples matching the synthetic pool's per-word counts

Writes ``baselines.csv`` with columns training_data,size,model,accuracy.

  python scripts/speech_commands_baselines.py --speech-commands /data/speech_commands_v0.02 \\
      --synthetic-manifest tts/manifest.csv --trunk trunk.kwsw --out results/

The trunk comes from ``kwsembed pretrain`` on a separate corpus; Speech
Commands itself must not be used for pretraining. Expect hours of CPU time
for the full-data rows.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from kwsembed import data, trainer
from kwsembed.model import build_embedding, build_head, load_weights

log = logging.getLogger("baselines")


def training_sets(real, synthetic, seed):
    sets = [("all_real", data.DatasetView(tuple(real)))]
    if synthetic:
        sets.append(("synthetic", data.DatasetView(tuple(synthetic))))
        sets.append(("equivalent_real", data.mix_replacement(real, synthetic, 1.0, seed)))
    return sets


def run(entries, synthetic, trunk_path, out_dir, cfg: trainer.TrainConfig, models=("full", "head")):
    real = [e for e in entries if e.split == "train"]
    test = [e for e in entries if e.split == "test"]
    if not real or not test:
        raise ValueError("need train and test splits")
    words = sorted(data.words_in_order(real))
    store = data.FeatureStore()
    test_x = store.stack(test)
    test_y = [e.label for e in test]
    trunk = load_weights(trunk_path, expect_kind="embedding") if "head" in models else None
    rows = []
    for name, view in training_sets(real, synthetic, cfg.seed):
        x = store.stack(view.entries)
        y = view.labels()
        for model in models:
            head = build_head(len(words), seed=cfg.seed + 1, labels=words)
            if model == "full":
                t = build_embedding(cfg.seed)
                trainer.train_full(t, head, x, y, cfg)
            else:
                t = trunk
                trainer.train_head(t, head, x, y, trainer.TrainConfig(**{**vars(cfg), "freeze_trunk": True}))
            acc = trainer.evaluate_accuracy(t, head, test_x, test_y)
            log.info("%s %s accuracy=%.4f", name, model, acc)
            rows.append((name, len(view), model, f"{acc:.6f}"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "baselines.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["training_data", "size", "model", "accuracy"])
        w.writerows(rows)
    return path


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--speech-commands", required=True, help="extracted dataset root")
    p.add_argument("--synthetic-manifest", help="manifest of synthetic training clips (source=synthetic)")
    p.add_argument("--trunk", required=True, help="pretrained trunk .kwsw")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    entries = data.speech_commands_manifest(args.speech_commands)
    synthetic = []
    if args.synthetic_manifest:
        m = Path(args.synthetic_manifest)
        synthetic = [e for e in data.resolve_paths(data.load_manifest(m), m.parent) if e.source == "synthetic"]
    cfg = trainer.TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    print(run(entries, synthetic, args.trunk, args.out, cfg))
    return 0


if __name__ == "__main__":
    sys.exit(main())
