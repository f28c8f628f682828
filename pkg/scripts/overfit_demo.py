"""Overfit the desk preset on a small synthetic corpus and print captions.

Usage: python scripts/overfit_demo.py [--n 8] [--seed 7] [--out DIR]
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

from audiocap.data import (TrainingSchedule, extract_features, run_schedule,
                           synthesize_corpus)
from audiocap.decoder import build_vocab
from audiocap.model import PipelineConfig, build_model


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out", default=None, help="corpus directory")
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="aac_"))
    entries = synthesize_corpus(args.n, args.seed, out)
    print(f"corpus of {args.n} clips in {out}")

    cfg = PipelineConfig(seed=0)
    vocab = build_vocab(c for e in entries for c in e.captions)
    model = build_model(cfg, vocab)

    t0 = time.monotonic()
    result = run_schedule(model, TrainingSchedule.desk(), entries, out, seed=0,
                          log=lambda s, v, lr: s % 25 == 0 and print(
                              f"  step {s:4d}  loss {v:.5f}  lr {lr:.1e}"))
    print(f"trained {len(result.loss_curve)} steps "
          f"in {time.monotonic() - t0:.1f}s; "
          f"final loss {result.loss_curve[-1]:.5f}")

    feats = extract_features(entries, out, cfg.frontend)
    exact = 0
    for e in entries:
        cap = model.caption_patches(feats[e.id])
        mark = "=" if cap == e.captions[0] else "!"
        exact += cap == e.captions[0]
        print(f"  [{mark}] {e.id}: {cap}")
    print(f"{exact}/{len(entries)} captions reproduced exactly")
    return 0 if exact == len(entries) else 1


if __name__ == "__main__":
    sys.exit(main())
