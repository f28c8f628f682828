"""Per-tensor gradient check on a micro end-to-end model.

Builds the full pipeline in float64 at reduced width, runs the caption
loss on two synthetic items, and compares reverse-mode gradients against
central differences at sampled entries of every trainable tensor.

Usage: python scripts/grad_check_report.py [--samples 3]
"""

import argparse
import sys
import time

import numpy as np

from audiocap import nn
from audiocap.bridge import BridgeConfig
from audiocap.data import render_events, caption_for_events
from audiocap.decoder import DecoderConfig, build_vocab
from audiocap.encoder import EncoderConfig
from audiocap.frontend import Waveform, wave_to_patches
from audiocap.lora import trainable_parameters
from audiocap.model import PipelineConfig, build_model


def micro_model():
    cfg = PipelineConfig(
        encoder=EncoderConfig(d_enc=64, layers=2, heads=4,
                              max_time_patches=32),
        bridge=BridgeConfig(d_q=64, heads=4, cross_layers=1, self_layers=1,
                            d_dec=64, max_windows=8),
        decoder=DecoderConfig(d_dec=64, layers=2, heads=4, max_seq=64),
        seed=11,
    )
    events = [[0, 4], [2, 1]]
    rng = nn.rng_from_seed(5)
    pairs = []
    captions = []
    for ev in events:
        wave = Waveform(render_events(ev, rng), 16000)
        pairs.append(wave_to_patches(wave, cfg.frontend))
        captions.append(caption_for_events(ev))
    vocab = build_vocab(captions)
    model = build_model(cfg, vocab, dtype=np.float64)
    model.encoder.set_feature_stats(-5.0, 4.0)
    batch = list(zip(pairs, captions))
    return model, batch


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=3,
                    help="entries checked per tensor")
    args = ap.parse_args()

    model, batch = micro_model()
    params = trainable_parameters(model)
    n_entries = sum(p.data.size for p in params.values())
    print(f"{len(params)} trainable tensors, {n_entries} entries; "
          f"checking {args.samples} sampled entries per tensor")

    t0 = time.monotonic()
    worst = 0.0
    worst_name = ""
    for name, p in sorted(params.items()):
        err = nn.grad_check(lambda: model.loss_on_batch(batch), {name: p},
                            h=(1e-5, 1e-4, 1e-3),
                            samples_per_param=args.samples, seed=13)
        if err > worst:
            worst, worst_name = err, name
        flag = "" if err < 1e-4 else "  <-- OVER TOLERANCE"
        print(f"  {name:55s} {err:.3e}{flag}")
    print(f"worst: {worst:.3e} at {worst_name} "
          f"({time.monotonic() - t0:.1f}s)")
    return 0 if worst < 1e-4 else 1


if __name__ == "__main__":
    sys.exit(main())
