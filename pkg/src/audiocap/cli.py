"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/numeric
error, 4 external-service error. All diagnostics go to standard error;
results (captions, reports, corrected text) go to standard output or the
file named by --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data, decoder, fluency, frontend, lora, metrics, nn
from .bridge import output_count
from .model import PipelineConfig, build_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3
EXIT_EXTERNAL = 4

DATA_ERRORS = (
    frontend.UnsupportedFormat, frontend.CorruptHeader, frontend.InputTooShort,
    data.MalformedLine, data.DuplicateId, data.MissingField, data.IoError,
    metrics.EmptyCorpus, metrics.IdMismatch, metrics.MissingSpice,
    decoder.EmptyCorpus, decoder.SequenceTooLong,
    ckpt.CorruptCheckpoint, ckpt.VersionMismatch,
    lora.UnknownComponent, lora.RankTooLarge,
    FileNotFoundError, IsADirectoryError, PermissionError,
)

RUNTIME_ERRORS = (data.NonFiniteLoss, nn.NonFiniteValue, FloatingPointError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> Parser:
    p = Parser(prog="audiocap",
               description="Desk-scale audio captioning pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, required=True, help="number of clips")
    sp.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train", help="train a model on manifests")
    tp.add_argument("--manifest", action="append", default=[],
                    help="manifest JSONL (repeatable)")
    tp.add_argument("--config", help="pipeline config JSON file")
    tp.add_argument("--out", help="checkpoint output path")
    tp.add_argument("--strategy", choices=("frozen", "full", "lora"),
                    help="override encoder+decoder train strategy")
    tp.add_argument("--preset", choices=("paper", "desk"), default="desk")
    tp.add_argument("--seed", type=int, help="override config seed")
    tp.add_argument("--max-steps", type=int, help="cap total optimizer steps")
    tp.add_argument("--losses", help="loss curve JSON (default <out>.losses.json)")
    tp.add_argument("--dump-config", action="store_true",
                    help="print the effective config JSON and exit")

    cp = sub.add_parser("caption", help="caption one WAV file")
    cp.add_argument("--ckpt", required=True)
    cp.add_argument("--wav", required=True)
    cp.add_argument("--beam", type=int, default=1)
    cp.add_argument("--correct", action="store_true",
                    help="apply the fluency correction pipeline")

    ep = sub.add_parser("evaluate", help="decode a manifest and score it")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--spice", help="external SPICE sidecar JSONL")
    ep.add_argument("--beam", type=int, default=1)
    ep.add_argument("--correct", action="store_true")
    ep.add_argument("--out", required=True, help="report JSON path")

    scp = sub.add_parser("score", help="score candidate captions (no model)")
    scp.add_argument("--candidates", required=True,
                     help="JSONL of {id, caption}")
    scp.add_argument("--references", required=True,
                     help="JSONL of {id, captions}")
    scp.add_argument("--spice", help="external SPICE sidecar JSONL")
    scp.add_argument("--out", required=True, help="report JSON path")

    crp = sub.add_parser("correct", help="run the correction pipeline on text")
    crp.add_argument("--text", required=True)
    crp.add_argument("--endpoint", default="")
    crp.add_argument("--mode", choices=fluency.MODES)
    crp.add_argument("--threshold", type=float, default=0.90)

    sub.add_parser("selftest", help="gradient checks and metric oracles")
    return p


def _load_config(args) -> PipelineConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = PipelineConfig.from_dict(json.load(fh))
    else:
        cfg = PipelineConfig()
    if args.strategy:
        mode = {"frozen": "frozen", "full": "full_finetune",
                "lora": "lora"}[args.strategy]
        cfg.strategy.encoder = mode
        cfg.strategy.decoder = mode
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_synth(args) -> int:
    data.synthesize_corpus(args.n, args.seed, args.out)
    print(f"wrote {args.n} clips and manifest.jsonl to {args.out}",
          file=sys.stderr)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.manifest or not args.out:
        raise UsageError("train: error: --manifest and --out are required")

    entries: list[data.ManifestEntry] = []
    features = {}
    seen_ids: set[str] = set()
    for mpath in args.manifest:
        parsed = data.parse_manifest(mpath)
        for e in parsed:
            if e.id in seen_ids:
                raise data.DuplicateId(f"id {e.id!r} appears in two manifests")
            seen_ids.add(e.id)
        entries.extend(parsed)
        features.update(data.extract_features(parsed, Path(mpath).parent,
                                              cfg.frontend))
    vocab = decoder.build_vocab(c for e in entries for c in e.captions)
    model = build_model(cfg, vocab)
    schedule = (data.TrainingSchedule.paper() if args.preset == "paper"
                else data.TrainingSchedule.desk())

    def log(step, value, lr):
        if step % 50 == 0 or step == 1:
            print(f"step {step}: loss {value:.5f} lr {lr:.2e}", file=sys.stderr)

    result = data.run_schedule(model, schedule, entries, base_dir=".",
                               seed=cfg.seed, max_steps=args.max_steps,
                               features=features, log=log)
    ckpt.save_checkpoint(model, args.out)
    losses_path = args.losses or f"{args.out}.losses.json"
    with open(losses_path, "w", encoding="utf-8") as fh:
        json.dump({"losses": result.loss_curve,
                   "stage_boundaries": result.stage_boundaries}, fh)
    print(f"final loss {result.loss_curve[-1]:.5f}; checkpoint at {args.out}",
          file=sys.stderr)
    return EXIT_OK


def _corrector_config(args) -> fluency.CorrectorConfig:
    endpoint = getattr(args, "endpoint", "") or ""
    mode = getattr(args, "mode", None)
    if mode is None:
        mode = "external_with_rules_fallback" if endpoint else "rules"
    threshold = getattr(args, "threshold", 0.90)
    return fluency.CorrectorConfig(threshold=threshold, mode=mode,
                                   endpoint=endpoint)


def _cmd_caption(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt)
    wav = frontend.load_wav(args.wav)
    text = model.caption_wave(wav, beam=args.beam)
    if args.correct:
        text = fluency.correction_pipeline(text, _corrector_config(args)).text
    print(text)
    return EXIT_OK


def _decode_manifest(model, entries, manifest_dir, beam, correct, cc=None):
    feats = data.extract_features(entries, manifest_dir, model.cfg.frontend)
    out = []
    for e in entries:
        text = model.caption_patches(feats[e.id], beam=beam)
        if correct:
            text = fluency.correction_pipeline(
                text, cc or fluency.CorrectorConfig()).text
        out.append(text)
    return out


def _write_report(report: metrics.MetricReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")


def _cmd_evaluate(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt)
    entries = data.parse_manifest(args.manifest)
    if not entries:
        raise metrics.EmptyCorpus("manifest has no entries")
    candidates = _decode_manifest(model, entries, Path(args.manifest).parent,
                                  args.beam, args.correct)
    items = [metrics.ScoredItem(id=e.id, candidate=c, references=e.captions)
             for e, c in zip(entries, candidates)]
    spice = metrics.read_spice_sidecar(args.spice) if args.spice else None
    detector = lambda t: fluency.detect_errors(t).probability
    report = metrics.evaluate_corpus(items, detector=detector, spice=spice)
    _write_report(report, args.out)
    print(json.dumps(report.corpus, sort_keys=True))
    return EXIT_OK


def _read_jsonl(path, required: tuple[str, ...]) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise data.MalformedLine(lineno, f"invalid JSON ({e.msg})") from e
            for key in required:
                if key not in obj:
                    raise data.MissingField(f"line {lineno}: missing {key!r}")
            rows.append(obj)
    return rows


def _cmd_score(args) -> int:
    cand_rows = _read_jsonl(args.candidates, ("id", "caption"))
    ref_rows = _read_jsonl(args.references, ("id", "captions"))
    cands = {str(r["id"]): str(r["caption"]) for r in cand_rows}
    if len(cands) != len(cand_rows):
        raise data.DuplicateId("duplicate candidate ids")
    ref_ids = [str(r["id"]) for r in ref_rows]
    if len(set(ref_ids)) != len(ref_ids):
        raise data.DuplicateId("duplicate reference ids")
    if set(cands) != set(ref_ids):
        raise metrics.IdMismatch("candidate and reference ids differ")
    items = [metrics.ScoredItem(id=str(r["id"]), candidate=cands[str(r["id"])],
                                references=[str(c) for c in r["captions"]])
             for r in ref_rows]
    spice = metrics.read_spice_sidecar(args.spice) if args.spice else None
    detector = lambda t: fluency.detect_errors(t).probability
    report = metrics.evaluate_corpus(items, detector=detector, spice=spice)
    _write_report(report, args.out)
    print(json.dumps(report.corpus, sort_keys=True))
    return EXIT_OK


def _cmd_correct(args) -> int:
    result = fluency.correction_pipeline(args.text, _corrector_config(args))
    print(result.text)
    print(json.dumps({
        "corrected": result.corrected,
        "pre": {"probability": result.pre.probability,
                "rules": result.pre.triggered_rules},
        "post": {"probability": result.post.probability,
                 "rules": result.post.triggered_rules},
        "warnings": result.warnings,
    }, sort_keys=True))
    return EXIT_OK


def _cmd_selftest(args) -> int:
    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    # gradient fidelity on a tiny block
    rng = nn.rng_from_seed(0)
    block = nn.TransformerBlock(8, 2, 2, rng, dtype=np.float64)
    x = nn.Tensor(rng.normal(0, 1, (3, 8)), requires_grad=True)
    params = dict(block.named_parameters(), x=x)
    err = nn.grad_check(lambda: nn.tsum(block(x) * block(x)), params,
                        samples_per_param=3, seed=1)
    check(f"gradient check (max rel err {err:.2e})", err < 1e-4)

    # optimizer hand values
    p = nn.parameter(np.array([1.0]))
    p.grad = np.array([1.0], dtype=np.float32)
    nn.AdamW({"p": p}, lr=0.1, weight_decay=0.0, clip_norm=None).step()
    check("adamw step without decay -> 0.9", abs(p.data[0] - 0.9) < 1e-6)
    q = nn.parameter(np.array([1.0]))
    q.grad = np.array([1.0], dtype=np.float32)
    nn.AdamW({"q": q}, lr=0.1, weight_decay=0.1, clip_norm=None).step()
    check("adamw step with decay -> 0.89", abs(q.data[0] - 0.89) < 1e-6)

    # compression arithmetic
    table = {1: 1, 17: 1, 18: 2, 170: 10, 752: 45, 1500: 89}
    check("bridge output counts", all(output_count(t, 17) == l
                                      for t, l in table.items()))

    # metric oracles
    m1 = metrics.meteor_lite("a dog barks", ["a dog barks"])
    m2 = metrics.meteor_lite("barks a dog", ["a dog barks"])
    check("meteor hand values", abs(m1 - 0.98148) < 1e-4
          and abs(m2 - 0.85185) < 1e-4)
    s = metrics.cider_d(["a dog barks", "rain falls"],
                        [["a dog barks"], ["rain falls"]])
    check("cider worked example", abs(s[0] - 7.5) < 1e-12
          and abs(s[1] - 5.0) < 1e-12)
    check("spider-fl gate", abs(metrics.spider_fl(0.5, 0.95) - 0.05) < 1e-12
          and metrics.spider_fl(0.5, 0.90) == 0.5)

    # fluency chain
    car = ("a car drives by and then another car drives by and then another "
           "car drives by and then another car drives by and then another "
           "car drives by")
    fixed = fluency.correct_with_rules(car)
    post = fluency.detect_errors(fixed).probability
    check("car loop correction",
          fixed == "a car drives by and then another car drives by"
          and post == 0.0)

    return EXIT_OK if not failures else EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        handler = {
            "synth": _cmd_synth, "train": _cmd_train, "caption": _cmd_caption,
            "evaluate": _cmd_evaluate, "score": _cmd_score,
            "correct": _cmd_correct, "selftest": _cmd_selftest,
        }[args.command]
        return handler(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except fluency.CorrectorError as e:
        print(f"external service error: {e}", file=sys.stderr)
        return EXIT_EXTERNAL
    except RUNTIME_ERRORS as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (json.JSONDecodeError, ValueError, KeyError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
