"""``architts`` command line: gen-corpus, train, synth, bench-sharing, verify.

Exit codes: 0 success, 1 verification or acceptance failure, 2 usage or
configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("architts")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _corpus_paths(cfg: RunConfig) -> tuple[Path, Path]:
    data = Path(cfg.paths.data_dir)
    return data / "train.atts", data / "test.atts"


def _read_split(path: Path):
    from .codec import read_dataset

    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run `architts gen-corpus` first)")
    return read_dataset(path)


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    from .codec import LatentCodec, generate_corpus, write_dataset

    codec = LatentCodec(cfg.codec)
    train_path, test_path = _corpus_paths(cfg)
    train_path.parent.mkdir(parents=True, exist_ok=True)
    c = cfg.corpus
    train = generate_corpus(cfg.codec, c.train_utterances, c.length_range, c.seed, codec)
    test = generate_corpus(cfg.codec, c.test_utterances, c.length_range, c.seed, codec, first_id=c.train_utterances)
    write_dataset(train_path, train, cfg.codec)
    write_dataset(test_path, test, cfg.codec)
    cfg.dump(train_path.parent / "run_config.yaml")
    for name, split in (("train", train), ("test", test)):
        frames = sum(u.frames for u in split)
        speakers = len({u.speaker for u in split})
        print(f"{name}: {len(split)} utterances, {frames} frames, {speakers} speakers")
    print(f"wrote {train_path} and {test_path}")
    return EXIT_OK


def build_trainer(cfg: RunConfig):
    from .codec import LatentCodec
    from .model import ArchiTTS
    from .training import Trainer

    model = ArchiTTS(cfg.model)
    return Trainer(model, cfg.train, LatentCodec(cfg.codec), {"run": cfg.to_dict()})


def cmd_train(cfg: RunConfig, args) -> int:
    from .checkpoint import load_into
    from .model import parameter_count
    from .plotting import plot_training

    train_path, _ = _corpus_paths(cfg)
    train, codec_cfg = _read_split(train_path)
    if codec_cfg != cfg.codec:
        raise UsageError("dataset sidecar codec config differs from the run config")
    trainer = build_trainer(cfg)
    ckpt_dir = Path(cfg.paths.checkpoint_dir)
    latest = ckpt_dir / "latest.ckpt"
    if latest.exists() and not args.fresh:
        load_into(trainer, latest)
        print(f"resumed from {latest} at step {trainer.step}")
    print(f"model parameters: {parameter_count(trainer.model)}")
    trainer.fit(train, ckpt_dir, until=args.until)
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    metrics = [json.loads(line) for line in (ckpt_dir / "metrics.jsonl").read_text().splitlines()]
    if metrics:
        plot_training(metrics, report_dir / "training.png")
        print(f"step {metrics[-1]['step']}: total {metrics[-1]['total']:.4f}")
    return EXIT_OK


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"bad token list {text!r}") from exc


def _plan(cfg: RunConfig, args):
    from .sampler import SamplerPlan

    base = cfg.sampler
    nfe = args.nfe if args.nfe is not None else base.nfe
    kw = dict(
        cfg_strength=args.cfg if args.cfg is not None else base.cfg_strength,
        timeshift=args.timeshift if args.timeshift is not None else base.timeshift,
        seed=args.seed if args.seed is not None else base.seed,
        cfg_null=args.cfg_null or base.cfg_null,
    )
    if args.sharing_ratio is not None:
        return SamplerPlan.from_sharing_ratio(nfe, args.sharing_ratio, **kw)
    recompute = base.recompute if args.nfe is None else None
    return SamplerPlan(nfe=nfe, recompute=recompute, **kw)


def _lookup(split, utt_id: int):
    for u in split:
        if u.utt_id == utt_id:
            return u
    raise LookupError(f"utterance {utt_id} not in split")


def cmd_synth(cfg: RunConfig, args) -> int:
    from .checkpoint import load_model
    from .codec import LatentCodec, token_error_rate
    from .evaluate import crop_prompt
    from .sampler import zero_shot_synthesize

    model, _ = load_model(args.checkpoint)
    train_path, test_path = _corpus_paths(cfg)
    split, codec_cfg = _read_split(test_path if args.split == "test" else train_path)
    codec = LatentCodec(codec_cfg)
    ref = _lookup(split, args.ref_utterance)
    if args.prompt_tokens:
        ref_latents, ref_tokens = crop_prompt(codec, ref, args.prompt_tokens)
    else:
        ref_latents, ref_tokens = ref.latents, ref.tokens
    reference = None
    if args.gen_utterance is not None:
        reference = _lookup(split, args.gen_utterance).tokens
        gen_tokens = reference
    elif args.gen_tokens:
        gen_tokens = _parse_tokens(args.gen_tokens)
    else:
        raise UsageError("give --gen-tokens or --gen-utterance")
    plan = _plan(cfg, args)
    res = zero_shot_synthesize(model, codec, ref_latents, ref_tokens, gen_tokens, ref.speaker, plan, key=args.ref_utterance)
    out_dir = Path(args.out_dir or cfg.paths.report_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"synth_ref{args.ref_utterance}_seed{plan.seed}"
    np.save(out_dir / f"{stem}.npy", res.latents.astype("<f4"))
    report = {
        "plan": plan.to_dict(),
        "duration": {"d": res.duration.d, "T_ref": res.duration.T_ref, "L_ref": res.duration.L_ref, "L_gen": res.duration.L_gen},
        "encoder_evals": res.encoder_evals,
        "decoder_evals": res.decoder_evals,
        "wall_time": res.wall_time,
        "gen_tokens": list(gen_tokens),
        "decoded_tokens": res.decoded_tokens,
        "speaker_cosine": codec.speaker_cosine(res.latents, ref.speaker),
        "token_error_rate": token_error_rate(reference, res.decoded_tokens) if reference is not None else None,
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({k: report[k] for k in ("encoder_evals", "decoder_evals", "token_error_rate")}))
    print(f"wrote {out_dir / stem}.npy and .json")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_bench_sharing(cfg: RunConfig, args) -> int:
    from .checkpoint import load_model
    from .codec import LatentCodec
    from .evaluate import bench_sharing, build_requests, wall_time_decreasing, write_csv
    from .plotting import plot_sharing

    model, _ = load_model(args.checkpoint)
    train_path, test_path = _corpus_paths(cfg)
    split, codec_cfg = _read_split(test_path if args.split == "test" else train_path)
    if args.limit:
        split = split[: args.limit]
    codec = LatentCodec(codec_cfg)
    ratios = _floats(args.ratios) if args.ratios else cfg.eval.ratios
    nfes = [int(v) for v in _floats(args.nfes)] if args.nfes else cfg.eval.nfes
    requests = build_requests(codec, split, cfg.eval.prompt_tokens)
    rows = bench_sharing(model, codec, requests, ratios, nfes, _plan(cfg, args), cfg.eval.batch_size)
    out_dir = Path(args.out_dir or cfg.paths.report_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out_dir / "bench_sharing.csv")
    trend = wall_time_decreasing(rows)
    (out_dir / "bench_sharing.json").write_text(json.dumps({"rows": rows, "wall_time_decreasing": trend}, indent=2) + "\n")
    plot_sharing(rows, out_dir / "bench_sharing.png")
    print(f"{'ratio':>6} {'nfe':>4} {'K':>3} {'TER':>7} {'spk cos':>8} {'enc':>4} {'wall s':>8}")
    for r in rows:
        print(f"{r['sharing_ratio']:6.3f} {r['nfe']:4d} {r['recompute']:3d} {r['token_error_rate']:7.4f} "
              f"{r['speaker_cosine']:8.4f} {r['encoder_evals']:4d} {r['wall_time']:8.2f}")
    print(f"wall time decreasing with sharing ratio: {trend}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args) -> int:
    from . import verify

    ctc_fn = verify.mutated_ctc_loss if args.mutate == "ctc-off-by-one" else verify.ctc_loss
    results = verify.run_all(ctc_fn=ctc_fn, quick=args.quick)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        seeds = f" failing seeds {r.failing_seeds[:10]}" if r.failing_seeds else ""
        print(f"{status} {r.name:28s} {r.detail}{seeds}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="architts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--data-dir")
    common.add_argument("--checkpoint-dir")
    common.add_argument("--report-dir")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write train/test corpus files")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-utterances", type=int)
    p.add_argument("--test-utterances", type=int)
    p.set_defaults(func=cmd_gen_corpus, overrides=lambda a: {
        "corpus.seed": a.seed, "corpus.train_utterances": a.train_utterances,
        "corpus.test_utterances": a.test_utterances})

    p = sub.add_parser("train", parents=[common], help="train (resumes from latest checkpoint)")
    p.add_argument("--steps", type=int)
    p.add_argument("--until", type=int, help="stop early at this step (schedule still uses --steps)")
    p.add_argument("--seed", type=int)
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(func=cmd_train, overrides=lambda a: {"train.steps": a.steps, "train.seed": a.seed})

    def sampler_flags(p):
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--split", choices=["train", "test"], default="test")
        p.add_argument("--nfe", type=int)
        p.add_argument("--cfg", type=float, help="guidance strength")
        p.add_argument("--timeshift", type=float)
        p.add_argument("--sharing-ratio", type=float)
        p.add_argument("--cfg-null", choices=["all", "prompt_speaker"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")

    p = sub.add_parser("synth", parents=[common], help="zero-shot synthesis for one reference")
    sampler_flags(p)
    p.add_argument("--ref-utterance", type=int, required=True)
    p.add_argument("--prompt-tokens", type=int, default=0, help="crop the reference to this many tokens")
    p.add_argument("--gen-tokens")
    p.add_argument("--gen-utterance", type=int, help="use this utterance's tokens and score against them")
    p.set_defaults(func=cmd_synth, overrides=lambda a: {})

    p = sub.add_parser("bench-sharing", parents=[common], help="sharing ratio x NFE sweep")
    sampler_flags(p)
    p.add_argument("--ratios", help="comma separated sharing ratios")
    p.add_argument("--nfes", help="comma separated NFE values")
    p.add_argument("--limit", type=int, help="evaluate only the first N utterances")
    p.set_defaults(func=cmd_bench_sharing, overrides=lambda a: {})

    p = sub.add_parser("verify", parents=[common], help="run the property suite")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--mutate", choices=["ctc-off-by-one"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify, overrides=lambda a: {})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {"paths.data_dir": args.data_dir, "paths.checkpoint_dir": args.checkpoint_dir,
                     "paths.report_dir": args.report_dir, **args.overrides(args)}
        cfg = load_config(args.config, overrides, args.set)
        return args.func(cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, LookupError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # bad inputs caught by the library (token ids, plans, durations)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
