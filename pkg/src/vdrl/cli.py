"""``vdrl`` command line.

Every subcommand takes ``--seed``, ``--config`` and ``--out``. Failures
print one JSON line to stderr, ``{"error": kind, "exit": code, "message": ...}``,
and exit with a code that depends on the kind of failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, CheckpointVersionError
from .codec import CodecError, interleaved_decode, interleaved_encode, read_dense_csv, read_events, write_dense_csv, write_events
from .config import Config, ConfigError, load_config

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT_VERSION = 4
EXIT_INPUT = 5
EXIT_CHECK_FAILED = 6


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _settings(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _torch_setup(seed: int) -> None:
    import torch
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# -- commands -------------------------------------------------------------------------------------

def cmd_gen_data(args, cfg: Config, out: Path) -> dict:
    from .synthetic import make_corpus, save_corpus
    d = cfg.data
    train = make_corpus(cfg.seed, args.train_clips or d.num_train_clips, d.clip_seconds, d.num_classes, d.sample_rate_hz)
    held = make_corpus(cfg.seed + 1000, args.eval_clips or d.num_eval_clips, d.eval_clip_seconds,
                       d.num_classes, d.sample_rate_hz)
    save_corpus(out / "train.npz", train)
    save_corpus(out / "eval.npz", held)
    info = {"train_clips": len(train), "eval_clips": len(held), "seed": cfg.seed}
    _write_json(out / "manifest.json", info)
    return info


def cmd_train_slowae(args, cfg: Config, out: Path) -> dict:
    from .controller import TrajectoryLog, sign_flip_fraction
    from .plotting import plot_training
    from .slowae import SlowAE, controller_from_config, save_slowae, train
    from .synthetic import load_corpus

    if args.steps is not None:
        cfg.slowae.steps = args.steps
    if args.target_rate is not None:
        cfg.controller.target_rate_hz = args.target_rate
    clips = load_corpus(args.data)
    _torch_setup(cfg.seed)
    model = SlowAE(cfg.slowae, cfg.data.num_classes)
    result = train(model, clips, cfg, metrics_path=out / "metrics.csv")
    log = TrajectoryLog(out / "lambda.csv")
    for row in result.history:
        log.append(row["step"], row["lambda"], row["aer"])
    save_slowae(out / "slowae.ckpt", result, cfg)
    band = controller_from_config(cfg).band
    plot_training(result.history, cfg.controller.target_rate_hz, band, out / "training.png")
    tail = result.column("aer")[-min(100, len(result.history)):]
    summary = {"steps": result.step, "final_nll": result.history[-1]["nll"], "final_lambda": result.controller.lambda_,
               "trailing_aer": float(tail.mean()), "lambda_sign_flip_fraction": sign_flip_fraction(result.column("lambda"))}
    _write_json(out / "summary.json", summary)
    return summary


def _load_slowae_model(path):
    from .slowae import load_slowae
    result, cfg = load_slowae(path)
    model = result.shadow
    model.eval()
    return model, cfg


def cmd_extract_events(args, cfg: Config, out: Path) -> dict:
    from .slowae import encode_to_events
    from .synthetic import load_corpus
    model, _ = _load_slowae_model(args.model)
    clips = load_corpus(args.data)
    events_dir = out / "events"
    events_dir.mkdir(exist_ok=True)
    with open(out / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["file", "class_id", "change_points", "events", "duration_s"])
        for i, clip in enumerate(clips):
            events = encode_to_events(model, clip)
            name = f"clip_{i:05d}.vdrl"
            write_events(events_dir / name, events)
            writer.writerow([f"events/{name}", clip.class_id, len(clip.true_change_points), len(events),
                             repr(clip.duration_s)])
    return {"clips": len(clips)}


def _read_event_index(directory):
    directory = Path(directory)
    with open(directory / "index.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{directory}: empty event index")
    return [read_events(directory / r["file"]) for r in rows], [int(r["class_id"]) for r in rows]


def _event_split(args, cfg: Config):
    from .rlt import EventCorpus, EventVocabulary
    sequences, conditions = _read_event_index(args.events)
    first = sequences[0]
    vocab = EventVocabulary(first.num_channels, first.k, first.max_run_length,
                            max(cfg.data.num_classes, max(conditions) + 1))
    n_hold = max(1, int(round(len(sequences) * args.holdout_fraction)))
    if n_hold >= len(sequences):
        raise ValueError("holdout fraction leaves no training data")
    train = EventCorpus.build(sequences[:-n_hold], conditions[:-n_hold], vocab, cfg.rlt)
    hold = EventCorpus.build(sequences[-n_hold:], conditions[-n_hold:], vocab, cfg.rlt)
    return vocab, train, hold


def cmd_train_rlt(args, cfg: Config, out: Path) -> dict:
    from .plotting import plot_curves
    from .rlt import entropy_bound, make_model, save_rlt, train_rlt, write_curve
    if args.steps is not None:
        cfg.rlt.steps = args.steps
    _torch_setup(cfg.seed)
    vocab, train, hold = _event_split(args, cfg)
    model = make_model(cfg.rlt, vocab, cfg.seed)
    curve = train_rlt(model, train, seed=cfg.seed, holdout=hold, eval_every=args.eval_every)
    write_curve(out / "curve.csv", curve)
    plot_curves({"rlt": curve}, out / "curve.png")
    save_rlt(out / "rlt.ckpt", model, {"seed": cfg.seed, "steps": cfg.rlt.steps})
    bound = entropy_bound(model, hold)
    _write_json(out / "entropy.json", bound)
    return bound


def cmd_ablate(args, cfg: Config, out: Path) -> dict:
    from .plotting import plot_curves
    from .rlt import ablation_run, standard_variants
    if args.steps is not None:
        cfg.rlt.steps = args.steps
    _torch_setup(cfg.seed)
    vocab, train, hold = _event_split(args, cfg)
    variants = standard_variants(cfg.rlt)
    if args.variants:
        unknown = set(args.variants) - set(variants)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}; choose from {sorted(variants)}")
        variants = {k: variants[k] for k in args.variants}
    curves = ablation_run(variants, vocab, train, hold, steps=cfg.rlt.steps, seed=cfg.seed,
                          eval_every=args.eval_every, out_dir=out)
    plot_curves(curves, out / "ablation.png")
    summary = {name: curve[-1]["holdout_nll"] for name, curve in curves.items()}
    _write_json(out / "ablation.json", summary)
    return summary


def cmd_sample(args, cfg: Config, out: Path) -> dict:
    from .rlt import load_rlt, sample
    _torch_setup(cfg.seed)
    model, _ = load_rlt(args.model)
    model.eval()
    prompt = read_events(args.prompt) if args.prompt else None
    condition = None if args.condition < 0 else args.condition
    p = args.p if args.p is not None else cfg.rlt.nucleus_p
    events = sample(model, condition, args.num_events, p=p, seed=cfg.seed, prompt=prompt,
                    base_rate_hz=args.base_rate)
    write_events(out / "sample.vdrl", events)
    write_dense_csv(out / "sample.csv", interleaved_decode(events))
    return {"events": len(events)}


def cmd_encode(args, cfg: Config, out: Path) -> dict:
    dense = read_dense_csv(args.input, k=args.k, base_rate_hz=args.base_rate)
    events = interleaved_encode(dense, None, args.max_run_length)
    target = out / (Path(args.input).stem + ".vdrl")
    write_events(target, events)
    return {"events": len(events), "file": target.name}


def cmd_decode(args, cfg: Config, out: Path) -> dict:
    events = read_events(args.input)
    target = out / (Path(args.input).stem + ".csv")
    write_dense_csv(target, interleaved_decode(events))
    return {"file": target.name}


def cmd_eval(args, cfg: Config, out: Path) -> dict:
    from .codec import DenseCodes
    from .metrics import MetricsReport, barcode, correlation, event_code_bps, jump_histogram, reference_bit_rates
    from .plotting import plot_barcode, plot_correlation, plot_jump_histogram
    from .slowae import encode_levels
    from .synthetic import load_corpus

    model, mcfg = _load_slowae_model(args.model)
    clips = load_corpus(args.data)
    code_rate = model.code_rate(clips[0].sample_rate_hz)
    counts, cps, jumps, densities = [], [], np.zeros(2 * model.cfg.k, dtype=np.int64), None
    seconds = 0.0
    for i, clip in enumerate(clips):
        dense = DenseCodes(encode_levels(model, clip.samples), code_rate, model.cfg.k)
        events = interleaved_encode(dense, None, model.cfg.max_run_length)
        counts.append(len(events))
        cps.append(len(clip.true_change_points))
        jumps += jump_histogram(dense)
        seconds += dense.duration_s
        if i == 0:
            densities = barcode(events, args.bin_width, dense.duration_s)
            times = events.with_structure().offsets / code_rate
            plot_barcode(clip.samples, clip.sample_rate_hz, times, clip.true_change_points, out / "barcode.png")
    extras = {"clips": len(clips), "events_per_s": sum(counts) / seconds}
    try:
        pearson, spearman = correlation(counts, cps)
    except ValueError as exc:
        pearson = spearman = None
        extras["correlation_note"] = str(exc)
    rates = reference_bit_rates()
    rates["events_measured"] = event_code_bps(sum(counts) / seconds, model.cfg.k, model.cfg.max_run_length)
    report = MetricsReport(pearson, spearman, jumps.tolist(), densities.tolist(), rates, extras)
    _write_json(out / "report.json", report.to_dict())
    with open(out / "counts.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["clip", "events", "change_points"])
        writer.writerows([i, c, p] for i, (c, p) in enumerate(zip(counts, cps)))
    plot_correlation(counts, cps, pearson, spearman, out / "correlation.png")
    plot_jump_histogram(jumps, out / "jumps.png")
    return {"pearson": pearson, "spearman": spearman}


def cmd_grad_check(args, cfg: Config, out: Path) -> dict:
    import torch
    from .slowae import SlowAE, gradient_check, stack_batch, train
    from .synthetic import make_corpus

    _torch_setup(cfg.seed)
    if args.model:
        model, cfg = _load_slowae_model(args.model)
    else:
        cfg.slowae = dataclasses.replace(cfg.slowae, width=8, channels=2, encoder_blocks=1, cond_blocks=1,
                                         decoder_dilations=(1, 2), batch_size=4)
        clips = make_corpus(cfg.seed, 4, 0.128, cfg.data.num_classes, cfg.data.sample_rate_hz)
        model = train(SlowAE(cfg.slowae, cfg.data.num_classes), clips, cfg, steps=args.warmup_steps).model
    clips = make_corpus(cfg.seed + 7, 2, 0.128, cfg.data.num_classes, cfg.data.sample_rate_hz)
    audio, class_ids = stack_batch(clips, cfg.slowae.downsample)
    noise = torch.from_numpy(np.random.default_rng(cfg.seed).normal(0.0, cfg.slowae.noise_sigma, audio.shape))
    report = gradient_check(model, audio, class_ids, lam=1.0, noise=noise, max_per_group=args.max_per_group,
                            seed=cfg.seed)
    result = {**report.to_dict(), "tolerance": args.tolerance,
              "passed": report.max_rel_error < args.tolerance and report.straight_through_error < args.tolerance}
    _write_json(out / "grad_check.json", result)
    if not result["passed"]:
        raise CheckFailed(f"max relative error {report.max_rel_error:.3e} exceeds {args.tolerance:.1e}")
    return {"max_rel_error": report.max_rel_error, "straight_through_error": report.straight_through_error}


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vdrl", description="Slow autoencoder and run-length transformer toolkit.")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic training and evaluation corpus")
    p.add_argument("--train-clips", type=int, default=None)
    p.add_argument("--eval-clips", type=int, default=None)

    p = add("train-slowae", cmd_train_slowae, "train the slow autoencoder")
    p.add_argument("--data", type=Path, required=True, help="corpus .npz")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--target-rate", type=float, default=None, help="target events per second")

    p = add("extract-events", cmd_extract_events, "encode a corpus into event files")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    for name, func, text in (("train-rlt", cmd_train_rlt, "train a run-length transformer"),
                             ("ablate", cmd_ablate, "compare embedding configurations")):
        p = add(name, func, text)
        p.add_argument("--events", type=Path, required=True, help="directory written by extract-events")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--holdout-fraction", type=float, default=0.2)
        p.add_argument("--eval-every", type=int, default=100)
        if name == "ablate":
            p.add_argument("--variants", nargs="*", default=None)

    p = add("sample", cmd_sample, "sample events from a trained transformer")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--condition", type=int, default=-1, help="class id; negative selects the catch-all")
    p.add_argument("--p", type=float, default=None, help="nucleus mass")
    p.add_argument("--num-events", type=int, default=64)
    p.add_argument("--prompt", type=Path, default=None)
    p.add_argument("--base-rate", type=float, default=250.0)

    p = add("encode", cmd_encode, "dense code CSV to an event file")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--base-rate", type=float, default=250.0)
    p.add_argument("--max-run-length", type=int, default=256)

    p = add("decode", cmd_decode, "event file to a dense code CSV")
    p.add_argument("--input", type=Path, required=True)

    p = add("eval", cmd_eval, "metrics report for a trained autoencoder on a corpus")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bin-width", type=float, default=0.05, help="barcode bin width in seconds")

    p = add("grad-check", cmd_grad_check, "compare autograd with finite differences")
    p.add_argument("--model", type=Path, default=None, help="checkpoint; default is a small fresh model")
    p.add_argument("--max-per-group", type=int, default=200)
    p.add_argument("--warmup-steps", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    try:
        cfg = _settings(args)
        args.out.mkdir(parents=True, exist_ok=True)
        result = args.func(args, cfg, args.out)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except CheckpointVersionError as exc:
        return _fail("checkpoint_version", EXIT_CHECKPOINT_VERSION, exc)
    except CheckFailed as exc:
        return _fail("check_failed", EXIT_CHECK_FAILED, exc)
    except (CheckpointError, CodecError, OSError, ValueError, KeyError) as exc:
        return _fail("input", EXIT_INPUT, exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(type(exc).__name__, EXIT_FAILED, exc)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
