"""Command-line entry point: ``rfsep <command> [options]``.

Exit status: 0 on success, 2 on invalid input (bad config, unknown query,
malformed audio), 1 on any other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import config as C
from . import experiment as E

log = logging.getLogger("rfsep")

VALIDATION_ERRORS = (C.ConfigError, ValueError, KeyError)


def _config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.preset(args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    print(E.gen_dataset(cfg, out))


def cmd_train_vae(args):
    print(E.train_vae(_config(args), _out(args), args.manifest, args.steps))


def cmd_train_flow(args):
    print(E.train_separator("flow", _config(args), _out(args), args.manifest, args.steps))


def cmd_train_diffusion(args):
    print(E.train_separator("diffusion", _config(args), _out(args), args.manifest, args.steps))


def cmd_train_classifier(args):
    print(E.train_classifier(_config(args), _out(args), args.manifest))


def cmd_separate(args):
    sep = E.load_separator(args.checkpoint)
    out = _out(args)
    stem = Path(args.mixture).stem
    wav = out / f"{stem}.estimate.wav"
    E.separate_file(sep, Path(args.mixture), args.query, args.steps or sep.cfg.flow.sample_steps, wav,
                    seed=args.seed, png=out / f"{stem}.estimate.mel.png",
                    target_wav=Path(args.target) if args.target else None,
                    dump=out / f"{stem}.intermediates.npz" if args.dump else None)
    print(wav)


def cmd_evaluate(args):
    out = _out(args)
    report = E.evaluate(args.checkpoint, out, args.manifest, args.steps, args.split)
    kind = report["checkpoint"]["kind"]
    for row in ("unprocessed", kind):
        r = report[row]
        print(f"{row:12s} frechet={r['frechet_proxy']:.4f} lsd_median={r['lsd_db']['median']:.3f}dB "
              f"si_sdr_mean={r['si_sdr_db']['mean']:.2f}dB consistency={r['consistency']['mean']:.3f}")


def cmd_bench_steps(args):
    out = _out(args)
    rows = E.bench_steps(args.flow, args.diffusion, out, args.manifest)
    for r in rows:
        print(f"{r['model']:12s} N={r['steps']:4d} sampler={r['sampler_s']:.4f}s decode={r['decode_s']:.4f}s "
              f"frechet={r['frechet_proxy']:.4f} consistency={r['consistency']:.3f}")


def cmd_selftest(args):
    from .selftest import run

    results = run()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise RuntimeError("selftest failed")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON (keys override its preset)")
    common.add_argument("--preset", default="desk", choices=sorted(C.PRESETS), help="preset used when no --config is given")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rfsep", description="Query-conditioned source separation by rectified flow matching.")
    p.add_argument("--version", action="version", version=f"rfsep {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="synthesise sources and write mixtures + manifest")
    s.set_defaults(func=cmd_gen_data)

    for name, func, what in (("train-vae", cmd_train_vae, "the mel VAE"),
                             ("train-flow", cmd_train_flow, "the flow-matching separator"),
                             ("train-diffusion", cmd_train_diffusion, "the diffusion baseline"),
                             ("train-classifier", cmd_train_classifier, "the evaluation query classifier")):
        s = sub.add_parser(name, parents=[common], help=f"train {what} (resumes from OUT if possible)")
        s.add_argument("--manifest", type=Path)
        if name != "train-classifier":
            s.add_argument("--steps", type=int, help="stop at this total step count")
        s.set_defaults(func=func)

    s = sub.add_parser("separate", parents=[common], help="extract the queried source from a mixture WAV")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("mixture", type=Path)
    s.add_argument("query")
    s.add_argument("--steps", type=int, help="sampler steps (default: the checkpoint config)")
    s.add_argument("--target", help="clean target WAV, shown as the third spectrogram panel")
    s.add_argument("--dump", action="store_true", help="also save intermediate mels and latents (.npz)")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("evaluate", parents=[common], help="metrics report for a checkpoint on a manifest split")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--manifest", type=Path)
    s.add_argument("--split", choices=E.SPLITS)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench-steps", parents=[common], help="quality and wall-clock against inference steps")
    s.add_argument("flow", type=Path)
    s.add_argument("diffusion", type=Path, nargs="?")
    s.add_argument("--manifest", type=Path)
    s.set_defaults(func=cmd_bench_steps)

    s = sub.add_parser("selftest", parents=[common], help="fast internal consistency checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except E.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
