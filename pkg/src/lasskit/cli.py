"""``lasskit`` command-line entry point.

Exit codes: 0 success, 1 partial failure (or a failed check), 2 invalid input
or configuration. Every command that produces files also writes a run
manifest recording the effective configuration, seed and versions.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("lasskit")

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2


class CliError(Exception):
    """Invalid input or configuration (exit code 2)."""


def _floats(text: str) -> tuple[float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two numbers 'lo,hi', got {text!r}")
    return float(parts[0]), float(parts[1])


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="optional INI-style config file ([global] and per-command sections)")
    p.add_argument("--seed", type=int, help="master seed (falls back to $LASSKIT_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    from .bench import PROTOCOLS

    parser = argparse.ArgumentParser(prog="lasskit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lasskit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("mix", help="mix two files at a requested SNR")
    p.add_argument("target")
    p.add_argument("interferer")
    p.add_argument("--snr", type=float, required=True, help="target-to-interferer SNR in dB")
    p.add_argument("--target-lufs", type=float, help="loudness-normalise the target before mixing")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("bench-build", help="build a benchmark set from a corpus manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--seg-seconds", type=float, default=5.0)
    p.add_argument("--clean-ids", help="comma-separated ids or @file with one id per line (lufs)")
    p.add_argument("--n-per", type=int, default=5)
    p.add_argument("--lufs-range", type=_floats, default=(-35.0, -25.0))
    p.add_argument("--n-targets", type=int)
    p.add_argument("--n-total", type=int, default=100)
    p.add_argument("--snr-range", type=_floats, default=(-15.0, 15.0))
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="train (or resume) a separator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-manifest")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--segment-seconds", type=float, default=1.0)
    p.add_argument("--snr-range", type=_floats, default=(-15.0, 15.0))
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--channels", type=_ints, default=(8, 16, 32))
    p.add_argument("--units-per-block", type=int, default=2)
    p.add_argument("--bottleneck-blocks", type=int, default=2)
    p.add_argument("--d-query", type=int, default=64)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--window-size", type=int)
    p.add_argument("--hop-size", type=int)

    p = sub.add_parser("separate", help="extract the queried source from a mixture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--embeddings", help="external query embeddings (JSONL or .npz)")

    p = sub.add_parser("evaluate", help="score a model, the oracle or pass-through on benchmark sets")
    p.add_argument("--set", action="append", required=True, dest="sets", help="set directory, optionally NAME=DIR")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint")
    who.add_argument("--oracle", action="store_true")
    who.add_argument("--passthrough", action="store_true")
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--system", help="row label in the markdown table")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-ssnr", action="store_true")

    p = sub.add_parser("grad-check", help="finite-difference check of the tiny model's gradients")
    p.add_argument("--n-params", type=int, default=200)
    p.add_argument("--corrupt", type=int, help="inject a fault into the N-th checked gradient")
    p.add_argument("--out", help="directory for the result and run manifest")

    p = sub.add_parser("embed-import", help="convert external embedding JSONL into a table file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help=".npz output path")

    p = sub.add_parser("toy-corpus", help="write the two-class synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=16)
    p.add_argument("--clip-seconds", type=float, default=2.0)
    p.add_argument("--sample-rate", type=int, default=8000)

    for sp in sub.choices.values():
        _add_common(sp)
    return parser


# -- configuration ----------------------------------------------------------


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
    if isinstance(action, argparse._CountAction):
        return int(raw)
    if isinstance(action, argparse._AppendAction):
        return [v.strip() for v in raw.split(",") if v.strip()]
    if action.type is not None:
        return action.type(raw)
    return raw


def _config_defaults(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise CliError(f"config file {path} not found")
    values = {}
    for section in ("global", command):
        if cp.has_section(section):
            values.update(cp.items(section))
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            if cp.has_section(command) and key in cp[command]:
                raise CliError(f"unknown key {key!r} in [{command}] of {path}")
            continue
        try:
            out[dest] = _convert(actions[dest], raw)
        except (ValueError, KeyError, argparse.ArgumentTypeError) as e:
            raise CliError(f"bad value for {key!r} in {path}: {e}") from None
    return out


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Flags win over the config file, which wins over built-in defaults."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if known.config and command:
        sub = subs[command]
        defaults = _config_defaults(known.config, command, sub)
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get("LASSKIT_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise CliError(f"LASSKIT_SEED must be an integer, got {env!r}") from None
    return args


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    return v


def write_run_manifest(path: str | Path, args: argparse.Namespace, extra: dict | None = None) -> Path:
    import scipy
    import torch

    doc = {
        "command": args.command,
        "argv": list(getattr(args, "_argv", [])),
        "config": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if not k.startswith("_")},
        "seed": args.seed,
        "versions": {
            "lasskit": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
        "started_unix": getattr(args, "_started", None),
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- commands ---------------------------------------------------------------


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} {path} does not exist")
    return p


def cmd_mix(args) -> int:
    from .audio import AudioClip, read_wav, resample, write_wav
    from .bench import fit_length
    from .mixing import clip_guard, loudness_gain, measured_snr, mix_at_snr

    s1 = read_wav(_require_file(args.target, "target"))
    s2 = resample(read_wav(_require_file(args.interferer, "interferer")), s1.sample_rate)
    rng = np.random.default_rng(args.seed)
    s2 = fit_length(s2, len(s1), rng)
    if args.target_lufs is not None:
        s1 = s1.scaled(loudness_gain(s1, args.target_lufs))
    res = mix_at_snr(s1, s2, args.snr)
    mixture, scale = clip_guard(res.mixture)
    target = res.target.scaled(scale)
    interferer = res.interferer_scaled.scaled(scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_wav(out / "mixture.wav", mixture)
    write_wav(out / "target.wav", target)
    write_wav(out / "interferer.wav", interferer)
    sidecar = {
        "alpha": res.alpha,
        "snr_db": args.snr,
        "measured_snr_db": measured_snr(target, AudioClip(mixture.samples - target.samples, mixture.sample_rate)),
        "clip_guard_scale": scale,
        "seed": args.seed,
        "sample_rate": s1.sample_rate,
        "target": str(args.target),
        "interferer": str(args.interferer),
    }
    (out / "mix.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_run_manifest(out / "run.json", args)
    print(json.dumps(sidecar, sort_keys=True))
    return EXIT_OK


def _clean_ids(spec: str | None) -> list[str]:
    if not spec:
        raise CliError("--clean-ids is required for the lufs protocol")
    if spec.startswith("@"):
        return [ln.strip() for ln in Path(spec[1:]).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [s.strip() for s in spec.split(",") if s.strip()]


def cmd_bench_build(args) -> int:
    from . import bench
    from .corpus import load_manifest

    corpus = load_manifest(_require_file(args.manifest, "manifest"))
    common = dict(seed=args.seed, sample_rate=args.sample_rate, out_dir=args.out, jobs=args.jobs)
    if args.protocol == "0db":
        bset = bench.build_pairs_0db(corpus, args.per_class, args.seg_seconds, **common)
    elif args.protocol == "lufs":
        ids = _clean_ids(args.clean_ids)
        missing = [i for i in ids if i not in {it.id for it in corpus.items}]
        if missing:
            raise CliError(f"clean ids not in the manifest: {', '.join(missing)}")
        bset = bench.build_pairs_lufs(corpus, ids, args.n_per, tuple(args.lufs_range), **common)
    elif args.protocol == "caption":
        bset = bench.build_pairs_caption(corpus, args.n_per, n_targets=args.n_targets, **common)
    elif args.protocol == "concat":
        bset = bench.build_pairs_concat(corpus, args.n_per, n_targets=args.n_targets, **common)
    else:
        bset = bench.build_pairs_snr_range(corpus, args.n_total, tuple(args.snr_range), **common)
    write_run_manifest(Path(args.out) / "run.json", args, {"records": len(bset.records), "skipped": len(bset.skipped)})
    print(f"{len(bset.records)} records written to {args.out}" + (f" ({len(bset.skipped)} skipped)" if bset.skipped else ""))
    return EXIT_PARTIAL if bset.skipped else EXIT_OK


def cmd_train(args) -> int:
    from .corpus import load_manifest
    from .dsp import StftConfig
    from .model import ModelConfig
    from .training import TrainConfig, TrainingDiverged, train

    corpus = load_manifest(_require_file(args.manifest, "manifest"))
    eval_corpus = load_manifest(_require_file(args.eval_manifest, "eval manifest")) if args.eval_manifest else None
    if args.resume:
        _require_file(args.resume, "checkpoint")
    channels = tuple(args.channels)
    scaled = StftConfig.for_rate(args.sample_rate)
    model_cfg = ModelConfig(
        n_encoder_blocks=len(channels),
        n_bottleneck_blocks=args.bottleneck_blocks,
        channels=channels,
        units_per_block=args.units_per_block,
        d_query=args.d_query,
        film_hidden=args.d_query,
        sample_rate=args.sample_rate,
        window_size=args.window_size or scaled.window_size,
        hop_size=args.hop_size or scaled.hop_size,
    )
    cfg = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        segment_seconds=args.segment_seconds,
        snr_range_db=tuple(args.snr_range),
        max_steps=args.max_steps,
        seed=args.seed,
        eval_every=args.eval_every,
        checkpoint_every=args.checkpoint_every,
    )
    out = Path(args.out)
    write_run_manifest(out / "run.json", args, {"model_config": model_cfg.to_dict(), "train_config": cfg.to_dict()})
    try:
        res = train(corpus, model_cfg, cfg, out, eval_corpus=eval_corpus, resume=args.resume)
    except TrainingDiverged as e:
        logger.error("%s", e)
        return EXIT_PARTIAL
    msg = f"trained to step {res.steps}; checkpoint {res.checkpoint}"
    if res.last_eval_sdri is not None:
        msg += f"; eval SDRi {res.last_eval_sdri:.2f} dB"
    if res.best_checkpoint is not None:
        msg += f"; best {res.best_eval_sdri:.2f} dB in {res.best_checkpoint}"
    print(msg)
    return EXIT_OK


def _load_model(path: str):
    from .checkpoint import load_checkpoint

    try:
        model, _, _ = load_checkpoint(_require_file(path, "checkpoint"))
    except (ValueError, KeyError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from None
    return model


def _external(path: str | None):
    from .query import load_external_embeddings

    return load_external_embeddings(_require_file(path, "embeddings file")) if path else None


def cmd_separate(args) -> int:
    from .audio import read_wav, write_wav
    from .bench import model_estimator

    model = _load_model(args.checkpoint)
    clip = read_wav(_require_file(args.input, "input"))
    est = model_estimator(model, _external(args.embeddings))(clip, clip, args.query)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out, est)
    write_run_manifest(out.with_name(out.name + ".run.json"), args)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from . import bench

    if args.checkpoint:
        estimator = bench.model_estimator(_load_model(args.checkpoint), _external(args.embeddings))
        system = args.system or Path(args.checkpoint).stem
    elif args.oracle:
        estimator, system = bench.oracle_estimator(), args.system or "oracle"
    else:
        estimator, system = bench.passthrough_estimator, args.system or "passthrough"

    reports = {}
    for entry in args.sets:
        name, _, directory = entry.rpartition("=")
        directory = Path(directory)
        if not (directory / "set.json").is_file():
            raise CliError(f"{directory} is not a benchmark set (no set.json)")
        bset = bench.BenchmarkSet.load(directory)
        reports[name or directory.name] = bench.evaluate(estimator, bset, name or directory.name, args.jobs, not args.no_ssnr)

    total_failed = sum(r.n_failed for r in reports.values())
    for name, r in reports.items():
        if r.n_failed:
            logger.warning("%s: %d of %d record(s) failed", name, r.n_failed, r.n_failed + r.count)
    usable = {n: r for n, r in reports.items() if r.count}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out / "run.json", args, {"failed": total_failed})
    if not usable:
        logger.error("every record failed; no report written")
        return EXIT_PARTIAL
    bench.emit_report(usable, "csv", out / "report.csv")
    bench.emit_report(usable, "json", out / "report.json")
    table = bench.emit_report(usable, "markdown", out / "report.md", system=system)
    print(table, end="")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .training import grad_check_tiny

    res = grad_check_tiny(seed=args.seed, n_params=args.n_params, corrupt=args.corrupt)
    doc = {
        "max_rel_error": res.max_rel_error,
        "checked": res.checked,
        "skipped_at_kinks": res.skipped,
        "worst_parameter": res.worst_parameter,
        "tolerance": res.tolerance,
        "passed": res.passed,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grad_check.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_run_manifest(out / "run.json", args)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK if res.passed else EXIT_PARTIAL


def cmd_embed_import(args) -> int:
    from .query import load_external_embeddings, save_embedding_table

    table = load_external_embeddings(_require_file(args.input, "embeddings file"))
    if not table:
        raise CliError(f"{args.input} contains no embeddings")
    out = Path(args.out)
    if out.suffix != ".npz":
        raise CliError("embedding table output must end in .npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embedding_table(out, table)
    write_run_manifest(out.with_name(out.name + ".run.json"), args, {"entries": len(table)})
    print(f"{len(table)} embeddings written to {out}")
    return EXIT_OK


def cmd_toy_corpus(args) -> int:
    from .toy import make_toy_corpus

    path = make_toy_corpus(args.out, args.per_class, args.clip_seconds, args.sample_rate, seed=args.seed)
    write_run_manifest(Path(args.out) / "run.json", args)
    print(path)
    return EXIT_OK


COMMANDS = {
    "mix": cmd_mix,
    "bench-build": cmd_bench_build,
    "train": cmd_train,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    "embed-import": cmd_embed_import,
    "toy-corpus": cmd_toy_corpus,
}


def main(argv: list[str] | None = None) -> int:
    from .mixing import SilentSource
    from .query import UnknownQuery

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code not in (0, None) else EXIT_OK
    except CliError as e:
        print(f"lasskit: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    args._argv = argv
    args._started = time.time()
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"lasskit: error: {e}", file=sys.stderr)
    except (SilentSource, UnknownQuery) as e:
        print(f"lasskit: error: {type(e).__name__}: {e}", file=sys.stderr)
    except (ValueError, FileNotFoundError) as e:
        print(f"lasskit: error: {e}", file=sys.stderr)
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
