"""``ipsfuse`` command line: synthesize, train, fuse, eval, selftest.

Options come from three layers: built-in defaults, an optional flat
``key=value`` file given with ``--config``, then explicit flags. Keys in the
file use the flag names with dashes or underscores. The resolved options are
logged to stderr before any work starts.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics as metrics_mod
from . import selftest, ssm
from .autodiff import NonFiniteError, no_grad
from .checkpoint import CheckpointError
from .imageio import IMAGE_SUFFIXES, ImageFormatError, read_image, write_image
from .network import ModelConfig, forward
from .shuffle import ShuffleConfig, synthesize
from .trainer import TrainConfig, TrainingDivergedError, load_model, run_training

log = logging.getLogger("ipsfuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("IPSFUSE_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"IPSFUSE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"IPSFUSE_THREADS must be a positive integer, got {raw!r}")
    return n


def read_config_file(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file. Blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _validated(cfg):
    """Config validation failures are usage errors, not data errors."""
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _suffix(img: np.ndarray) -> str:
    return ".pgm" if img.shape[2] == 1 else ".ppm"


# ----------------------------------------------------------- synthesize

def file_stream(stem: str) -> int:
    return zlib.crc32(stem.encode("utf-8"))


def synthesize_image(img: np.ndarray, stem: str, seed: int, cfg: ShuffleConfig):
    """Shuffle one image with the generator ``default_rng([seed, crc32(stem)])``."""
    return synthesize(img, cfg, np.random.default_rng([seed, file_stream(stem)]))


def replay_entry(img: np.ndarray, entry: dict):
    """Rebuild a sample from one manifest entry."""
    cfg = ShuffleConfig(
        mask_zero_probability=entry["p"],
        filter_kind=entry["filter"],
        kernel_range=tuple(entry["kernel_range"]),
        swap=entry["swap"],
    )
    return synthesize(img, cfg, np.random.default_rng([entry["seed"], entry["stream"]]))


def cmd_synthesize(args) -> int:
    src_dir, out_dir = Path(args.input_dir), Path(args.out_dir)
    files = _list_images(src_dir)
    if not files:
        raise DataError(f"no .pgm/.ppm images in {src_dir}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc}") from None
    cfg = _validated(ShuffleConfig(args.p, args.filter, (args.kernel_min, args.kernel_max), args.swap))

    def one(path: Path) -> dict:
        img = read_image(path)
        s = synthesize_image(img, path.stem, args.seed, cfg)
        ext = _suffix(img)
        write_image(out_dir / f"{path.stem}_f{ext}", s.shuffled_f)
        write_image(out_dir / f"{path.stem}_d{ext}", s.shuffled_d)
        write_image(out_dir / f"{path.stem}_mask{ext}", s.mask)
        write_image(out_dir / f"{path.stem}_filtered{ext}", s.filtered)
        return {
            "source": path.name,
            "seed": args.seed,
            "stream": file_stream(path.stem),
            "p": cfg.mask_zero_probability,
            "filter": cfg.filter_kind,
            "kernel_range": list(cfg.kernel_range),
            "kernel": s.kernel,
            "swap": cfg.swap,
            "swapped": s.swapped,
        }

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        entries = list(pool.map(one, files))
    manifest = {"seed": args.seed, "files": {e["source"]: e for e in entries}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    log.info("synthesized %d image(s) into %s", len(entries), out_dir)
    return EXIT_OK


# ----------------------------------------------------------------- train

def cmd_train(args) -> int:
    shuffle_cfg = ShuffleConfig(args.p, args.filter, (args.kernel_min, args.kernel_max), True, args.seed)
    train_cfg = _validated(TrainConfig(
        total_iters=args.iters,
        batch_size=args.batch_size,
        base_lr=args.lr,
        decay_start=args.decay_start,
        crop_size=args.crop,
        shuffle=shuffle_cfg,
        checkpoint_interval=args.checkpoint_interval,
        rng_seed=args.seed,
    ))
    model_cfg = _validated(ModelConfig(
        base_channels=args.base_channels,
        local_blocks=args.local_blocks,
        global_blocks=args.global_blocks,
        ssm_state_size=args.state_size,
        mlp_expansion=args.mlp_expansion,
        scan_order=args.scan_order,
        dtype=args.dtype,
    ))
    final, log_path = run_training(args.corpus_dir, args.out_dir, train_cfg, model_cfg,
                                   resume=args.resume, stop_after=args.stop_after)
    if final.exists():
        log.info("final checkpoint %s; loss log %s", final, log_path)
    else:
        log.info("stopped early; loss log %s", log_path)
    return EXIT_OK


# ------------------------------------------------------------------ fuse

def cmd_fuse(args) -> int:
    model, _ = load_model(args.checkpoint)
    a, b = read_image(args.image_a), read_image(args.image_b)
    if a.shape != b.shape:
        raise DataError(f"source images differ in shape: {a.shape} vs {b.shape}")
    if a.shape[2] != model.cfg.image_channels:
        raise DataError(
            f"checkpoint expects {model.cfg.image_channels} channel(s), images have {a.shape[2]}"
        )
    t0 = time.perf_counter()
    with no_grad():
        out = forward(model, a, b).data[0].astype(np.float64)
    elapsed = time.perf_counter() - t0
    write_image(args.out, out)
    print(f"{args.out}\t{elapsed:.3f}s")
    return EXIT_OK


# ------------------------------------------------------------------ eval

def _index(path: Path) -> dict[str, Path]:
    if path.is_file():
        return {path.stem: path}
    return {p.stem: p for p in _list_images(path)}


def _match(fused: dict, other: dict, what: str) -> None:
    missing = sorted(set(fused) - set(other))
    extra = sorted(set(other) - set(fused))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"fused images without {what}: {', '.join(missing)}")
        if extra:
            parts.append(f"{what} without fused image: {', '.join(extra)}")
        raise DataError("unpaired files; " + "; ".join(parts))


def cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = sorted(set(wanted) - set(metrics_mod.METRICS))
    if not wanted or unknown:
        raise UsageError(f"--metrics must list names from {', '.join(metrics_mod.METRICS)}; got {args.metrics!r}")
    fused_paths = _index(Path(args.fused))
    if not fused_paths:
        raise DataError(f"no images found at {args.fused}")
    needs_ref = any(m in metrics_mod.REFERENCE_METRICS for m in wanted)
    needs_src = any(m in metrics_mod.SOURCE_METRICS for m in wanted)
    if needs_ref and not args.references:
        raise UsageError("--references is required for psnr/ssim")
    if needs_src and not (args.sources_a and args.sources_b):
        raise UsageError("--sources-a and --sources-b are required for q_mi/q_abf")

    jobs = {("fused", k): p for k, p in fused_paths.items()}
    if needs_ref:
        refs = _index(Path(args.references))
        _match(fused_paths, refs, "reference")
        jobs.update({("ref", k): p for k, p in refs.items()})
    if needs_src:
        src_a, src_b = _index(Path(args.sources_a)), _index(Path(args.sources_b))
        _match(fused_paths, src_a, "source A")
        _match(fused_paths, src_b, "source B")
        jobs.update({("a", k): p for k, p in src_a.items()})
        jobs.update({("b", k): p for k, p in src_b.items()})

    keys = list(jobs)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        loaded = dict(zip(keys, pool.map(read_image, [jobs[k] for k in keys])))
    fused = {k: loaded["fused", k] for k in fused_paths}
    references = {k: loaded["ref", k] for k in fused_paths} if needs_ref else None
    sources = {k: (loaded["a", k], loaded["b", k]) for k in fused_paths} if needs_src else None

    report = metrics_mod.evaluate(fused, wanted, references=references, sources=sources)
    report.write(args.out, args.json)
    for image_id, reasons in report.failures.items():
        for m, why in reasons.items():
            log.warning("%s: %s failed: %s", image_id, m, why)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# -------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    discretize = ssm.zoh_discretize_unscaled if args.zoh == "unscaled" else ssm.zoh_discretize
    t0 = time.perf_counter()
    results = selftest.run_selftest(args.seed, discretize)
    print(selftest.format_results(results))
    log.info("selftest finished in %.1fs", time.perf_counter() - t0)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ipsfuse", description="Multi-focus fusion trained on pixel-shuffled single images.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key=value file; explicit flags win")
        p.add_argument("--seed", type=int, default=0)

    def shuffle_opts(p):
        p.add_argument("--p", type=float, default=0.5, help="probability that a mask entry is 0")
        p.add_argument("--filter", choices=["mean", "gaussian", "median"], default="mean")
        p.add_argument("--kernel-min", type=int, default=3)
        p.add_argument("--kernel-max", type=int, default=31)

    p = sub.add_parser("synthesize", help="write shuffled pairs, masks and a manifest")
    p.add_argument("input_dir")
    p.add_argument("out_dir")
    common(p)
    shuffle_opts(p)
    p.add_argument("--swap", action=argparse.BooleanOptionalAction, default=False,
                   help="randomly swap the two outputs")
    p.set_defaults(func=cmd_synthesize)

    d_model, d_train = ModelConfig(), TrainConfig()
    p = sub.add_parser("train", help="train a fusion model on a folder of sharp images")
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    common(p)
    shuffle_opts(p)
    p.add_argument("--iters", type=int, default=d_train.total_iters)
    p.add_argument("--batch-size", type=int, default=d_train.batch_size)
    p.add_argument("--lr", type=float, default=d_train.base_lr)
    p.add_argument("--decay-start", type=float, default=d_train.decay_start)
    p.add_argument("--crop", type=int, default=d_train.crop_size)
    p.add_argument("--checkpoint-interval", type=int, default=d_train.checkpoint_interval)
    p.add_argument("--base-channels", type=int, default=d_model.base_channels)
    p.add_argument("--local-blocks", type=int, default=d_model.local_blocks)
    p.add_argument("--global-blocks", type=int, default=d_model.global_blocks)
    p.add_argument("--state-size", type=int, default=d_model.ssm_state_size)
    p.add_argument("--mlp-expansion", type=int, default=d_model.mlp_expansion)
    p.add_argument("--scan-order", choices=["row_major", "bidirectional_row_major"], default=d_model.scan_order)
    p.add_argument("--dtype", choices=["float32", "float64"], default=d_model.dtype)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this many total iterations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse two source images with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("out")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score fused images")
    p.add_argument("fused", help="fused image file or directory")
    common(p)
    p.add_argument("--references")
    p.add_argument("--sources-a")
    p.add_argument("--sources-b")
    p.add_argument("--metrics", default=",".join(metrics_mod.METRICS))
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the fast invariant checks")
    common(p)
    p.add_argument("--zoh", choices=["exact", "unscaled"], default="exact",
                   help="discretization under test; 'unscaled' is a negative control")
    p.set_defaults(func=cmd_selftest)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(sp: argparse.ArgumentParser, path: str) -> None:
    """Turn config-file entries into parser defaults so flags still override them."""
    actions = {a.dest: a for a in sp._actions if a.option_strings and a.dest not in ("help", "config")}
    updates = {}
    for key, raw in read_config_file(path).items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"{path}: unknown option {key!r} for this command")
        if isinstance(action, argparse.BooleanOptionalAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}: {key} expects a boolean, got {raw!r}")
            updates[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError(f"{path}: bad value for {key}: {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key} must be one of {list(action.choices)}, got {raw!r}")
        updates[key] = value
    sp.set_defaults(**updates)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(_subparser(parser, args.command), args.config)
        args = parser.parse_args(argv)
    return args


def resolved_options(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"ipsfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    log.info("resolved options: %s", json.dumps(resolved_options(args), sort_keys=True))
    try:
        n = worker_count()
        with threadpool_limits(limits=n):
            return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NonFiniteError, TrainingDivergedError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ImageFormatError, CheckpointError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
