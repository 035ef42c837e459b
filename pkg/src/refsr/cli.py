"""``refsr`` command line: synth, train, adapt, infer, eval, gradcheck, bench-match.

Every subcommand accepts ``--config file.json``; keys must be known option
names (dashes or underscores), and explicit flags override file values. The
effective configuration is logged as JSON before any work starts.

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

log = logging.getLogger("refsr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# option tables; the config file may set any of these


def _train_options():
    from .pipeline.train import TrainConfig
    opts = {}
    for f in fields(TrainConfig):
        if f.name == "model":
            opts["model"] = (json.loads, {}, "JSON object of model overrides")
        else:
            default = f.default
            opts[f.name] = (type(default), default, None)
    return opts


def _path(s):
    return Path(s) if s is not None else None


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes"):
        return True
    if str(s).lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _options(command):
    paths = {
        "synth": {"seed": (int, 0, None), "n": (int, 8, None), "extent": (int, 64, None),
                  "out": (_path, None, "output dataset directory")},
        "train": {**_train_options(), "data": (_path, None, "training dataset directory"),
                  "eval_data": (_path, None, "evaluation dataset directory"),
                  "out": (_path, None, "run directory")},
        "adapt": {**_train_options(), "checkpoint": (_path, None, None),
                  "data": (_path, None, "directory of pair_*/ with lr.png (wide) and ref.png (tele)"),
                  "out": (_path, None, "run directory")},
        "infer": {"lr": (_path, None, None), "ref": (_path, None, None),
                  "checkpoint": (_path, None, None), "out": (_path, Path("sr.png"), None),
                  "search": (str, "full", None), "fusion_mode": (str, None, None),
                  "debug_dir": (_path, None, "also write ref_matched / aligned / hf dumps here")},
        "eval": {"data": (_path, None, None), "checkpoint": (_path, None, None),
                 "pred": (_path, None, "directory of pair_*/sr.png to score instead of a model"),
                 "search": (str, "full", None), "save": (_bool, False, "write sr.png into each pair")},
        "gradcheck": {"seed": (int, 1, None), "instances": (int, 20, None)},
        "bench-match": {"sizes": (str, "16,32,48", "comma-separated LR grid extents"),
                        "channels": (int, 16, None), "variants": (str, "full,tiled", None),
                        "tile": (int, 32, None), "margin": (int, 8, None),
                        "repeats": (int, 3, None), "seed": (int, 0, None),
                        "out": (_path, None, "CSV path (stdout if omitted)")},
    }
    return paths[command]


REQUIRED = {"synth": ("out",), "train": ("out",), "adapt": ("checkpoint", "data", "out"),
            "infer": ("lr", "ref", "checkpoint"), "eval": ("data",)}


def build_parser():
    p = _Parser(prog="refsr", description="Reference-based x2 super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd in ("synth", "train", "adapt", "infer", "eval", "gradcheck", "bench-match"):
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", type=Path, help="JSON file with option values")
        for name, (typ, _, help_) in _options(cmd).items():
            sp.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=help_)
    return p


def resolve(command, args):
    """Merge defaults < config file < flags; reject unknown config keys."""
    opts = _options(command)
    values = {k: d for k, (_, d, _) in opts.items()}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        for key, val in data.items():
            name = key.replace("-", "_")
            if name not in opts:
                raise UsageError(f"unknown config key {key!r}")
            typ = opts[name][0]
            values[name] = val if typ in (json.loads,) or val is None else typ(val)
    for name in opts:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    for name in REQUIRED.get(command, ()):
        if values.get(name) is None:
            raise UsageError(f"{command}: --{name.replace('_', '-')} is required")
    return values


def _echo(command, values):
    shown = {k: (str(v) if isinstance(v, Path) else v) for k, v in values.items()}
    log.info("effective config: %s", json.dumps({"command": command, **shown}, sort_keys=True))


def _train_config(values):
    from .pipeline.train import TrainConfig
    try:
        return TrainConfig.from_dict({f.name: values[f.name] for f in fields(TrainConfig)})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _need_file(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(v):
    from .pipeline.data import save_dataset, synth_dataset
    try:
        pairs = synth_dataset(v["seed"], v["n"], v["extent"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = save_dataset(pairs, v["out"])
    print(f"wrote {len(pairs)} pairs to {out}")


def cmd_train(v):
    from .pipeline.data import load_dataset
    from .pipeline.train import train
    cfg = _train_config(v)
    train_pairs = load_dataset(_need_file(v["data"], "dataset")) if v["data"] else None
    eval_pairs = load_dataset(_need_file(v["eval_data"], "dataset")) if v["eval_data"] else None
    res = train(cfg, v["out"], train_pairs, eval_pairs)
    ev = res.final_eval
    print(f"eval psnr {ev['psnr']:.3f} dB (bicubic {ev['bicubic_psnr']:.3f}) "
          f"ssim {ev['ssim']:.4f} (bicubic {ev['bicubic_ssim']:.4f})")
    print(f"checkpoint {res.checkpoint}")


def cmd_adapt(v):
    from .model import load_checkpoint
    from .pipeline.data import load_dataset
    from .pipeline.train import adapt_sra
    cfg = _train_config(v)
    params = load_checkpoint(_need_file(v["checkpoint"], "checkpoint"))
    pairs = load_dataset(_need_file(v["data"], "dataset"))
    res = adapt_sra(params, [p.lr for p in pairs], [p.ref for p in pairs], cfg, v["out"])
    print(f"sra_loss before {res.before['sra_loss']:.6f} after {res.after['sra_loss']:.6f}")
    print(f"checkpoint {res.checkpoint}")


def cmd_infer(v):
    from .images import read_png, write_png
    from .model import load_checkpoint, to_image
    from .pipeline.train import super_resolve
    lr = read_png(_need_file(v["lr"], "lr image"))
    ref = read_png(_need_file(v["ref"], "reference image"))
    if lr.shape[-1] != 3 or ref.shape[-1] != 3:
        raise UsageError("lr and ref must be RGB images")
    params = load_checkpoint(_need_file(v["checkpoint"], "checkpoint"))
    sr, tr = super_resolve(params, lr, ref, v["search"], v["fusion_mode"])
    write_png(v["out"], sr)
    print(f"wrote {v['out']} ({sr.shape[1]}x{sr.shape[0]})")
    if v["debug_dir"] is not None:
        d = Path(v["debug_dir"])
        d.mkdir(parents=True, exist_ok=True)
        write_png(d / "ref_matched.png", to_image(tr.prepared.ref_matched))
        write_png(d / "confidence.png", np.clip(tr.prepared.conf_hr[0, 0], 0, 1))
        write_png(d / "hf_aligned.png", to_image(tr.hf_aligned + 0.5))
        write_png(d / "decoded.png", to_image(tr.decoded))
        print(f"debug dumps in {d}")


def cmd_eval(v):
    from .images import read_png, write_png
    from .pipeline.data import load_dataset
    from .pipeline.metrics import psnr, ssim
    from .pipeline.train import super_resolve
    root = _need_file(v["data"], "dataset")
    if (v["checkpoint"] is None) == (v["pred"] is None):
        raise UsageError("eval needs exactly one of --checkpoint or --pred")
    pairs = load_dataset(root)
    dirs = sorted(d for d in root.glob("pair_*") if d.is_dir())
    params = None
    if v["checkpoint"] is not None:
        from .model import load_checkpoint
        params = load_checkpoint(_need_file(v["checkpoint"], "checkpoint"))
    rows = []
    print("pair,psnr,ssim")
    for d, p in zip(dirs, pairs):
        if params is not None:
            sr = super_resolve(params, p.lr, p.ref, v["search"])[0]
            if v["save"]:
                write_png(d / "sr.png", sr)
        else:
            sr = read_png(_need_file(Path(v["pred"]) / d.name / "sr.png", "prediction"))
        rows.append((psnr(sr, p.hr), ssim(sr, p.hr)))
        print(f"{d.name},{rows[-1][0]:.6f},{rows[-1][1]:.6f}")
    m = np.mean(rows, axis=0)
    print(f"mean,{m[0]:.6f},{m[1]:.6f}")


def cmd_gradcheck(v):
    from .gradcheck import format_report, run_suite
    results = run_suite(v["seed"], v["instances"])
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def bench_rows(sizes, channels, variants, tile, margin, repeats, seed):
    """Time each matching variant on random features; returns dict rows."""
    from .matching import brute_force_match, match_features, tiled_match
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        lr = rng.standard_normal((channels, n, n))
        ref = rng.standard_normal((channels, n, n))
        for variant in variants:
            stats = {}
            if variant == "full":
                run = lambda: match_features(lr, ref)
                stats["peak_similarity_bytes"] = (n * n) ** 2 * np.dtype(np.float64).itemsize
            elif variant == "tiled":
                run = lambda: tiled_match(lr, ref, tile, margin, stats)
            elif variant == "brute":
                run = lambda: brute_force_match(lr, ref)
                stats["peak_similarity_bytes"] = 0
            else:
                raise UsageError(f"unknown matching variant {variant!r}")
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                best = min(best, time.perf_counter() - t0)
            rows.append({"variant": variant, "H": n, "W": n, "channels": channels,
                         "wall_time_ms": round(best * 1e3, 3),
                         "peak_similarity_bytes": stats["peak_similarity_bytes"]})
    return rows


def cmd_bench_match(v):
    try:
        sizes = [int(s) for s in v["sizes"].split(",") if s]
    except ValueError:
        raise UsageError(f"bad --sizes {v['sizes']!r}") from None
    if min(sizes, default=0) < 3 or v["repeats"] < 1 or v["channels"] < 1:
        raise UsageError("sizes must be >= 3, repeats and channels >= 1")
    rows = bench_rows(sizes, v["channels"], v["variants"].split(","), v["tile"], v["margin"],
                      v["repeats"], v["seed"])
    cols = ("variant", "H", "W", "channels", "wall_time_ms", "peak_similarity_bytes")
    fh = open(v["out"], "w", newline="") if v["out"] else sys.stdout
    try:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "adapt": cmd_adapt, "infer": cmd_infer,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "bench-match": cmd_bench_match}


def run(argv=None):
    """Parse ``argv`` and execute one subcommand; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        values = resolve(args.command, args)
        _echo(args.command, values)
        status = COMMANDS[args.command](values)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any failure inside a stage is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
