"""Command-line front end: scheme / phantom / fit / train / eval.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Progress goes to stderr; machine-readable artifacts only to files.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import io_formats, llsq, metrics, network, phantom, scheme
from .errors import DwifitError, NonFiniteLoss
from .tensor import dec_color_field, derive_maps, eigvals_sym3, principal_dirs_field

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class OutputLock:
    """One CLI process per output directory, via an exclusive lock file."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".dwifit.lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(
                f"output directory is locked by another run ({self.path})")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except OSError:
            pass


# --- strict config ------------------------------------------------------------

_SCHEMA = {
    "seed": int,
    "out": str,
    "scheme": {"n_directions": int, "b": float, "n_b0": int, "seed": int},
    "pools": {"train_count": int},
    "phantom": {"dims": list, "slices_per_volume": int, "n_train": int,
                "n_val": int, "n_test": int, "layout": str, "seed": int},
    "noise": {"s0": float, "sigma": float, "seed": int},
    "net": {"n_max": int, "gap_len": int, "depth": int, "width": int,
            "lr": float, "lr_decay": float, "lr_step": int, "epochs": int,
            "batch": int, "seed": int},
    "eval": {"dirs": list, "subset_seed": int},
}

_DEFAULTS = {
    "seed": 0,
    "scheme": {"n_directions": 90, "b": 1000.0, "n_b0": 1, "seed": 0},
    "pools": {"train_count": 50},
    "phantom": {"dims": [64, 64], "slices_per_volume": 10, "n_train": 4,
                "n_val": 1, "n_test": 1, "layout": "mixed", "seed": 0},
    "noise": {"s0": 1000.0, "sigma": 50.0, "seed": 0},
    "net": asdict(network.NetConfig()),
    "eval": {"dirs": [6, 8, 12, 20], "subset_seed": 0},
}


def _check_keys(doc, schema, path=""):
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise UsageError(f"unknown config key: {here!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {here!r} must be an object")
            _check_keys(value, expected, here)


def load_config(path):
    """Parse a run config; unknown keys are rejected, paths are made
    relative to the config file."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    _check_keys(doc, _SCHEMA)
    if "out" not in doc:
        raise UsageError("config needs an 'out' directory")

    cfg = json.loads(json.dumps(_DEFAULTS))   # deep copy
    for key, value in doc.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    cfg["out"] = os.path.normpath(
        os.path.join(os.path.dirname(os.path.abspath(path)), cfg["out"]))
    return cfg


def _log(msg):
    print(msg, file=sys.stderr)


def _require(cond, msg):
    if not cond:
        raise UsageError(msg)


# --- subcommands ----------------------------------------------------------------

def cmd_scheme(args):
    _require(args.n >= 6, f"need n >= 6 directions, got {args.n}")
    sch = scheme.generate_uniform(args.n, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    io_formats.write_bvecs_bvals(os.path.join(args.out, "bvals"),
                                 os.path.join(args.out, "bvecs"), sch)
    kappa = scheme.condition_number(sch)
    angle = np.degrees(scheme.min_line_angle(sch.directions))
    print(f"n={args.n} kappa={kappa:.6f} min_line_angle_deg={angle:.4f}")
    return 0


def _volume_name(split, index):
    return f"{split}_{index:03d}"


def cmd_phantom(args):
    cfg = load_config(args.config)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    with OutputLock(out):
        sch = scheme.generate_uniform(cfg["scheme"]["n_directions"],
                                      seed=cfg["scheme"]["seed"])
        sch = scheme.GradientScheme(b=cfg["scheme"]["b"],
                                    directions=sch.directions,
                                    n_b0=cfg["scheme"]["n_b0"])
        pools = scheme.split_pools(sch, cfg["pools"]["train_count"])
        io_formats.write_bvecs_bvals(os.path.join(out, "bvals"),
                                     os.path.join(out, "bvecs"), sch)

        ph = cfg["phantom"]
        noise = cfg["noise"]
        counts = {"train": ph["n_train"], "val": ph["n_val"], "test": ph["n_test"]}
        index = 0
        for split, count in counts.items():
            # train/val volumes carry only the train-pool directions
            sub = pools.train if split != "test" else np.arange(sch.n_directions)
            subscheme = scheme.GradientScheme(b=sch.b,
                                              directions=sch.directions[sub],
                                              n_b0=sch.n_b0)
            for i in range(count):
                spec = phantom.PhantomSpec(
                    dims=tuple(ph["dims"]), n_slices=ph["slices_per_volume"],
                    layout=ph["layout"], seed=ph["seed"] * 100003 + index)
                tf = phantom.make_tensor_field(spec)
                vol = phantom.synthesize_dwi(
                    tf, subscheme, s0=noise["s0"], sigma=noise["sigma"],
                    seed=noise["seed"] * 100003 + index)
                name = _volume_name(split, i)
                io_formats.write_volume(os.path.join(out, name + ".dwiv"), vol)
                io_formats.write_tensor_field(
                    os.path.join(out, name + "_truth.dwiv"), tf)
                _log(f"wrote {name}: {ph['slices_per_volume']} slices, "
                     f"{subscheme.n_directions} directions")
                index += 1

        manifest = {"config": {k: cfg[k] for k in
                               ("seed", "scheme", "pools", "phantom", "noise")},
                    "snr": phantom.reported_snr(noise["s0"], noise["sigma"]),
                    "splits": counts}
        with open(os.path.join(out, "manifest.json"), "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=1)
    return 0


def _render_all(out_dir, prefix, tensors, mask, b=None):
    lam = eigvals_sym3(tensors)
    maps = derive_maps(lam)
    v1 = principal_dirs_field(tensors, lam)
    windows = {"fa": (0.0, 1.0), "md": (0.0, 3e-3),
               "ad": (0.0, 3e-3), "rd": (0.0, 3e-3)}
    for name, window in windows.items():
        io_formats.render_map(os.path.join(out_dir, f"{prefix}_{name}.pgm"),
                              getattr(maps, name)[0], mask[0],
                              kind="gray", window=window)
    io_formats.render_map(os.path.join(out_dir, f"{prefix}_dec.ppm"),
                          dec_color_field(v1, maps.fa)[0], mask[0], kind="dec")
    return maps


def cmd_fit(args):
    sch = io_formats.read_bvecs_bvals(args.bvals, args.bvecs)
    vol = io_formats.read_volume(args.volume, scheme=sch)
    subset = None
    if args.subset:
        subset = np.array([int(s) for s in args.subset.split(",")])
        _require(len(subset) >= 6, f"subset of {len(subset)} < 6 directions")
        _require(subset.max() < sch.n_directions, "subset index out of range")
    os.makedirs(args.out, exist_ok=True)
    report = llsq.fit_volume(vol, subset=subset)
    _log(f"fit: {int(vol.mask.sum())} voxels, {report.n_clamped} clamped, "
         f"{report.n_rank_deficient} rank-deficient")
    maps = _render_all(args.out, "lls", report.field.tensors, vol.mask)
    if args.truth:
        truth = io_formats.read_tensor_field(args.truth)
        tmaps = derive_maps(eigvals_sym3(truth.tensors))
        lines = ["map,nrmse"]
        for name in ("fa", "md", "ad", "rd"):
            err = metrics.nrmse(getattr(maps, name), getattr(tmaps, name), vol.mask)
            lines.append(f"{name},{err:.10g}")
        with open(os.path.join(args.out, "fit_report.csv"), "w") as f:
            f.write("\n".join(lines) + "\n")
        print("\n".join(lines))
    return 0


def _load_split(out, manifest, split, sch, pools):
    count = manifest["splits"][split]
    sub = pools.train if split != "test" else np.arange(sch.n_directions)
    subscheme = scheme.GradientScheme(b=sch.b, directions=sch.directions[sub],
                                      n_b0=sch.n_b0)
    vols, truths = [], []
    for i in range(count):
        name = _volume_name(split, i)
        vols.append(io_formats.read_volume(
            os.path.join(out, name + ".dwiv"), scheme=subscheme))
        truths.append(io_formats.read_tensor_field(
            os.path.join(out, name + "_truth.dwiv")))
    return vols, truths


def _read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise UsageError(f"no dataset manifest at {path}: {exc}")


def cmd_train(args):
    cfg = load_config(args.config)
    out = cfg["out"]
    manifest = _read_manifest(out)
    sch = io_formats.read_bvecs_bvals(os.path.join(out, "bvals"),
                                      os.path.join(out, "bvecs"))
    pools = scheme.split_pools(sch, manifest["config"]["pools"]["train_count"])

    train_vols, train_truths = _load_split(out, manifest, "train", sch, pools)
    val_vols, val_truths = _load_split(out, manifest, "val", sch, pools)
    train_set = network.make_training_set(train_vols, train_truths)
    val_set = (network.make_training_set(val_vols, val_truths)
               if val_vols else None)

    net_cfg = network.NetConfig(**cfg["net"])
    ckpt = network.train(train_set, net_cfg, val_set=val_set, log=_log)
    ckpt.save(os.path.join(out, "checkpoint.fdti"))
    network.write_history_csv(os.path.join(out, "loss.csv"), ckpt.loss_history)
    _log(f"checkpoint written after {ckpt.epoch} epochs")
    return 0


def cmd_eval(args):
    data_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    data_dir = args.data if args.data else data_dir
    manifest = _read_manifest(data_dir)
    sch = io_formats.read_bvecs_bvals(os.path.join(data_dir, "bvals"),
                                      os.path.join(data_dir, "bvecs"))
    pools = scheme.split_pools(sch, manifest["config"]["pools"]["train_count"])
    ckpt = network.Checkpoint.load(args.checkpoint)

    dirs_list = [int(s) for s in args.dirs.split(",")]
    for d in dirs_list:
        _require(6 <= d <= ckpt.config.n_max,
                 f"direction count {d} outside [6, {ckpt.config.n_max}]")

    test_vols, test_truths = _load_split(data_dir, manifest, "test", sch, pools)
    _require(test_vols, "dataset has no test volumes")

    os.makedirs(args.out, exist_ok=True)
    rows = [metrics.CSV_HEADER]
    for d in dirs_list:
        subset = scheme.sample_subset(pools.test, d,
                                      seed=args.subset_seed * 1009 + d)
        for method in ("dynconv", "lls"):
            est_maps, ref_maps, masks = [], [], []
            first_field = None
            for vol, truth in zip(test_vols, test_truths):
                if method == "dynconv":
                    field = network.infer(vol, subset, ckpt)
                else:
                    field = llsq.fit_volume(vol, subset=subset).field
                if first_field is None:
                    first_field = field
                est_maps.append(derive_maps(eigvals_sym3(field.tensors)))
                ref_maps.append(derive_maps(eigvals_sym3(truth.tensors)))
                masks.append(vol.mask)
            for name in ("fa", "md", "ad", "rd"):
                est = np.concatenate([getattr(m, name) for m in est_maps])
                ref = np.concatenate([getattr(m, name) for m in ref_maps])
                mask = np.concatenate(masks)
                rep = metrics.metric_report(est, ref, mask)
                rows.append(metrics.csv_row(name, method, d, rep))
            _render_all(args.out, f"{method}_d{d}",
                        first_field.tensors[:1], test_vols[0].mask[:1])
        _log(f"evaluated d={d}")

    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    print("\n".join(rows[:2]) + ("\n..." if len(rows) > 2 else ""))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dwifit",
        description="diffusion tensor reconstruction with flexible gradient schemes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scheme", help="generate a uniform direction set")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scheme)

    p = sub.add_parser("phantom", help="synthesize a phantom dataset")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="linear least squares fit + maps")
    p.add_argument("--volume", required=True)
    p.add_argument("--bvals", required=True)
    p.add_argument("--bvecs", required=True)
    p.add_argument("--subset", default=None,
                   help="comma-separated direction indices")
    p.add_argument("--truth", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the reconstruction network")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="network vs LLS metrics on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="dataset directory (default: checkpoint's)")
    p.add_argument("--dirs", default="6,8,12,20")
    p.add_argument("--subset-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DwifitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
