"""``halfpel`` command line: prep, train, interp, mc-eval, bd-rate, compare.

Every option can also come from a ``key=value`` file given with ``--config``;
flags on the command line win. Each run that has an output directory writes
the fully-resolved settings to ``run_config.txt`` there, and that file can be
fed back through ``--config`` to repeat the run.

Exit status: 0 on success, 2 for bad input or configuration, 1 for anything
unexpected.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import _kernels, cnn_engine, datagen, eval_report, fixed_filters, mc_sim
from .errors import ConfigError, HalfpelError
from .image_core import load_pgm, save_pgm

log = logging.getLogger("halfpel")

RUN_CONFIG = "run_config.txt"
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
METHOD_KIND = {"dctif": "DCTIF", "cnn": "CNN", "avg2": "AVG2", "sr": "SR_ANCHOR"}
_HP = cnn_engine.Hyperparams()


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _qp(text):
    v = int(text)
    if not 0 <= v <= 51:
        raise argparse.ArgumentTypeError(f"qp must lie in 0..51, got {text}")
    return v


def _qp_list(text):
    return tuple(_qp(s) for s in text.split(",") if s.strip())


def _lower_choice(choices):
    def parse(text):
        v = text.strip().lower()
        if v not in choices:
            raise argparse.ArgumentTypeError(f"expected one of {', '.join(choices)}, got {text}")
        return v

    return parse


# option name -> (converter, default); shared by flags and config files
OPTIONS = {
    "manifest": (str, None),
    "dataset": (str, None),
    "image": (str, None),
    "frames": (str, None),
    "anchor": (str, None),
    "test": (str, None),
    "out": (str, None),
    "seed": (int, None),
    "threads": (_positive_int, os.cpu_count() or 1),
    "qp": (_qp, 22),
    "position": (_lower_choice(("h", "v", "d", "s")), "h"),
    "method": (_lower_choice(tuple(METHOD_KIND)), "dctif"),
    "weights": (str, None),
    "model_dir": (str, None),
    "block_size": (_positive_int, 16),
    "search_range": (_positive_int, 8),
    "epochs": (_positive_int, _HP.epochs),
    "lr_front": (float, _HP.lr_front),
    "lr_last": (float, _HP.lr_last),
    "momentum": (float, _HP.momentum),
    "batch_size": (_positive_int, _HP.batch_size),
    "init": (_lower_choice(cnn_engine.INIT_MODES), _HP.init),
    "init_std": (float, _HP.init_std),
    "split_fraction": (float, 0.8),
    "patch_size": (_positive_int, None),
    "stride": (_positive_int, None),
    "rd_qps": (_qp_list, None),
}

# options each command reads, positionals first
COMMANDS = {
    "prep": ("manifest", "out", "seed", "threads", "patch_size", "stride"),
    "train": (
        "dataset", "out", "position", "qp", "seed", "threads", "epochs", "lr_front", "lr_last",
        "momentum", "batch_size", "init", "init_std", "split_fraction",
    ),
    "interp": ("image", "out", "method", "position", "weights", "threads"),
    "mc-eval": (
        "frames", "out", "method", "weights", "model_dir", "qp", "block_size", "search_range",
        "threads", "rd_qps",
    ),
    "bd-rate": ("anchor", "test", "out"),
    "compare": ("anchor", "test", "out"),
}
POSITIONAL = {
    "prep": ("manifest",),
    "train": ("dataset",),
    "interp": ("image",),
    "mc-eval": ("frames",),
    "bd-rate": ("anchor", "test"),
    "compare": ("anchor", "test"),
}
REQUIRED = {
    "prep": ("manifest", "out"),
    "train": ("dataset", "out"),
    "interp": ("image", "out"),
    "mc-eval": ("frames", "out"),
    "bd-rate": ("anchor", "test"),
    "compare": ("anchor", "test"),
}

HELP = {
    "config": "key=value file; flags override it",
    "out": "output directory",
    "threads": "worker cap for parallel kernels and dataset building",
    "weights": "weight file, or h=PATH,v=PATH,d=PATH for a CNN field, or the SR network",
    "model_dir": "directory holding cnnif_{h,v,d}_qp{22,27,32,37}.cnif",
    "init": "gaussian, or linear for a least-squares warm start",
    "rd_qps": "also run the rate/PSNR sweep at these QPs and write rd.csv",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halfpel", description="CNN half-pel interpolation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help=HELP["config"])
        for key in keys:
            conv = OPTIONS[key][0]
            if key in POSITIONAL[name]:
                p.add_argument(key, nargs="?", type=conv, default=None)
            else:
                flag = "--" + key.replace("_", "-")
                p.add_argument(flag, dest=key, type=conv, default=None, help=HELP.get(key))
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    keys = COMMANDS[args.command]
    cfg = {k: OPTIONS[k][1] for k in keys}
    if args.config:
        try:
            file_values = datagen.read_key_values(args.config)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        file_values.pop("command", None)
        unknown = set(file_values) - set(keys)
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys for {args.command}: {sorted(unknown)}")
        for k, text in file_values.items():
            try:
                cfg[k] = OPTIONS[k][0](text)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{args.config}: bad value for {k}: {exc}") from None
    for k in keys:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{args.command}: missing {', '.join(missing)}")
    return cfg


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def write_run_config(command: str, cfg: dict, out_dir: Path) -> Path:
    lines = [f"command={command}"]
    lines += [f"{k}={_format_value(v)}" for k, v in cfg.items() if v is not None]
    path = out_dir / RUN_CONFIG
    path.write_text("\n".join(lines) + "\n")
    return path


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_weights(text: str | None) -> dict:
    """``PATH`` or ``pos=PATH[,pos=PATH...]`` into a position-keyed dict."""
    if not text:
        return {}
    if "=" not in text:
        return {None: text}
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise ConfigError(f"bad weights entry {item!r}")
        pos, path = (s.strip() for s in item.split("=", 1))
        pos = pos.upper()
        if pos not in ("H", "V", "D", "S"):
            raise ConfigError(f"unknown position {pos!r} in weights")
        out[pos] = path
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prep(cfg: dict) -> int:
    try:
        manifest = datagen.parse_manifest(cfg["manifest"])
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {cfg['manifest']}") from None
    overrides = {k: cfg[k] for k in ("seed", "patch_size", "stride") if cfg[k] is not None}
    manifest = replace(manifest, **overrides)
    ds = datagen.build_dataset(manifest, workers=cfg["threads"])
    out = _out_dir(cfg)
    written = datagen.write_dataset(ds, out)
    (out / "manifest.txt").write_text(datagen.format_manifest(manifest))
    cfg = dict(cfg, seed=manifest.seed, patch_size=manifest.patch_size, stride=manifest.stride)
    write_run_config("prep", cfg, out)
    log.info("wrote %d shards to %s", len(written), out)
    return 0


def _train_tags(cfg):
    pos = cfg["position"].upper()
    qp = None if pos == datagen.SR_POSITION else cfg["qp"]
    return pos, qp


def cmd_train(cfg: dict) -> int:
    pos, qp = _train_tags(cfg)
    shard = Path(cfg["dataset"]) / datagen.shard_name(pos, qp)
    if not shard.is_file():
        raise ConfigError(f"no shard for position {pos} qp {qp}: {shard} not found")
    pairs = datagen.read_shard(shard)
    if not pairs:
        raise ConfigError(f"{shard}: shard is empty")
    seed = 0 if cfg["seed"] is None else cfg["seed"]
    cfg = dict(cfg, seed=seed)
    if len({p.source_id for p in pairs}) >= 2:
        train_pairs, val_pairs = datagen.split_train_val(pairs, cfg["split_fraction"], seed)
    else:
        train_pairs, val_pairs = pairs, []
    hp = cnn_engine.Hyperparams(
        lr_front=cfg["lr_front"],
        lr_last=cfg["lr_last"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=seed,
        init_std=cfg["init_std"],
        init=cfg["init"],
    )
    out = _out_dir(cfg)
    net, curve = cnn_engine.train(train_pairs, hp, val=val_pairs or None)
    name = mc_sim.cnn_weight_name(pos, qp) if qp is not None else "cnnif_s.cnif"
    cnn_engine.save_weights(net, out / name)
    stem = name.rsplit(".", 1)[0]
    with open(out / f"loss_{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for i, (t, v) in enumerate(zip(curve.train, curve.val), 1):
            w.writerow([i, repr(t), repr(v)])
    write_run_config("train", cfg, out)
    log.info("final train MSE %.4f, val MSE %.4f", curve.train[-1], curve.val[-1])
    return 0


def _load_plane(path):
    try:
        return load_pgm(path)
    except FileNotFoundError:
        raise ConfigError(f"image not found: {path}") from None


def cmd_interp(cfg: dict) -> int:
    method = cfg["method"]
    pos = cfg["position"].upper()
    if method == "sr" or pos == datagen.SR_POSITION:
        raise ConfigError("interp produces H, V or D planes with dctif, cnn or avg2")
    plane = _load_plane(cfg["image"])
    if method == "dctif":
        result = fixed_filters.interp_half(plane, pos)
    elif method == "avg2":
        result = fixed_filters.average2_half(plane, pos)
    else:
        weights = _parse_weights(cfg["weights"])
        path = weights.get(pos, weights.get(None))
        if path is None:
            raise ConfigError("method cnn needs --weights")
        try:
            net = cnn_engine.load_weights(path)
        except FileNotFoundError:
            raise ConfigError(f"weight file not found: {path}") from None
        result = cnn_engine.interpolate_plane(net, plane)
    out = _out_dir(cfg)
    save_pgm(result, out / f"half_{pos.lower()}_{method}.pgm")
    write_run_config("interp", cfg, out)
    return 0


def _interp_spec(cfg) -> mc_sim.InterpolatorSpec:
    kind = METHOD_KIND[cfg["method"]]
    weights = _parse_weights(cfg["weights"])
    if kind == "SR_ANCHOR":
        path = weights.get("S", weights.get(None))
        if path is None:
            raise ConfigError("method sr needs --weights with the super-resolution network")
        return mc_sim.InterpolatorSpec(kind, {"S": path})
    if kind == "CNN":
        if None in weights:
            raise ConfigError("method cnn needs --weights h=PATH,v=PATH,d=PATH or --model-dir")
        return mc_sim.InterpolatorSpec(kind, weights, cfg["qp"], cfg["model_dir"])
    return mc_sim.InterpolatorSpec(kind)


def cmd_mc_eval(cfg: dict) -> int:
    frames = mc_sim.load_frames(cfg["frames"])
    spec = _interp_spec(cfg)
    out = _out_dir(cfg)
    report = mc_sim.simulate_sequence(frames, spec, cfg["block_size"], cfg["search_range"])
    mc_sim.write_report_csv(report, out / "mc_report.csv")
    if cfg["rd_qps"]:
        name = Path(cfg["frames"]).resolve().name
        result = mc_sim.rd_sweep(frames, spec, cfg["rd_qps"], cfg["block_size"], cfg["search_range"], name)
        eval_report.write_rd_csv([result], out / "rd.csv")
    write_run_config("mc-eval", cfg, out)
    log.info("aggregate SSE %.1f, PSNR %.3f dB", report.total.sse, report.total.psnr_db)
    return 0


def _load_rd(path):
    try:
        return eval_report.load_results(path)
    except FileNotFoundError:
        raise ConfigError(f"RD file not found: {path}") from None


def cmd_bd_rate(cfg: dict) -> int:
    value = eval_report.mean_bd_rate(_load_rd(cfg["anchor"]), _load_rd(cfg["test"]))
    text = f"{value:.2f}"
    print("0.00" if text == "-0.00" else text)
    if cfg["out"]:
        write_run_config("bd-rate", cfg, _out_dir(cfg))
    return 0


def cmd_compare(cfg: dict) -> int:
    rows = eval_report.compare_rows(_load_rd(cfg["anchor"]), _load_rd(cfg["test"]))
    keys = list(rows[0])
    print("\t".join(keys))
    for r in rows:
        print("\t".join([r["sequence"]] + [f"{r[k]:.4f}" for k in keys[1:]]))
    if cfg["out"]:
        out = _out_dir(cfg)
        eval_report.write_compare_csv(rows, out / "compare.csv")
        write_run_config("compare", cfg, out)
    return 0


HANDLERS = {
    "prep": cmd_prep,
    "train": cmd_train,
    "interp": cmd_interp,
    "mc-eval": cmd_mc_eval,
    "bd-rate": cmd_bd_rate,
    "compare": cmd_compare,
}


def _setup_logging():
    name = os.environ.get("HALFPEL_LOG", "info").strip().lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if name not in LOG_LEVELS:
        log.warning("unknown HALFPEL_LOG value %r, using info", name)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        _kernels.set_threads(cfg.get("threads") or 1)
        return HANDLERS[args.command](cfg)
    except HalfpelError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
