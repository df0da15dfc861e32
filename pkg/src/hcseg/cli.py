"""Command-line entry point: ``hcseg <command> [--config FILE] [--key value ...]``.

Settings come from, in increasing precedence: built-in defaults, a
``key = value`` config file, the ``HC_SEED`` environment variable (seed
only), and command-line flags. Exit codes: 0 success, 1 usage or config
error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import os
import sys

import numpy as np

from . import ablation, phantom
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .hyperconnections import write_beta_csv
from .metrics import REGIONS
from .model import ModelConfig, build_model
from .tensor import NonFiniteError
from .training import TrainState, beta_records, evaluate, run_epoch


class UsageError(Exception):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


MODEL_KEYS = {
    "mode": (str, "baseline"),
    "n": (int, 1),
    "depth": (int, 3),
    "base_channels": (int, 8),
    "blocks_per_stage": (int, 2),
    "seed": (int, 0),
}

COMMANDS = {
    "gen-data": {
        "out": (str, "data"),
        "n_train": (int, 100),
        "n_val": (int, 25),
        "n_test": (int, 20),
        "size": (int, 48),
        "seed": (int, 0),
    },
    "train": {
        "data": (str, "data"),
        "out": (str, "run"),
        **MODEL_KEYS,
        "epochs": (int, 30),
        "lr": (float, 1e-3),
        "weight_decay": (float, 1e-4),
        "batch_size": (int, 8),
        "modality_dropout": (float, 0.25),
    },
    "eval": {
        "checkpoint": (str, None),
        "data": (str, "data"),
        "split": (str, "val"),
        "out": (str, "eval.csv"),
    },
    "ablate": {
        "checkpoint": (str, None),
        "baseline": (str, None),
        "variant": (str, "variant"),
        "data": (str, "data"),
        "split": (str, "val"),
        "out": (str, "ablation.csv"),
        "dse": (_bool, False),
        "fixture": (str, None),
    },
    "audit-params": {
        "models": (str, "baseline,static:2,static:4,dynamic:2,dynamic:4"),
        "checkpoints": (str, None),
        "depth": (int, 3),
        "base_channels": (int, 8),
        "blocks_per_stage": (int, 2),
        "out": (str, "audit.csv"),
    },
}


def read_config_file(path, allowed):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in allowed:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def resolve(command, args):
    spec = COMMANDS[command]
    raw = {k: d for k, (_, d) in spec.items()}
    if args.config:
        raw.update(read_config_file(args.config, spec))
    if "seed" in spec and os.environ.get("HC_SEED"):
        raw["seed"] = os.environ["HC_SEED"]
    for k in spec:
        v = getattr(args, k, None)
        if v is not None:
            raw[k] = v
    cfg = {}
    for k, (typ, _) in spec.items():
        v = raw[k]
        try:
            cfg[k] = None if v is None else typ(v)
        except ValueError as exc:
            raise UsageError(f"bad value for {k}: {v!r} ({exc})") from None
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def make_parser():
    p = _Parser(prog="hcseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, spec in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value settings file")
        for key in spec:
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return p


def _log(out_dir, msg):
    with open(os.path.join(out_dir, "run.log"), "a") as fh:
        fh.write(f"{datetime.datetime.now().isoformat(timespec='seconds')} {msg}\n")


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _f(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def _require_dataset(path):
    if not os.path.isfile(os.path.join(path, phantom.MANIFEST)):
        raise UsageError(f"no dataset at {path} (missing {phantom.MANIFEST})")


def _require_file(path, what):
    if not path:
        raise UsageError(f"{what} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"not writable: {path}")


def _ensure_parent(path):
    _ensure_dir(os.path.dirname(os.path.abspath(path)))


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(cfg):
    for k in ("n_train", "n_val", "n_test"):
        if cfg[k] < 0:
            raise UsageError(f"{k} must be >= 0")
    if cfg["size"] < phantom.MIN_SIZE:
        raise UsageError(f"size must be >= {phantom.MIN_SIZE}")
    _ensure_dir(cfg["out"])
    tr, va, te = phantom.make_splits(cfg["n_train"], cfg["n_val"], cfg["n_test"], cfg["seed"])
    return phantom.write_dataset(cfg["out"], {"train": tr, "val": va, "test": te}, size=cfg["size"])


def model_config(cfg):
    return ModelConfig(depth=cfg["depth"], base_channels=cfg["base_channels"], n_streams=cfg["n"],
                       mode=cfg["mode"], seed=cfg["seed"], blocks_per_stage=cfg["blocks_per_stage"])


METRICS_HEADER = ["epoch", "loss", "dice_tc", "dice_wt", "dice_et", "mean_dice"]


def cmd_train(cfg):
    _require_dataset(cfg["data"])
    _ensure_dir(cfg["out"])
    if cfg["epochs"] < 0 or cfg["batch_size"] < 1:
        raise UsageError("epochs must be >= 0 and batch_size >= 1")
    if not 0.0 <= cfg["modality_dropout"] <= 1.0:
        raise UsageError("modality_dropout must lie in [0, 1]")
    try:
        mcfg = model_config(cfg).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    images, labels, _ = phantom.load_split(cfg["data"], "train")
    if len(images) == 0:
        raise UsageError("training split is empty")
    val_x, val_y, _ = phantom.load_split(cfg["data"], "val")
    probe = (val_x if len(val_x) else images)[:8]

    model = build_model(mcfg)
    state = TrainState.create(model, lr=cfg["lr"], weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    out = cfg["out"]
    _log(out, f"train start mode={mcfg.mode} n={mcfg.n_streams} epochs={cfg['epochs']}")
    metrics_rows, betas = [], []
    for _ in range(cfg["epochs"]):
        loss = run_epoch(state, images, labels, cfg["batch_size"], cfg["modality_dropout"])
        _, agg = evaluate(model, val_x, val_y)
        metrics_rows.append([state.epoch, _f(loss)] + [_f(agg[k]) for k in ("tc", "wt", "et", "mean_dice")])
        betas.extend(beta_records(model, probe, state.epoch))
        _log(out, f"epoch {state.epoch} loss={loss:.6f} mean_dice={agg['mean_dice']:.4f}")

    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(METRICS_HEADER)
        w.writerows(metrics_rows)
    write_beta_csv(betas, os.path.join(out, "beta.csv"))
    save_checkpoint(os.path.join(out, "model.hck"), model)
    _log(out, "train done")
    return state


EVAL_HEADER = ["seed", "dice_tc", "dice_wt", "dice_et", "mean_dice"]


def cmd_eval(cfg):
    _require_file(cfg["checkpoint"], "checkpoint")
    _require_dataset(cfg["data"])
    if cfg["split"] not in phantom.SPLITS:
        raise UsageError(f"split must be one of {phantom.SPLITS}")
    _ensure_parent(cfg["out"])
    model = load_checkpoint(cfg["checkpoint"])
    images, labels, seeds = phantom.load_split(cfg["data"], cfg["split"])
    rows, agg = evaluate(model, images, labels)
    with open(cfg["out"], "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(EVAL_HEADER)
        for seed, r in zip(seeds, rows):
            w.writerow([seed] + [_f(r[k]) for k in ("tc", "wt", "et", "mean_dice")])
        if rows:
            w.writerow(["mean"] + [_f(agg[k]) for k in ("tc", "wt", "et", "mean_dice")])
    return agg


def cmd_ablate(cfg):
    _ensure_parent(cfg["out"])
    if cfg["fixture"]:
        _require_file(cfg["fixture"], "fixture")
        with open(cfg["fixture"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        missing = set(ablation.DSE_FIXTURE_HEADER) - set(rows[0] if rows else ablation.DSE_FIXTURE_HEADER)
        if missing:
            raise UsageError(f"fixture lacks columns {sorted(missing)}")
        try:
            out_rows = ablation.dse_table(rows)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        with open(cfg["out"], "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(ablation.DSE_FIXTURE_HEADER + ["dse"])
            for r in out_rows:
                w.writerow([r["model"], r["region"], r["variant"], r["drop_dom"],
                            "" if r["dse"] is None else f"{r['dse']:+.3f}"])
        return out_rows

    _require_file(cfg["checkpoint"], "checkpoint")
    if cfg["dse"] and not cfg["baseline"]:
        raise UsageError("dse requested but no baseline checkpoint given")
    if cfg["baseline"]:
        _require_file(cfg["baseline"], "baseline checkpoint")
    _require_dataset(cfg["data"])
    model = load_checkpoint(cfg["checkpoint"])
    base = load_checkpoint(cfg["baseline"]) if cfg["baseline"] else None
    images, labels, _ = phantom.load_split(cfg["data"], cfg["split"])
    if len(images) == 0:
        raise UsageError(f"split {cfg['split']} is empty")
    report = ablation.build_report(cfg["variant"], model, images, labels, baseline=base)
    report.to_csv(cfg["out"])
    return report


def _audit_name(mcfg):
    if mcfg.mode == "baseline":
        return "baseline"
    return f"{'SHC' if mcfg.mode == 'static' else 'DHC'}x{mcfg.n_streams}"


def cmd_audit_params(cfg):
    _ensure_parent(cfg["out"])
    entries = []
    if cfg["checkpoints"]:
        for path in cfg["checkpoints"].split(","):
            _require_file(path.strip(), "checkpoint")
            m = load_checkpoint(path.strip())
            entries.append((_audit_name(m.cfg), m))
    else:
        for spec in cfg["models"].split(","):
            mode, _, n = spec.strip().partition(":")
            try:
                mcfg = ModelConfig(depth=cfg["depth"], base_channels=cfg["base_channels"],
                                   blocks_per_stage=cfg["blocks_per_stage"], mode=mode,
                                   n_streams=int(n) if n else 1).validate()
            except ValueError as exc:
                raise UsageError(f"bad model spec {spec!r}: {exc}") from None
            entries.append((_audit_name(mcfg), build_model(mcfg)))
    try:
        rows = ablation.param_audit(entries)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ablation.write_audit_csv(rows, cfg["out"])
    return rows


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "audit-params": cmd_audit_params,
}


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        HANDLERS[args.command](cfg)
    except (UsageError, CheckpointError, phantom.VolumeFormatError, FileNotFoundError) as exc:
        print(f"hcseg {args.command}: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"hcseg {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
