"""Command-line entry point: ``procc {gen-data,train,eval,grad-check,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error.
"""

import argparse
import csv
import dataclasses
import os
import sys
import time

from . import evaluation as ev
from .dataio import (
    SyntheticWorldConfig,
    generate_synthetic_world,
    load_features,
    mask_partial_labels,
    openworld_expansion_ratio,
    split_stats,
    write_features,
)
from .gradsuite import TOLERANCE, run_grad_checks
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .train import StageConfig, run_joint, run_progressive

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _bool(v):
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*allowed):
    def parse(v):
        if v not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {v!r}")
        return v
    return parse


def _fraction(v):
    if v not in ("1/20", "1/2", "1"):
        raise ValueError(f"cpm_kernel_fraction must be 1/20, 1/2 or 1, got {v!r}")
    return v


def _int_list(v):
    return [int(x) for x in v.split(",") if x.strip()]


def _fraction_list(v):
    return [_fraction(x.strip()) for x in v.split(",") if x.strip()]


def _opt_float(v):
    return None if v == "" else float(v)


def _opt_int(v):
    return None if v == "" else int(v)


_WORLD = {f.name: f for f in dataclasses.fields(SyntheticWorldConfig) if f.name != "seed"}
_PY = {int: int, float: float, str: str, bool: _bool}

# key -> (parser, default string); order is the order of the resolved dump
SCHEMA = {"data": (str, "")}
SCHEMA.update({k: (_PY[type(f.default)], str(f.default)) for k, f in _WORLD.items()})
SCHEMA.update({
    "d": (int, "64"),
    "n_layers": (int, "3"),
    "cpm_kernel_fraction": (_fraction, "1/2"),
    "cpm_kernel_size": (int, "0"),
    "alpha": (float, "1.0"),
    "backbone": (_choice("random", "identity"), "random"),
    "mode": (_choice("progressive", "joint", "joint_up"), "progressive"),
    "lr": (float, "0.001"),
    "max_epochs": (int, "200"),
    "batch_size": (int, "128"),
    "patience": (int, "10"),
    "optimizer": (_choice("adam", "sgd"), "adam"),
})
for _k in (1, 2, 3):
    SCHEMA.update({
        f"stage{_k}_lr": (_opt_float, ""),
        f"stage{_k}_max_epochs": (_opt_int, ""),
        f"stage{_k}_batch_size": (_opt_int, ""),
        f"stage{_k}_patience": (_opt_int, ""),
    })
SCHEMA.update({
    "labels": (_choice("full", "partial"), "full"),
    "keep_state_fraction": (float, "0.5"),
    "keep_object_fraction": (float, "0.5"),
    "setting": (_choice("open", "closed"), "open"),
    "n_biases": (int, "101"),
    "timing": (_choice("wall", "off"), "wall"),
    "seed_data": (int, "0"),
    "seed_init": (int, "0"),
    "seed_shuffle": (int, "0"),
    "ablate_layers": (_int_list, "2,3,4,5"),
    "ablate_fractions": (_fraction_list, "1/20,1/2,1"),
})


def parse_config_text(text, source="<config>"):
    """Parse ``key=value`` lines; ``#`` starts a comment. Returns raw strings."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw):
    """Fill defaults and type-convert; returns ``(typed, resolved_strings)``."""
    strings, typed = {}, {}
    for key, (parse, default) in SCHEMA.items():
        value = raw.get(key, default)
        try:
            typed[key] = parse(value)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
        strings[key] = value
    return typed, strings


def dump_config(strings):
    return "".join(f"{k}={strings[k]}\n" for k in SCHEMA)


def load_run_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = parse_config_text(fh.read(), args.config)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
    for key in ("seed_data", "seed_init", "seed_shuffle"):
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = str(flag)
    if getattr(args, "data", None):
        raw["data"] = args.data
    return resolve_config(raw)


def world_config(cfg):
    try:
        return SyntheticWorldConfig(seed=cfg["seed_data"], **{k: cfg[k] for k in _WORLD})
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_data(cfg):
    """``(dataset, manifest)`` from the configured feature file or synthetic world."""
    if cfg["data"]:
        return load_features(cfg["data"])
    try:
        ds, man, _ = generate_synthetic_world(world_config(cfg))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return ds, man


def model_config(cfg, dataset, manifest, **override):
    kw = dict(raw_dim=dataset.feature_dim, n_states=manifest.n_states, n_objects=manifest.n_objects,
              d=cfg["d"], n_layers=cfg["n_layers"], cpm_kernel_fraction=cfg["cpm_kernel_fraction"],
              cpm_kernel_size=cfg["cpm_kernel_size"], alpha=cfg["alpha"], backbone=cfg["backbone"],
              trainable_backbone=cfg["mode"] == "joint_up")
    kw.update(override)
    try:
        return ModelConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def stage_configs(cfg):
    out = []
    for k in (1, 2, 3):
        kw = {f: cfg[f"stage{k}_{f}"] if cfg[f"stage{k}_{f}"] is not None else cfg[f]
              for f in ("lr", "max_epochs", "batch_size", "patience")}
        try:
            out.append(StageConfig(k, optimizer=cfg["optimizer"], **kw))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    return out


# ---------------------------------------------------------------------------
# shared pieces

def _train_model(cfg, dataset, manifest, mcfg):
    """Train per ``cfg['mode']``; returns ``(model, reports)``."""
    if cfg["labels"] == "partial":
        dataset = mask_partial_labels(dataset, cfg["keep_state_fraction"], cfg["keep_object_fraction"],
                                      cfg["seed_data"])
    model = init_model(mcfg, cfg["seed_init"])
    timing = cfg["timing"] == "wall"
    stages = stage_configs(cfg)
    if cfg["mode"] == "progressive":
        reports = run_progressive(model, dataset, manifest, stages, cfg["seed_shuffle"], timing)
    else:
        reports = [run_joint(model, dataset, manifest, stages[2], cfg["seed_shuffle"], timing)]
    return model, reports


def _fmt(x):
    return "n/a" if x is None else f"{x:.4f}"


def _write_report_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_metric", "seconds"])
        for epoch, loss, metric, secs in report.rows():
            w.writerow([epoch, repr(loss), repr(metric), repr(float(secs))])


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg, _ = load_run_config(args)
    if not args.out:
        raise ConfigError("gen-data needs --out <feature file>")
    try:
        dataset, manifest, _ = generate_synthetic_world(world_config(cfg))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    write_features(args.out, dataset, manifest)
    st = split_stats(dataset, manifest)
    print(f"{'s':>4} {'o':>4} {'C^s':>5} {'C':>6} | {'train C^s':>9} {'I':>6} | "
          f"{'val C^s':>7} {'C^u':>4} {'I':>6} | {'test C^s':>8} {'C^u':>4} {'I':>6}")
    print(f"{st['s']:>4} {st['o']:>4} {len(manifest.seen_pairs):>5} {st['C']:>6} | "
          f"{st['train_Cs']:>9} {st['train_I']:>6} | {st['val_Cs']:>7} {st['val_Cu']:>4} {st['val_I']:>6} | "
          f"{st['test_Cs']:>8} {st['test_Cu']:>4} {st['test_I']:>6}")
    print(f"open-world expansion (test): {openworld_expansion_ratio(manifest, dataset):.2f}x")
    return EXIT_OK


def cmd_train(args):
    cfg, strings = load_run_config(args)
    if not args.out:
        raise ConfigError("train needs --out <run dir>")
    dataset, manifest = load_data(cfg)
    mcfg = model_config(cfg, dataset, manifest)
    stage_configs(cfg)  # validate before any work
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(dump_config(strings))
    start = time.perf_counter()
    model, reports = _train_model(cfg, dataset, manifest, mcfg)
    total = time.perf_counter() - start if cfg["timing"] == "wall" else 0.0
    for k, rep in enumerate(reports, 1):
        _write_report_csv(os.path.join(args.out, f"report_stage{k}.csv"), rep)
        best = rep.val_metric[rep.best_epoch - 1] if rep.best_epoch > 0 else None
        print(f"{rep.stage}: epochs={rep.epochs_run} stop={rep.stop_reason} best_epoch={rep.best_epoch} "
              f"best_val={_fmt(best)} seconds={rep.wall_seconds:.2f}")
    save_checkpoint(model, os.path.join(args.out, "checkpoint_final"))
    with open(os.path.join(args.out, "walltime.txt"), "w") as fh:
        fh.write(f"{total:.3f}\n")
    print(f"total wall time: {total:.2f}s")
    return EXIT_OK


def cmd_eval(args):
    cfg, _ = load_run_config(args)
    if not args.out or not args.checkpoint:
        raise ConfigError("eval needs --checkpoint <file> and --out <dir>")
    dataset, manifest = load_data(cfg)
    mcfg = model_config(cfg, dataset, manifest)
    model = load_checkpoint(args.checkpoint, mcfg)
    split, setting = "test", cfg["setting"]
    summary = ev.sweep_metrics(model, dataset, split, manifest.space_mask(setting, split), manifest.seen_pairs,
                               cfg["n_biases"])
    confusions = [ev.conditional_confusion(model, dataset, split, d, c, manifest.n_states, manifest.n_objects)
                  for d in ("o->s", "s->o") for c in (True, False)]
    ev.export_report(summary, confusions, None, args.out)
    prim = ev.primitive_accuracy(model, dataset, split)
    with open(os.path.join(args.out, "primitive.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in dataclasses.asdict(prim).items():
            w.writerow([name, "" if value is None else repr(float(value))])
    row = ev.benchmark_row(model, dataset, manifest, setting, cfg["labels"] == "partial", cfg["n_biases"])
    with open(os.path.join(args.out, "benchmark.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow(["" if v is None else repr(float(v)) for v in row.values()])
    print(f"S={_fmt(summary.best_seen)} U={_fmt(summary.best_unseen)} "
          f"HM={_fmt(summary.best_hm)} AUC={_fmt(summary.auc)}")
    return EXIT_OK


def cmd_grad_check(args):
    ok = True
    for name, err in run_grad_checks(seed=args.seed_init or 0):
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<30} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    print("grad-check:", "all passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def ablation_settings(cfg):
    """``[(label, n_layers, fraction), ...]``; a baseline row is appended when there is more than one."""
    rows = [(f"w/ {n} layers", n, cfg["cpm_kernel_fraction"]) for n in cfg["ablate_layers"]]
    rows += [(f"w/ {f} fd", cfg["n_layers"], f) for f in cfg["ablate_fractions"]]
    if len(rows) > 1:
        rows.append(("ours", cfg["n_layers"], cfg["cpm_kernel_fraction"]))
    return rows


def cmd_ablate(args):
    cfg, strings = load_run_config(args)
    if not args.out:
        raise ConfigError("ablate needs --out <dir>")
    settings = ablation_settings(cfg)
    if not settings:
        raise ConfigError("ablation axes are empty")
    dataset, manifest = load_data(cfg)
    configs = [model_config(cfg, dataset, manifest, n_layers=n, cpm_kernel_fraction=f, cpm_kernel_size=0)
               for _, n, f in settings]
    stage_configs(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(dump_config(strings))
    mask = manifest.space_mask(cfg["setting"], "test")
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "n_layers", "cpm_kernel_fraction", "S", "U", "HM", "AUC"])
        for (label, n, f), mcfg in zip(settings, configs):
            model, _ = _train_model(cfg, dataset, manifest, mcfg)
            s = ev.sweep_metrics(model, dataset, "test", mask, manifest.seen_pairs, cfg["n_biases"])
            w.writerow([label, n, f, *("" if v is None else repr(float(v))
                                       for v in (s.best_seen, s.best_unseen, s.best_hm, s.auc))])
            print(f"{label:<14} S={_fmt(s.best_seen)} U={_fmt(s.best_unseen)} HM={_fmt(s.best_hm)} "
                  f"AUC={_fmt(s.auc)}", flush=True)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "grad-check": cmd_grad_check, "ablate": cmd_ablate}


def build_parser():
    parser = argparse.ArgumentParser(prog="procc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", help="output file (gen-data) or directory")
        for seed in ("data", "init", "shuffle"):
            p.add_argument(f"--seed-{seed}", dest=f"seed_{seed}", type=int, default=None, metavar="U64")
        if name in ("train", "eval", "ablate"):
            p.add_argument("--data", help="feature file (overrides the config's data key)")
        if name == "eval":
            p.add_argument("--checkpoint", help="model checkpoint written by train")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failures map to exit code 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
