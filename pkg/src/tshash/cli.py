"""Command-line front end.

Subcommands: gen-data, train, encode, eval, ablate, sweep, report.
Flags mirror the config-file keys; ``--config path`` loads a flat
key=value file first and explicit flags override it.  Unknown config
keys are errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dmod
from . import experiments as xmod
from .encoder import encode as encode_batch
from .encoder import load_checkpoint, save_checkpoint
from .losses import KINDS, Hyperparams
from .retrieval import CodeSet, evaluate, load_codes, pack_codes, save_codes
from .trainer import TrainConfig, train

# config-file vocabulary: key -> (parser, help)
_KEYS = {
    "dataset": (str, "path to a dataset file"),
    "out": (str, "output directory or file"),
    "variant": (str, "training variant, comma-separated for multi-run commands"),
    "kind": (str, "supervised loss kind for -P/-Q variants: one of %s" % (KINDS,)),
    "b": (int, "code length in bits"),
    "omega": (float, "peak unsupervised weight"),
    "gamma": (float, "pseudo-pair loss weight"),
    "eta": (float, "quantization penalty weight"),
    "alpha": (float, "teacher EMA decay"),
    "rho": (str, "pseudo-similar fraction, or 'auto' to match the labeled pairs"),
    "margin": (float, "hinge margin on normalized similarities"),
    "epochs": (int, "training epochs"),
    "batch": (int, "batch size m"),
    "m_l": (int, "labeled samples per batch"),
    "ramp": (int, "ramp-up length in epochs (default: 25% of epochs)"),
    "lr": (float, "base learning rate (final layer additionally boosted)"),
    "last_layer_lr_boost": (float, "final-layer learning-rate multiplier"),
    "sigma": (str, "perturbation std, or 'auto' for 0.3x feature std"),
    "hidden": (str, "hidden layer sizes, comma-separated"),
    "val_fraction": (float, "labeled fraction withheld for validation"),
    "seeds": (str, "comma-separated seed list"),
    "code_source": (str, "teacher or student codes for headline metrics"),
    "sweep_param": (str, "hyperparameter axis for sweep"),
    "sweep_values": (str, "comma-separated sweep values"),
    "topk": (str, "comma-separated k values for the precision curve"),
    "k": (int, "MAP cutoff K (default: whole database)"),
}

_DEFAULTS = {
    "variant": "PTS3H-DSH",
    "kind": "dsh",
    "b": 16,
    "omega": 0.8,
    "gamma": 0.5,
    "eta": 0.004,
    "alpha": 0.98,
    "rho": "auto",
    "margin": 4.0,
    "epochs": 60,
    "batch": 64,
    "m_l": 16,
    "ramp": None,
    "lr": 0.01,
    "last_layer_lr_boost": 10.0,
    "sigma": "auto",
    "hidden": "64,64",
    "val_fraction": 0.1,
    "seeds": "0",
    "code_source": "teacher",
    "topk": "50,100,200,500,1000,2000,5000",
    "k": None,
}


def _parse_config_file(path: str) -> dict:
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit("%s:%d: expected key=value, got %r" % (path, ln, line))
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise SystemExit(
                "%s:%d: unknown config key %r (known: %s)"
                % (path, ln, key, ", ".join(sorted(_KEYS)))
            )
        parse = _KEYS[key][0]
        try:
            values[key] = parse(raw.strip())
        except ValueError as exc:
            raise SystemExit("%s:%d: bad value for %s: %s" % (path, ln, key, exc))
    return values


def _effective(args, key):
    v = getattr(args, key.replace("-", "_"), None)
    if v is not None:
        return v
    cfg = getattr(args, "_config_values", {})
    if key in cfg:
        return cfg[key]
    return _DEFAULTS.get(key)


def _maybe_auto(value) -> float | None:
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() == "auto":
            return None
        return float(value)
    return float(value)


def _int_list(text) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip() != ""]


def _float_list(text) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip() != ""]


def _train_config(args, seed: int) -> TrainConfig:
    hp = Hyperparams(
        kind=_effective(args, "kind"),
        bits=int(_effective(args, "b")),
        omega=float(_effective(args, "omega")),
        gamma=float(_effective(args, "gamma")),
        eta=float(_effective(args, "eta")),
        alpha=float(_effective(args, "alpha")),
        rho=_maybe_auto(_effective(args, "rho")),
        margin=float(_effective(args, "margin")),
    )
    ramp = _effective(args, "ramp")
    return TrainConfig(
        epochs=int(_effective(args, "epochs")),
        batch=int(_effective(args, "batch")),
        m_l=int(_effective(args, "m_l")),
        ramp_epochs=None if ramp is None else int(ramp),
        learning_rate=float(_effective(args, "lr")),
        last_layer_lr_boost=float(_effective(args, "last_layer_lr_boost")),
        seed=seed,
        hyper=hp,
        sigma=_maybe_auto(_effective(args, "sigma")),
        hidden=tuple(_int_list(_effective(args, "hidden"))),
        val_fraction=float(_effective(args, "val_fraction")),
    )


def _seeds(args) -> list[int]:
    if getattr(args, "seed", None) is not None and "seeds" not in getattr(
        args, "_config_values", {}
    ):
        return [int(args.seed)]
    return _int_list(_effective(args, "seeds"))


def _require(args, key):
    v = _effective(args, key)
    if v is None:
        raise SystemExit("missing required option --%s" % key.replace("_", "-"))
    return v


def cmd_gen_data(args) -> int:
    seed = int(args.seed if args.seed is not None else 0)
    ds = dmod.generate_blobs(
        classes=args.classes,
        per_class=args.per_class,
        d=args.dim,
        spread=args.spread,
        seed=seed,
    )
    ds = dmod.split(
        ds,
        labeled_fraction=args.labeled_fraction,
        queries_per_class=args.queries_per_class,
        rng=np.random.default_rng([seed, 1]),
    )
    out = _require(args, "out")
    dmod.save_dataset(out, ds)
    print("wrote %s: %s" % (out, ds.role_counts()))
    return 0


def cmd_train(args) -> int:
    dataset = _require(args, "dataset")
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    seed = int(args.seed if args.seed is not None else _seeds(args)[0])
    cfg = _train_config(args, seed)
    variant = _effective(args, "variant")
    if "," in variant:
        raise SystemExit("train runs one variant; use ablate for several")
    cfg = type(cfg)(
        **{
            **cfg.__dict__,
            "hyper": xmod.apply_variant(cfg.hyper, variant),
        }
    )
    ds = dmod.load_dataset(dataset)
    student, teacher, log = train(ds.training_view(), cfg)
    save_checkpoint(out / "checkpoint.pts3", student, teacher)
    xmod.write_trainlog(out / "trainlog.jsonl", log)
    resolved = dict(xmod.flat_config(cfg), variant=variant, dataset=str(dataset), seed=seed)
    (out / "config.json").write_text(json.dumps(resolved, indent=1))
    final = log.epochs[-1]
    print(
        "trained %s for %d epochs: loss %.4f, val MAP %s"
        % (
            variant,
            cfg.epochs,
            final.total,
            "n/a" if final.val_map is None else "%.4f" % final.val_map,
        )
    )
    return 0


def cmd_encode(args) -> int:
    student, teacher, _ = load_checkpoint(args.checkpoint)
    params = {"teacher": teacher, "student": student}[_effective(args, "code_source")]
    ds = dmod.load_dataset(_require(args, "dataset"))
    which = args.items
    if which == "query":
        mask = ds.mask(dmod.QUERY)
    elif which == "database":
        mask = ds.database_mask()
    else:
        mask = np.ones(len(ds), dtype=bool)
    bits = params.dims[-1]
    codes = CodeSet(
        words=pack_codes(encode_batch(params, ds.features[mask])),
        bits=bits,
        labels=ds.labels[mask],
        ids=np.flatnonzero(mask).astype(np.int64),
    )
    out = _require(args, "out")
    save_codes(out, codes)
    print("wrote %s: %d codes x %d bits" % (out, len(codes), bits))
    return 0


def cmd_eval(args) -> int:
    queries = load_codes(args.queries)
    db = load_codes(args.db)
    k = _effective(args, "k")
    report = evaluate(
        queries,
        db,
        k=None if k is None else int(k),
        topk=tuple(_int_list(_effective(args, "topk"))),
    )
    text = report.to_json()
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
        print("wrote %s" % args.out)
    print(text)
    return 0


def _build_spec(args, variants: list[str], sweep_param=None, sweep_values=None) -> xmod.ExperimentSpec:
    seeds = _seeds(args)
    return xmod.ExperimentSpec(
        dataset=_require(args, "dataset"),
        out_dir=_require(args, "out"),
        variants=variants,
        config=_train_config(args, seeds[0]),
        sweep_param=sweep_param,
        sweep_values=sweep_values,
        seeds=seeds,
        code_source=_effective(args, "code_source"),
        topk=tuple(_int_list(_effective(args, "topk"))),
    )


def _print_summary(summary: dict) -> None:
    cols = ("variant", "sweep_value", "map_mean", "map_std", "teacher_map_mean",
            "student_map_mean", "gain")
    print("\t".join(cols))
    for row in summary["rows"]:
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append("-" if v is None else ("%.4f" % v if isinstance(v, float) else str(v)))
        print("\t".join(cells))
    if summary["n_failed"]:
        print("failed runs: %d (see their records for diagnostics)" % summary["n_failed"])


def cmd_ablate(args) -> int:
    kind = _effective(args, "kind")
    variant = _effective(args, "variant")
    if "," in variant:
        variants = [v.strip() for v in variant.split(",") if v.strip()]
    else:
        full = "PTS3H-DPSH" if kind == "dpsh" else "PTS3H-DSH"
        variants = [xmod.baseline_of(full, kind), full, "PTS3H-P", "PTS3H-Q"]
    spec = _build_spec(args, variants)
    records = xmod.run(spec)
    summary = xmod.summarize(records)
    xmod.write_summary(spec.out_dir, summary)
    _print_summary(summary)
    return 0


def cmd_sweep(args) -> int:
    param = args.param or _effective(args, "sweep_param")
    values_raw = args.values or _effective(args, "sweep_values")
    if not param or not values_raw:
        raise SystemExit("sweep needs --param and --values")
    variant = _effective(args, "variant")
    variants = [v.strip() for v in variant.split(",") if v.strip()]
    spec = _build_spec(args, variants, sweep_param=param, sweep_values=_float_list(values_raw))
    records = xmod.run(spec)
    summary = xmod.summarize(records)
    xmod.write_summary(spec.out_dir, summary)
    written = xmod.export_curves(records, spec.out_dir)
    _print_summary(summary)
    for p in written:
        print("curve: %s" % p)
    return 0


def cmd_report(args) -> int:
    runs_dir = Path(_require(args, "out")) / "runs"
    if not runs_dir.is_dir():
        raise SystemExit("no runs directory under %s" % args.out)
    records = [
        json.loads(p.read_text())
        for p in sorted(runs_dir.glob("*.json"))
    ]
    if not records:
        raise SystemExit("no run records under %s" % runs_dir)
    summary = xmod.summarize(records)
    xmod.write_summary(Path(_effective(args, "out")), summary)
    xmod.export_curves(records, _effective(args, "out"))
    _print_summary(summary)
    return 0


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        parse, help_text = _KEYS[key]
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=parse, help=help_text)


_TRAIN_KEYS = (
    "kind", "b", "omega", "gamma", "eta", "alpha", "rho", "margin", "epochs",
    "batch", "m_l", "ramp", "lr", "last_layer_lr_boost", "sigma", "hidden",
    "val_fraction",
)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="tshash",
        description="Teacher-student semi-supervised hashing workbench",
    )
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="run seed")

    p = sub.add_parser("gen-data", help="generate and split a clustered dataset")
    common(p)
    p.add_argument("--out", help="dataset file to write")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=600)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--spread", type=float, default=0.3)
    p.add_argument("--queries-per-class", type=int, default=50)
    p.add_argument("--labeled-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant, write checkpoint + log")
    common(p)
    p.add_argument("--dataset", help="dataset file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", help="training variant")
    _add_config_flags(p, _TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode dataset items with a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset file")
    p.add_argument("--items", choices=("query", "database", "all"), default="all")
    p.add_argument("--code-source", dest="code_source", choices=("teacher", "student"))
    p.add_argument("--out", help="code file to write")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="evaluate query codes against database codes")
    common(p)
    p.add_argument("--queries", required=True, help="query code file")
    p.add_argument("--db", required=True, help="database code file")
    p.add_argument("--k", type=int, help=_KEYS["k"][1])
    p.add_argument("--topk", help=_KEYS["topk"][1])
    p.add_argument("--out", help="metrics JSON to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full-method / -P / -Q / baseline comparison")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--variant", help="override the default variant set (comma list)")
    p.add_argument("--seeds", help=_KEYS["seeds"][1])
    p.add_argument("--code-source", dest="code_source", choices=("teacher", "student"))
    _add_config_flags(p, _TRAIN_KEYS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity sweep over one hyperparameter")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--param", help="axis to sweep")
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--variant")
    p.add_argument("--seeds", help=_KEYS["seeds"][1])
    p.add_argument("--code-source", dest="code_source", choices=("teacher", "student"))
    _add_config_flags(p, _TRAIN_KEYS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute summaries from stored run records")
    common(p)
    p.add_argument("--out", help="experiment directory holding runs/")
    p.set_defaults(func=cmd_report)

    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._config_values = _parse_config_file(args.config) if args.config else {}
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
