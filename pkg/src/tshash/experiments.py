"""Experiment runner: comparative tables, ablations, and sensitivity
sweeps over the training variants, with machine-readable outputs.

Each (variant, sweep point, seed) becomes one JSON run record under
runs/, addressed by a hash of the fully resolved run description plus
the seed, so re-running a spec never overwrites anything.  Records store
metrics for teacher and student codes both; `code_source` picks which
one summaries headline.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import QUERY, Dataset, load_dataset
from .encoder import EncoderParams, encode, save_checkpoint
from .losses import Hyperparams
from .retrieval import CodeSet, evaluate, pack_codes
from .trainer import TrainConfig, TrainLog, train

VARIANTS = (
    "baseline-DSH",
    "baseline-DPSH",
    "PTS3H-DSH",
    "PTS3H-DPSH",
    "PTS3H-P",
    "PTS3H-Q",
)

CODE_SOURCES = ("teacher", "student")

DEFAULT_TOPK = (50, 100, 200, 500, 1000, 2000, 5000)

# sweepable axes and where each lives
SWEEP_HYPER = ("omega", "gamma", "eta", "alpha", "rho", "margin")
SWEEP_CONFIG = ("learning_rate", "sigma")
SWEEP_INT = ("bits",)


def apply_variant(hp: Hyperparams, variant: str) -> Hyperparams:
    """Return a copy with the weights the variant forces.

    Baselines force omega=0 (supervised only); -P forces gamma=0
    (consistency only); -Q drops the consistency term (pseudo-pair loss
    only).  The -DSH/-DPSH suffixes pin the supervised kind; -P/-Q keep
    the configured kind.
    """
    if variant not in VARIANTS:
        raise ValueError("unknown variant %r; choose from %s" % (variant, VARIANTS))
    changes: dict = {}
    if variant.endswith("-DSH"):
        changes["kind"] = "dsh"
    elif variant.endswith("-DPSH"):
        changes["kind"] = "dpsh"
    if variant.startswith("baseline-"):
        changes["omega"] = 0.0
    elif variant == "PTS3H-P":
        changes["gamma"] = 0.0
    elif variant == "PTS3H-Q":
        changes["use_consistency"] = False
    return dataclasses.replace(hp, **changes)


def baseline_of(variant: str, kind: str) -> str:
    """The supervised counterpart a variant's gain is measured against."""
    if variant.startswith("baseline-"):
        return variant
    return "baseline-DPSH" if kind == "dpsh" else "baseline-DSH"


@dataclass
class ExperimentSpec:
    dataset: str
    out_dir: str
    variants: list[str] = field(default_factory=lambda: ["PTS3H-DSH"])
    config: TrainConfig = field(default_factory=TrainConfig)
    sweep_param: str | None = None
    sweep_values: list[float] | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    code_source: str = "teacher"
    topk: tuple[int, ...] = DEFAULT_TOPK
    save_checkpoints: bool = True

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError("unknown variant %r" % v)
        if self.code_source not in CODE_SOURCES:
            raise ValueError("code_source must be teacher or student")
        if (self.sweep_param is None) != (self.sweep_values is None):
            raise ValueError("sweep_param and sweep_values go together")
        if self.sweep_param is not None and self.sweep_param not in (
            SWEEP_HYPER + SWEEP_CONFIG + SWEEP_INT
        ):
            raise ValueError(
                "cannot sweep %r; axes: %s"
                % (self.sweep_param, SWEEP_HYPER + SWEEP_CONFIG + SWEEP_INT)
            )


def resolve_config(spec: ExperimentSpec, variant: str, sweep_value, seed: int) -> TrainConfig:
    """Bake variant forcing, the sweep point, and the seed into one
    concrete TrainConfig."""
    hp = apply_variant(spec.config.hyper, variant)
    cfg_changes: dict = {"seed": int(seed)}
    if spec.sweep_param is not None:
        p, v = spec.sweep_param, sweep_value
        if p in SWEEP_HYPER:
            hp = dataclasses.replace(hp, **{p: float(v)})
        elif p in SWEEP_INT:
            hp = dataclasses.replace(hp, **{p: int(v)})
        else:
            cfg_changes[p] = float(v)
    return dataclasses.replace(spec.config, hyper=hp, **cfg_changes)


def flat_config(cfg: TrainConfig) -> dict:
    """The resolved run description as flat JSON-friendly keys; forced
    variant weights show their forced values here."""
    hp = cfg.hyper
    return {
        "epochs": cfg.epochs,
        "batch": cfg.batch,
        "m_l": cfg.m_l,
        "ramp": cfg.ramp,
        "lr": cfg.learning_rate,
        "last_layer_lr_boost": cfg.last_layer_lr_boost,
        "momentum": cfg.momentum,
        "sigma": cfg.sigma,
        "hidden": list(cfg.hidden),
        "iters_per_epoch": cfg.iters_per_epoch,
        "val_fraction": cfg.val_fraction,
        "kind": hp.kind,
        "b": hp.bits,
        "omega": hp.omega,
        "gamma": hp.gamma,
        "eta": hp.eta,
        "alpha": hp.alpha,
        "rho": hp.rho,
        "margin": hp.margin,
        "use_consistency": hp.use_consistency,
    }


def spec_hash(spec: ExperimentSpec, variant: str, sweep_value, cfg: TrainConfig) -> str:
    desc = {
        "dataset": str(spec.dataset),
        "variant": variant,
        "sweep_param": spec.sweep_param,
        "sweep_value": sweep_value,
        "code_source": spec.code_source,
        "config": {k: v for k, v in flat_config(cfg).items()},
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _metrics_for(params: EncoderParams, ds: Dataset, bits: int, k, topk) -> dict:
    qmask = ds.mask(QUERY)
    dbmask = ds.database_mask()
    q = CodeSet(
        words=pack_codes(encode(params, ds.features[qmask])),
        bits=bits,
        labels=ds.labels[qmask],
    )
    db = CodeSet(
        words=pack_codes(encode(params, ds.features[dbmask])),
        bits=bits,
        labels=ds.labels[dbmask],
    )
    return evaluate(q, db, k=k, topk=topk).as_dict()


def run_one(
    ds: Dataset, cfg: TrainConfig, topk=DEFAULT_TOPK, k=None
) -> tuple[EncoderParams, EncoderParams, TrainLog, dict]:
    """Train once and evaluate query-vs-database retrieval with both
    networks' codes.  Returns (student, teacher, log, metrics dict)."""
    student, teacher, log = train(ds.training_view(), cfg)
    metrics = {
        "teacher": _metrics_for(teacher, ds, cfg.hyper.bits, k, topk),
        "student": _metrics_for(student, ds, cfg.hyper.bits, k, topk),
    }
    return student, teacher, log, metrics


def run(spec: ExperimentSpec) -> list[dict]:
    """Execute every (variant, sweep point, seed) cell, skipping records
    that already exist.  Failed runs produce a diagnostic record instead
    of aborting the rest.  Returns all records, loaded or fresh."""
    out = Path(spec.out_dir)
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(spec.dataset)
    sweep_points = spec.sweep_values if spec.sweep_param is not None else [None]
    records = []
    for variant in spec.variants:
        for value in sweep_points:
            for seed in spec.seeds:
                cfg = resolve_config(spec, variant, value, seed)
                h = spec_hash(spec, variant, value, cfg)
                path = runs_dir / ("%s__seed%d.json" % (h, seed))
                if path.exists():
                    records.append(json.loads(path.read_text()))
                    continue
                record = {
                    "spec_hash": h,
                    "seed": int(seed),
                    "variant": variant,
                    "sweep_param": spec.sweep_param,
                    "sweep_value": value,
                    "dataset": str(spec.dataset),
                    "code_source": spec.code_source,
                    "config": flat_config(cfg),
                    "status": "ok",
                }
                try:
                    student, teacher, log, metrics = run_one(
                        ds, cfg, topk=spec.topk
                    )
                except Exception as exc:  # record and continue
                    record["status"] = "failed"
                    record["error"] = "%s: %s" % (type(exc).__name__, exc)
                    record["traceback"] = traceback.format_exc()
                else:
                    record["metrics"] = metrics
                    record["rho"] = log.rho
                    record["sigma"] = log.sigma
                    record["iters_per_epoch"] = log.iters_per_epoch
                    record["final_val_map"] = log.epochs[-1].val_map
                    record["final_losses"] = {
                        "total": log.epochs[-1].total,
                        "supervised": log.epochs[-1].supervised,
                        "consistency": log.epochs[-1].consistency,
                        "quantized": log.epochs[-1].quantized,
                        "penalty": log.epochs[-1].penalty,
                    }
                    write_trainlog(
                        runs_dir / ("%s__seed%d.trainlog.jsonl" % (h, seed)), log
                    )
                    if spec.save_checkpoints:
                        save_checkpoint(
                            runs_dir / ("%s__seed%d.pts3" % (h, seed)),
                            student,
                            teacher,
                        )
                path.write_text(json.dumps(record, indent=1))
                records.append(record)
    return records


def write_trainlog(path, log: TrainLog) -> None:
    """One JSON object per epoch, plus a leading run-level object."""
    with open(path, "w") as fh:
        fh.write(
            json.dumps(
                {
                    "rho": log.rho,
                    "sigma": log.sigma,
                    "iters_per_epoch": log.iters_per_epoch,
                }
            )
            + "\n"
        )
        for rec in log.epochs:
            fh.write(json.dumps(rec.as_dict()) + "\n")


def _selected_map(record: dict) -> float:
    return record["metrics"][record["code_source"]]["map_at_k"]


def _selected_ph2(record: dict) -> float:
    return record["metrics"][record["code_source"]]["precision_hamming2"]


def summarize(records: list[dict]) -> dict:
    """Aggregate stored records: per (variant, sweep point) mean/std of
    MAP and radius-2 precision over seeds, teacher and student columns,
    and gains against the kind-matched supervised baseline.  Everything
    recomputes from the records alone."""
    ok = [r for r in records if r.get("status") == "ok"]
    failed = [r for r in records if r.get("status") != "ok"]
    groups: dict[tuple, list[dict]] = {}
    for r in ok:
        groups.setdefault((r["variant"], r["sweep_value"]), []).append(r)
    rows = []
    for (variant, value), members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        maps = np.array([_selected_map(r) for r in members])
        ph2 = np.array([_selected_ph2(r) for r in members])
        t_maps = np.array([r["metrics"]["teacher"]["map_at_k"] for r in members])
        s_maps = np.array([r["metrics"]["student"]["map_at_k"] for r in members])
        rows.append(
            {
                "variant": variant,
                "sweep_value": value,
                "seeds": sorted(r["seed"] for r in members),
                "map_mean": float(maps.mean()),
                "map_std": float(maps.std()),
                "ph2_mean": float(ph2.mean()),
                "ph2_std": float(ph2.std()),
                "teacher_map_mean": float(t_maps.mean()),
                "student_map_mean": float(s_maps.mean()),
                "teacher_student_gap": float(np.abs(t_maps - s_maps).max()),
            }
        )
    by_key = {(row["variant"], row["sweep_value"]): row for row in rows}
    for row in rows:
        kind = next(
            r["config"]["kind"]
            for r in ok
            if (r["variant"], r["sweep_value"]) == (row["variant"], row["sweep_value"])
        )
        base = by_key.get((baseline_of(row["variant"], kind), row["sweep_value"]))
        if base is None and row["sweep_value"] is not None:
            base = by_key.get((baseline_of(row["variant"], kind), None))
        if base is not None and base is not row:
            row["gain"] = row["map_mean"] - base["map_mean"]
    return {"rows": rows, "n_ok": len(ok), "n_failed": len(failed)}


def write_summary(out_dir, summary: dict) -> None:
    out = Path(out_dir)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    cols = [
        "variant",
        "sweep_value",
        "map_mean",
        "map_std",
        "ph2_mean",
        "ph2_std",
        "teacher_map_mean",
        "student_map_mean",
        "gain",
    ]
    lines = [",".join(cols)]
    for row in summary["rows"]:
        lines.append(",".join("" if row.get(c) is None else str(row.get(c)) for c in cols))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")


def export_curves(records: list[dict], out_dir) -> list[str]:
    """Write plot-ready CSVs: one sensitivity curve per swept parameter
    (x, map mean/std, radius-2 precision mean/std) and one threshold
    trace per completed run.  Returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    ok = [r for r in records if r.get("status") == "ok"]
    params = sorted({r["sweep_param"] for r in ok if r["sweep_param"] is not None})
    for p in params:
        rows: dict[float, list[dict]] = {}
        for r in ok:
            if r["sweep_param"] == p:
                rows.setdefault(float(r["sweep_value"]), []).append(r)
        lines = [p + ",map_mean,map_std,ph2_mean,ph2_std"]
        for x in sorted(rows):
            maps = np.array([_selected_map(r) for r in rows[x]])
            ph2 = np.array([_selected_ph2(r) for r in rows[x]])
            lines.append(
                "%g,%s,%s,%s,%s"
                % (x, maps.mean(), maps.std(), ph2.mean(), ph2.std())
            )
        path = out / ("sweep_%s.csv" % p)
        path.write_text("\n".join(lines) + "\n")
        written.append(str(path))
    # per-run threshold trace, one row per logged batch
    runs_dir = Path(out_dir) / "runs"
    for r in ok:
        log_path = runs_dir / ("%s__seed%d.trainlog.jsonl" % (r["spec_hash"], r["seed"]))
        if not log_path.exists():
            continue
        lines = ["epoch,iteration,thr,pseudo_fraction"]
        with open(log_path) as fh:
            next(fh)  # run-level header object
            for line in fh:
                rec = json.loads(line)
                for i, (thr, pf) in enumerate(zip(rec["thr_batch"], rec["pseudo_batch"])):
                    lines.append("%d,%d,%s,%s" % (rec["epoch"], i, thr, pf))
        path = out / ("thr_trace_%s__seed%d.csv" % (r["spec_hash"], r["seed"]))
        path.write_text("\n".join(lines) + "\n")
        written.append(str(path))
    return written
