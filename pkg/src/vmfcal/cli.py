"""Command-line entry point.

    vmfcal COMMAND [--config PATH] [--seed N] [--out DIR] [--alpha X] [--lambda X]
                   [--epochs N] [--dim N] [--classes N] [--format {csv,text}]
                   [--parallel N] [--dataset DIR] [--checkpoint PATH] [--weights PATH]

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 verification failure.
"""

import argparse
import csv
from dataclasses import asdict, dataclass, field, fields, replace
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time

import numpy as np

from .calibrate import (
    CalibrationConfig,
    calibrate,
    calibrate_generic,
    normalize_overlaps,
    read_weights,
    write_weights,
)
from .errors import DomainError, NumericalError
from .experiments import ABLATION_LAMBDAS, ABLATION_VARIANTS, ablation_configs, alpha_sweep, run_many, surface_grid
from .overlap import overlap_matrix
from .synth import SynthSpec, load_dataset, make_dataset, save_dataset
from .trainer import TrainConfig, evaluate, train
from .verify import run_all
from .vmf_core import load_checkpoint, save_checkpoint, uniform_prior

__all__ = ["main", "COMMANDS", "ExperimentConfig", "ConfigError", "build_config", "config_hash"]

COMMANDS = ("gen-data", "train", "calibrate", "sweep-alpha", "ablate-loss", "diagnose", "verify")
FORMATS = ("csv", "text")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3

logger = logging.getLogger("vmfcal")


class ConfigError(Exception):
    pass


class VerificationFailed(Exception):
    pass


@dataclass
class ExperimentConfig:
    command: str
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    seeds: list = None
    dataset: str = None
    checkpoint: str = None
    weights: str = None
    output_format: str = "csv"
    # execution details, excluded from the echo and hash
    out: str = "out"
    parallel: int = 1

    def echo(self):
        cal = asdict(self.calibration)
        cal["source_kind"] = self.calibration.source_kind.value
        return {
            "command": self.command,
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "calibration": cal,
            "seeds": list(self.seeds),
            "dataset": self.dataset,
            "checkpoint": self.checkpoint,
            "weights": self.weights,
            "output_format": self.output_format,
        }


def config_hash(echo):
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {"synth": SynthSpec, "train": TrainConfig, "calibration": CalibrationConfig}
_TOP_LEVEL = set(_SECTIONS) | {"seeds", "dataset", "checkpoint", "weights", "output_format"}


def _read_config_file(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {unknown}; allowed {sorted(_TOP_LEVEL)}")
    return data


def _section(name, values):
    cls = _SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"field '{name}' must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"field '{name}': unknown key(s) {unknown}")
    try:
        return cls(**values)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(f"field '{name}': {exc}") from exc


def build_config(args):
    """Merge the config file (if any) with command-line flags; flags win."""
    data = _read_config_file(args.config) if args.config else {}
    synth = dict(data.get("synth", {}))
    trn = dict(data.get("train", {}))
    cal = dict(data.get("calibration", {}))
    seeds = data.get("seeds")
    if args.seed is not None:
        synth["seed"] = trn["seed"] = args.seed
        seeds = [args.seed]
    if args.dim is not None:
        synth["dim"] = args.dim
    if args.classes is not None:
        synth["num_classes"] = args.classes
    if args.epochs is not None:
        trn["epochs"] = args.epochs
    if args.lam is not None:
        trn["lam"] = args.lam
    if args.alpha is not None:
        cal["alpha"] = args.alpha
    cfg = ExperimentConfig(
        command=args.command,
        synth=_section("synth", synth),
        train=_section("train", trn),
        calibration=_section("calibration", cal),
        seeds=seeds,
        dataset=args.dataset or data.get("dataset"),
        checkpoint=args.checkpoint or data.get("checkpoint"),
        weights=args.weights or data.get("weights"),
        output_format=args.format or data.get("output_format", "csv"),
        out=args.out,
        parallel=args.parallel,
    )
    if cfg.seeds is None:
        cfg.seeds = [cfg.train.seed]
    if not isinstance(cfg.seeds, list) or not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("field 'seeds' must be a non-empty list of integers")
    if cfg.output_format not in FORMATS:
        raise ConfigError(f"field 'output_format' must be one of {FORMATS}, got {cfg.output_format!r}")
    if cfg.parallel < 1:
        raise ConfigError("--parallel must be >= 1")
    return cfg


def _cell(v, fmt):
    if v is None:
        return "" if fmt == "csv" else "-"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Run:
    """Output context: staging directory, config hash and table writer."""

    def __init__(self, cfg, staging):
        self.cfg = cfg
        self.staging = staging
        self.echo = cfg.echo()
        self.hash = config_hash(self.echo)

    def path(self, name):
        return os.path.join(self.staging, name)

    def table(self, name, columns, rows, meta=None):
        fmt = self.cfg.output_format
        header = [f"config_hash={self.hash}", f"command={self.cfg.command}"]
        header += [f"{k}={v}" for k, v in (meta or {}).items()]
        cells = [[_cell(r.get(c) if isinstance(r, dict) else r[i], fmt) for i, c in enumerate(columns)] for r in rows]
        path = self.path(name + (".csv" if fmt == "csv" else ".txt"))
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(columns)
                w.writerows(cells)
            else:
                widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
                fh.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
                for row in cells:
                    fh.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")
        return path


def _dataset(cfg):
    if cfg.dataset:
        if not os.path.isdir(cfg.dataset):
            raise ConfigError(f"dataset directory {cfg.dataset!r} does not exist")
        return load_dataset(cfg.dataset)
    return make_dataset(cfg.synth)


def _classifier(cfg, ds):
    if cfg.checkpoint:
        if not os.path.isfile(cfg.checkpoint):
            raise ConfigError(f"checkpoint {cfg.checkpoint!r} does not exist")
        return load_checkpoint(cfg.checkpoint)
    return train(ds, cfg.train).clf


def _metric_row(label, m):
    return {"stage": label, "all": m["all"], "many": m["many"], "medium": m["medium"], "few": m["few"],
            "mean_class": m["mean_class"]}


_METRIC_COLS = ["stage", "all", "many", "medium", "few", "mean_class"]
_SWEEP_COLS = ["alpha", "all", "many", "medium", "few"]


def cmd_gen_data(run):
    ds = make_dataset(run.cfg.synth)
    save_dataset(ds, run.path("data"))
    rows = [
        {"class": c, "count": int(n), "group": str(g), "kappa": float(p.kappa)}
        for c, (n, g, p) in enumerate(zip(ds.counts, ds.groups, ds.true_params))
    ]
    run.table("classes", ["class", "count", "group", "kappa"], rows)


def cmd_train(run):
    cfg = run.cfg
    ds = _dataset(cfg)
    state = train(ds, cfg.train)
    save_checkpoint(state.clf, run.path("classifier.ckpt.json"))
    cols = sorted(k for k in state.metrics[0] if k != "epoch")
    run.table("metrics", ["epoch"] + cols, state.metrics)
    inference = state.clf.with_prior(uniform_prior(state.clf.n_classes))
    run.table("evaluation", _METRIC_COLS, [_metric_row("final", evaluate(inference, ds.test, ds.groups))])


def cmd_calibrate(run):
    cfg = run.cfg
    ccfg = cfg.calibration
    if cfg.weights:
        if not os.path.isfile(cfg.weights):
            raise ConfigError(f"weights file {cfg.weights!r} does not exist")
        gw, file_cfg = read_weights(cfg.weights)
        ccfg = replace(file_cfg, alpha=ccfg.alpha)
        out = calibrate_generic(gw, ccfg)
        write_weights(out, run.path("calibrated_weights.csv"), ccfg, extra={"config_hash": run.hash})
        return
    ds = _dataset(cfg)
    clf = _classifier(cfg, ds)
    cal = calibrate(clf, ccfg)
    save_checkpoint(cal, run.path("calibrated.ckpt.json"))
    o = overlap_matrix(clf).row_avg
    o_hat = normalize_overlaps(o, clf.kappa)
    rows = [
        {"class": c, "kappa": clf.kappa[c], "row_overlap": o[c], "overlap_scaled": o_hat[c], "kappa_calibrated": cal.kappa[c]}
        for c in range(clf.n_classes)
    ]
    run.table("calibration", ["class", "kappa", "row_overlap", "overlap_scaled", "kappa_calibrated"], rows,
              {"alpha": ccfg.alpha})
    before = evaluate(clf.with_prior(uniform_prior(clf.n_classes)), ds.test, ds.groups)
    after = evaluate(cal, ds.test, ds.groups)
    run.table("evaluation", _METRIC_COLS, [_metric_row("uncalibrated", before), _metric_row("calibrated", after)])


def _seed_jobs(cfg, train_cfgs):
    jobs = []
    for tc in train_cfgs:
        for s in cfg.seeds:
            jobs.append((asdict(replace(cfg.synth, seed=s)), replace(tc, seed=s).to_dict()))
    return jobs


def _mean_rows(sweeps):
    out = []
    for i, first in enumerate(sweeps[0]):
        row = {"alpha": first["alpha"]}
        for k in _SWEEP_COLS[1:]:
            vals = [s[i][k] for s in sweeps]
            row[k] = None if any(v is None for v in vals) else float(np.mean(vals))
        out.append(row)
    return out


def cmd_sweep_alpha(run):
    cfg = run.cfg
    if cfg.checkpoint:
        ds = _dataset(cfg)
        rows = alpha_sweep(_classifier(cfg, ds), ds.test, ds.groups)
        n_seeds = 1
    else:
        results = run_many(_seed_jobs(cfg, [cfg.train]), cfg.parallel)
        rows = _mean_rows([r["sweep"] for r in results])
        n_seeds = len(results)
    run.table("alpha_sweep", _SWEEP_COLS, rows, {"seeds_averaged": n_seeds})


def cmd_ablate_loss(run):
    cfg = run.cfg
    cells = ablation_configs(cfg.train, ABLATION_VARIANTS, ABLATION_LAMBDAS)
    # with both terms off lambda has no effect, so those cells share one run
    unique, index = [], []
    for variant, lam, tc in cells:
        key = replace(tc, lam=0.0) if variant == "none" else tc
        if key not in unique:
            unique.append(key)
        index.append(unique.index(key))
    results = run_many(_seed_jobs(cfg, unique), cfg.parallel)
    n = len(cfg.seeds)
    per_cfg = [_mean_rows([r["sweep"] for r in results[i * n:(i + 1) * n]]) for i in range(len(unique))]
    rows = []
    for (variant, lam, _), u in zip(cells, index):
        base = per_cfg[u][-1]  # alpha = 1: uncalibrated compactness, uniform prior
        rows.append({"variant": variant, "lambda": lam, **{k: base[k] for k in _SWEEP_COLS[1:]}})
    run.table("ablation", ["variant", "lambda", "all", "many", "medium", "few"], rows, {"seeds_averaged": n})


def cmd_diagnose(run):
    cfg = run.cfg
    ds = _dataset(cfg)
    clf = _classifier(cfg, ds)
    om = overlap_matrix(clf)
    counts = ds.counts if len(ds.counts) == clf.n_classes else [None] * clf.n_classes
    rows = [
        {"class": c, "count": None if counts[c] is None else int(counts[c]), "kappa": clf.kappa[c],
         "row_overlap": om.row_avg[c]}
        for c in range(clf.n_classes)
    ]
    run.table("per_class", ["class", "count", "kappa", "row_overlap"], rows)
    n = clf.n_classes
    run.table("overlap_matrix", ["row", "col", "value"],
              [(i, j, om.values[i, j]) for i in range(n) for j in range(n)])
    g = surface_grid()
    srows = [
        (g["kappa_i"][a], g["cos"][b], g["overlap"][a, b], g["d_kappa_i"][a, b], g["d_cos"][a, b])
        for a in range(g["kappa_i"].size)
        for b in range(g["cos"].size)
    ]
    run.table("surface", ["kappa_i", "cos", "overlap", "d_overlap_d_kappa_i", "d_overlap_d_cos"], srows,
              {"kappa_j": 16.0, "dim": 512})


def cmd_verify(run):
    results = run_all()
    run.table("verify", ["check", "passed", "worst", "detail"],
              [{"check": r.name, "passed": r.passed, "worst": r.worst, "detail": r.detail} for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"failed checks: {failed}")


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate-loss": cmd_ablate_loss,
    "diagnose": cmd_diagnose,
    "verify": cmd_verify,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser():
    p = _Parser(prog="vmfcal", description="vMF long-tail calibration experiments")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--parallel", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--dataset", help="dataset directory written by gen-data")
    p.add_argument("--checkpoint", help="classifier checkpoint written by train")
    p.add_argument("--weights", help="weight CSV for generic-classifier calibration")
    return p


def _setup_logging():
    name = os.environ.get("VMF_LOG_LEVEL", "warn").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"VMF_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _commit(staging, out):
    os.makedirs(out, exist_ok=True)
    for name in sorted(os.listdir(staging)):
        dst = os.path.join(out, name)
        if os.path.isdir(dst):
            shutil.rmtree(dst)
        shutil.move(os.path.join(staging, name), dst)


def main(argv=None):
    args = make_parser().parse_args(argv)
    staging = None
    try:
        _setup_logging()
        cfg = build_config(args)
        parent = os.path.dirname(os.path.abspath(cfg.out))
        os.makedirs(parent, exist_ok=True)
        staging = tempfile.mkdtemp(prefix=".vmfcal-staging-", dir=parent)
        run = Run(cfg, staging)
        with open(run.path("config.json"), "w") as fh:
            json.dump({"config_hash": run.hash, "config": run.echo}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        started = _dt.datetime.now(_dt.timezone.utc)
        t0 = time.perf_counter()
        status = EXIT_OK
        try:
            _HANDLERS[cfg.command](run)
        except VerificationFailed as exc:
            logger.error("%s", exc)
            status = EXIT_VERIFY
        with open(run.path("timing.json"), "w") as fh:
            json.dump({"started": started.isoformat(), "seconds": time.perf_counter() - t0}, fh)
            fh.write("\n")
        _commit(staging, cfg.out)
        return status
    except ConfigError as exc:
        print(f"vmfcal: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"vmfcal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DomainError as exc:
        print(f"vmfcal: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        if staging and os.path.isdir(staging):
            shutil.rmtree(staging)


if __name__ == "__main__":
    sys.exit(main())
