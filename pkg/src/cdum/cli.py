"""``cdum`` command line: data generation, training, scoring, evaluation, simulation, checks.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import gradcheck
from .baselines import meta_learner_fit
from .checkpoint import load_model, save_model
from .config import ExperimentConfig, load_config
from .cpm import CpmConfig, cpm_fit
from .data import SynthSpec, generate_synth, read_dataset, split_811, write_dataset, write_ground_truth
from .errors import (CategoryError, CdumError, CheckpointError, ConfigError, DimensionError, EmptyDatasetError,
                     MissingArmError, ParseError, SchemaError, TreatmentIndexError, VocabularyError)
from .fic import FicConfig, FicModel, fic_fit
from .metrics import (auuc_avg, lift_at_h, per_treatment_sets, qini_auc, uplift_auc, write_curves,
                      write_report)
from .simulator import (Policy, log_to_batch, lt_metrics, observe_users, read_requests, request_log, simulate,
                        world_rct, write_requests)
from .world import Population

log = logging.getLogger("cdum")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigError, SchemaError, ParseError, DimensionError, VocabularyError, TreatmentIndexError,
                     CategoryError, MissingArmError, CheckpointError, EmptyDatasetError, FileNotFoundError)
DEFAULT_POLICIES = ["cdum", "offline_only", "random(0.5)", "always_off"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------

def _out(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _version(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(cfg: ExperimentConfig, command: str, argv: list[str], outputs: list[Path]) -> Path:
    doc = {
        "command": command,
        "argv": argv,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"artifact": _version("artifact"), "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {str(p.name): _sha256(p) for p in outputs if p.exists()},
    }
    path = _out(cfg) / f"manifest-{command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_table(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else repr(v) if isinstance(v, float) else str(v) for v in row])


def _read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as exc:
            raise ParseError(f"{path}: non-numeric score ({exc})") from None
    return header, np.asarray(rows).reshape(-1, len(header))


def _offline(cfg: ExperimentConfig, path: str | None):
    ds_path = Path(path) if path else _out(cfg) / "offline.csv"
    if not ds_path.exists():
        raise FileNotFoundError(f"{ds_path} not found; run gen-data first or pass --data")
    return read_dataset(ds_path, "generic" if path is None else cfg.data.schema), ds_path


def _split(cfg: ExperimentConfig, n: int):
    return split_811(n, cfg.seed)


def _cpm_config(cfg: ExperimentConfig, k: int, **changes) -> CpmConfig:
    return CpmConfig(treatment_count=k, **{**cfg.cpm.__dict__, **changes})


def _fic_config(cfg: ExperimentConfig) -> FicConfig:
    return FicConfig(task_count=cfg.sim.category_count, **cfg.fic.__dict__)


def _world(cfg: ExperimentConfig):
    pop = Population.draw(cfg.sim)
    return pop, observe_users(cfg.sim, pop, cfg.data.warmup_days)


def _evaluate_scores(scores: np.ndarray, arm: np.ndarray, y: np.ndarray, h: float) -> dict[str, float]:
    sets = per_treatment_sets(scores, arm, y)
    report = {}
    for k, es in enumerate(sets, start=1):
        report[f"qini_{k}"] = qini_auc(es)
        report[f"auuc_{k}"] = uplift_auc(es)
        report[f"lift_{k}"] = lift_at_h(es, h)
    report["qini_mean"] = float(np.mean([report[f"qini_{k}"] for k in range(1, len(sets) + 1)]))
    report["auuc_avg"] = auuc_avg(sets)
    report["h"] = float(h)
    return report


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, args) -> list[Path]:
    out = _out(cfg)
    d = cfg.data
    outputs = [out / "offline.csv", out / "offline.schema.json"]
    if d.source == "synth":
        spec = SynthSpec(user_count=d.user_count, feature_count=d.feature_count, treatment_count=d.treatment_count,
                         noise=d.noise, effect_scale=d.effect_scale, seed=cfg.seed)
        ds, truth = generate_synth(spec)
        write_ground_truth(truth, out / "ground_truth.csv")
        outputs.append(out / "ground_truth.csv")
    elif d.source == "world":
        pop, features = _world(cfg)
        ds = world_rct(cfg.sim, pop, features, d.rct_days)
    else:
        ds = read_dataset(d.path, d.schema)
    write_dataset(ds, out / "offline.csv")
    if sum(d.request_days) > 0:
        write_requests(request_log(cfg.sim, d.request_days, seed=cfg.seed), out / "requests.csv")
        outputs.append(out / "requests.csv")
    print(f"wrote {len(ds)} offline instances to {out / 'offline.csv'}")
    return outputs


def cmd_train_cpm(cfg: ExperimentConfig, args) -> list[Path]:
    ds, _ = _offline(cfg, args.data)
    sp = _split(cfg, len(ds))
    k = ds.schema.treatment_count
    kind = args.model
    if kind == "cpm":
        model, hist = cpm_fit(ds.take(sp.train), ds.take(sp.validation), _cpm_config(cfg, k), cfg.train, cfg.seed)
        histories = [hist]
    else:
        model, histories = meta_learner_fit(ds.take(sp.train), ds.take(sp.validation), kind[0].upper(),
                                            _cpm_config(cfg, k), cfg.train, cfg.seed)
    out = _out(cfg)
    path = out / f"{kind}.json"
    save_model(model, path)
    hpath = out / f"{kind}-history.json"
    hpath.write_text(json.dumps([h.to_dict() for h in histories], indent=1) + "\n", encoding="utf-8")
    print(f"{kind}: validation loss {histories[0].val_loss[0]:.6g} -> {histories[0].val_loss[-1]:.6g}; saved {path}")
    return [path, hpath]


def _requests(cfg: ExperimentConfig, path: str | None):
    req_path = Path(path) if path else _out(cfg) / "requests.csv"
    if not req_path.exists():
        raise FileNotFoundError(f"{req_path} not found; run gen-data first or pass --requests")
    return read_requests(req_path, cfg.sim)


def cmd_train_fic(cfg: ExperimentConfig, args) -> list[Path]:
    batch = _requests(cfg, args.requests)
    sp = _split(cfg, len(batch))
    model, hist = fic_fit(batch.take(sp.train), batch.take(sp.validation), cfg.sim.sequence_specs(),
                          _fic_config(cfg), cfg.fic_train, cfg.seed)
    out = _out(cfg)
    path = out / "fic.json"
    save_model(model, path)
    hpath = out / "fic-history.json"
    hpath.write_text(json.dumps(hist.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"fic: validation loss {hist.val_loss[0]:.6g} -> {hist.val_loss[-1]:.6g}; saved {path}")
    return [path, hpath]


def cmd_predict(cfg: ExperimentConfig, args) -> list[Path]:
    model = load_model(args.model)
    out = _out(cfg)
    if isinstance(model, FicModel):
        batch = _requests(cfg, args.requests)
        scores = model.predict(batch, cfg.decision.clamp_low, cfg.decision.clamp_high)
        path = out / "interest_scores.csv"
        header = ["request_id"] + [f"r{k}" for k in range(1, scores.shape[1] + 1)]
    else:
        ds, _ = _offline(cfg, args.data)
        scores = model.predict_all(ds.x)
        path = out / "preference_scores.csv"
        header = ["user_id"] + [f"y{k}" for k in range(scores.shape[1])]
    _write_table(path, header, ([i] + [float(v) for v in row] for i, row in enumerate(scores)))
    print(f"wrote {scores.shape[0]} score rows to {path}")
    return [path]


def cmd_evaluate(cfg: ExperimentConfig, args) -> list[Path]:
    ds, _ = _offline(cfg, args.data)
    header, table = _read_table(Path(args.scores) if args.scores else _out(cfg) / "preference_scores.csv")
    if header[0] != "user_id" or table.shape[0] != len(ds):
        raise SchemaError("score table must have a user_id column and one row per dataset instance")
    ids = table[:, 0].astype(np.int64)
    scores = np.empty((len(ds), table.shape[1] - 1))
    scores[ids] = table[:, 1:]
    rows = {"test": _split(cfg, len(ds)).test, "all": np.arange(len(ds))}[args.split]
    h = cfg.h if args.h is None else args.h
    report = _evaluate_scores(scores[rows], ds.treatment[rows], ds.y[rows], h)
    out = _out(cfg)
    path = out / "evaluation.txt"
    write_report(report, path)
    outputs = [path]
    for k, es in enumerate(per_treatment_sets(scores[rows], ds.treatment[rows], ds.y[rows]), start=1):
        write_curves(es, out / f"curves_{k}.csv")
        outputs.append(out / f"curves_{k}.csv")
    for key, value in report.items():
        print(f"{key}={value:.6g}")
    return outputs


def _sim_row(policy, run, seed, log_) -> list:
    e7, s7 = lt_metrics(log_, 7)
    e30, s30 = lt_metrics(log_, 30)
    return [str(policy), run, seed, float(log_.total_usage.mean()), e7, s7, e30, s30]


SIM_HEADER = ["policy", "run", "seed", "mean_usage_seconds", "enter_lt7", "slide_lt7", "enter_lt30", "slide_lt30"]


def cmd_simulate(cfg: ExperimentConfig, args) -> list[Path]:
    policies = [Policy.parse(p) for p in (args.policy or DEFAULT_POLICIES)]
    cpm = fic = features = None
    pop = Population.draw(cfg.sim)
    if any(p.uses_models for p in policies):
        if not args.cpm:
            raise ConfigError("model-driven policies need --cpm")
        cpm = load_model(args.cpm)
        features = observe_users(cfg.sim, pop, cfg.data.warmup_days)
        if any(p.name == "cdum" for p in policies):
            if not args.fic:
                raise ConfigError("policy cdum needs --fic")
            fic = load_model(args.fic, "fic")
    out = _out(cfg)
    rows = []
    outputs = []
    for run in range(args.runs):
        sim = replace(cfg.sim, seed=cfg.sim.seed + run)
        for p in policies:
            lg = simulate(p, sim, cpm, fic, population=pop, user_features=features, decision=cfg.decision)
            rows.append(_sim_row(p, run, sim.seed, lg))
            if args.export and run == 0:
                path = out / f"simlog_{p.name}{p.arm or ''}.csv"
                lg.export(path)
                outputs.append(path)
    path = out / "simulation.csv"
    _write_table(path, SIM_HEADER, rows)
    for p in policies:
        usage = [r[3] for r in rows if r[0] == str(p)]
        print(f"{p}: mean usage {np.mean(usage):.2f} s over {len(usage)} run(s)")
    return [path] + outputs


def cmd_gradcheck(cfg: ExperimentConfig, args) -> list[Path]:
    results = gradcheck.run_all(args.probes, cfg.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
    status = "PASS" if worst < gradcheck.TOLERANCE else "FAIL"
    print(f"{status}: worst {worst:.3e} (tolerance {gradcheck.TOLERANCE:g})")
    path = _out(cfg) / "gradcheck.txt"
    write_report(results, path)
    args.failed = worst >= gradcheck.TOLERANCE
    return [path]


def cmd_ablate(cfg: ExperimentConfig, args) -> list[Path]:
    """Baseline and component ablations on the simulated world, sharing data, splits and seeds."""
    pop, features = _world(cfg)
    ds = world_rct(cfg.sim, pop, features, cfg.data.rct_days)
    sp = _split(cfg, len(ds))
    k = ds.schema.treatment_count
    test = ds.take(sp.test)
    requests = request_log(cfg.sim, cfg.data.request_days or [2, 2, 2], pop, seed=cfg.seed)
    batch = log_to_batch(requests, cfg.sim)
    rsp = _split(cfg, len(batch))
    fic, _ = fic_fit(batch.take(rsp.train), batch.take(rsp.validation), cfg.sim.sequence_specs(),
                     _fic_config(cfg), cfg.fic_train, cfg.seed)
    variants = [("baseline", {}, "cdum"), ("no_indicator", {"use_indicator": False}, "cdum"),
                ("no_guidance", {"use_guidance": False}, "cdum"), ("no_fic", {}, "offline_only")]
    models = {}
    rows = []
    for name, changes, policy in variants:
        key = tuple(sorted(changes.items()))
        if key not in models:
            models[key], _ = cpm_fit(ds.take(sp.train), ds.take(sp.validation), _cpm_config(cfg, k, **changes),
                                     cfg.train, cfg.seed)
        model = models[key]
        report = _evaluate_scores(model.predict_all(test.x), test.treatment, test.y, cfg.h)
        usage, e7, s7 = [], [], []
        for run in range(args.runs):
            lg = simulate(policy, replace(cfg.sim, seed=cfg.sim.seed + run), model, fic, population=pop,
                          user_features=features, decision=cfg.decision)
            usage.append(float(lg.total_usage.mean()))
            e, s = lt_metrics(lg, 7)
            e7.append(e)
            s7.append(s)
        rows.append([name, report["qini_mean"], report["auuc_avg"], float(np.mean(usage)), float(np.mean(e7)),
                     float(np.mean(s7))])
        print(f"{name}: qini {report['qini_mean']:.4f} auuc {report['auuc_avg']:.4f} usage {np.mean(usage):.1f} s")
    path = _out(cfg) / "ablation.csv"
    _write_table(path, ["variant", "qini_mean", "auuc_avg", "mean_usage_seconds", "enter_lt7", "slide_lt7"], rows)
    return [path]


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate offline and request data"),
    "train-cpm": (cmd_train_cpm, "train the offline preference model or a meta-learner baseline"),
    "train-fic": (cmd_train_fic, "train the online interest model"),
    "predict": (cmd_predict, "write preference or interest score tables"),
    "evaluate": (cmd_evaluate, "QINI, AUUC and LIFT@h from a score table"),
    "simulate": (cmd_simulate, "run policies in the simulator and report retention"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient checks on small networks"),
    "ablate": (cmd_ablate, "baseline versus component ablations"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--output-dir", help="overrides the output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="cdum", description="Duration treatment uplift modeling toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {name: sub.add_parser(name, parents=[common], help=help_) for name, (_, help_) in COMMANDS.items()}
    subs["train-cpm"].add_argument("--data")
    subs["train-cpm"].add_argument("--model", choices=["cpm", "s_learner", "t_learner"], default="cpm")
    subs["train-fic"].add_argument("--requests")
    subs["predict"].add_argument("--model", required=True, help="checkpoint path")
    subs["predict"].add_argument("--data")
    subs["predict"].add_argument("--requests")
    subs["evaluate"].add_argument("--scores")
    subs["evaluate"].add_argument("--data")
    subs["evaluate"].add_argument("--split", choices=["test", "all"], default="test")
    subs["evaluate"].add_argument("--h", type=float, default=None, help="LIFT@h percentage (default 30)")
    subs["simulate"].add_argument("--policy", action="append",
                                  help="cdum, offline_only, always_on(k), always_off or random(p); repeatable")
    subs["simulate"].add_argument("--cpm")
    subs["simulate"].add_argument("--fic")
    subs["simulate"].add_argument("--runs", type=int, default=1)
    subs["simulate"].add_argument("--export", action="store_true", help="write per-request logs of run 0")
    subs["gradcheck"].add_argument("--probes", type=int, default=300)
    subs["ablate"].add_argument("--runs", type=int, default=3)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.config is None and args.seed is None:
        # flag-only runs default the seed; config files must declare one
        overrides.append("seed=0")
    args.failed = False
    try:
        cfg = load_config(args.config, overrides)
        handler = COMMANDS[args.command][0]
        outputs = handler(cfg, args)
        write_manifest(cfg, args.command, argv, outputs)
    except VALIDATION_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CdumError, ArithmeticError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME if args.failed else EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
