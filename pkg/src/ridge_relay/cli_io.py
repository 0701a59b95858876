"""Command line driver and on-disk formats.

The unit of persistence is the *state file*: one JSON document holding
the covariate registry, the shrinkage target the model started from, the
full update history, and the retained batches. Schema versioning is
explicit (``ridge-relay-state/1``); floats are serialized through JSON's
shortest round-trip representation, so a load immediately followed by a
save reproduces the bytes exactly. Writes go to a temporary file in the
target directory followed by an atomic rename, and an advisory lock file
(``<state>.lock``) guards read-modify-write command runs.

Exit codes: 0 success; 2 invalid inputs (schema, CSV, configuration);
3 numerical failure of a fit (non-convergence, singular system);
4 penalty-selection or locking failure.

Data comes in as headed CSV, strictly numeric; anything unparsable is an
error rather than a guess. Simulation output is written as small "plot
dataset" pairs: a flat CSV plus a JSON sidecar with the metadata needed
to reproduce it. The environment variable ``RIDGE_RELAY_THREADS`` caps
worker threads package-wide.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    ConvergenceError,
    EstimationError,
    LockError,
    RegistryError,
    RidgeRelayError,
    SelectionError,
    SingularMatrixError,
    StateFileError,
    ValidationError,
)
from .model_core import (
    Batch,
    CoefficientVector,
    CovariateRegistry,
    EstimatorState,
    UpdateRecord,
    align_batch,
    assemble_target,
)
from .linear_estimator import fit_targeted_ridge, update
from .logistic_estimator import irls_fit, update_logistic
from .penalty_tuning import (
    DEFAULT_GRID_MAX,
    DEFAULT_GRID_MIN,
    DEFAULT_GRID_POINTS,
    PenaltySearchConfig,
    default_grid,
    select_penalty,
)
from .sim_harness import (
    ScenarioConfig,
    run_study_mixed_vs_updated,
    run_study_regular_vs_updated,
    tracked_positions,
)

__all__ = [
    "STATE_SCHEMA",
    "state_to_doc",
    "doc_to_state",
    "read_state",
    "write_state",
    "state_lock",
    "read_batch_csv",
    "PlotDataset",
    "write_plot_dataset",
    "main",
]

STATE_SCHEMA = "ridge-relay-state/1"


# ---------------------------------------------------------------------------
# state file round trip

def state_to_doc(state: EstimatorState) -> dict:
    """Plain-JSON document for a state, floats untouched."""
    return {
        "schema": STATE_SCHEMA,
        "family": state.family,
        "covariates": list(state.registry.names),
        "init": {"note": state.init_note, "target": dict(state.init_target.values)},
        "history": [
            {
                "t": rec.t,
                "lam": rec.lam,
                "estimate": dict(rec.estimate.values),
                "weights": list(rec.weights) if rec.weights is not None else None,
                "diagnostics": dict(rec.diagnostics),
            }
            for rec in state.history
        ],
        "batches": [
            {
                "t": b.t,
                "covariates": list(b.covariates),
                "x": [[float(v) for v in row] for row in b.X],
                "y": [float(v) for v in b.y],
            }
            for b in state.retained
        ],
    }


def doc_to_state(doc: dict) -> EstimatorState:
    """Rebuild a state from its document, validating the schema tag."""
    if not isinstance(doc, dict):
        raise StateFileError("state document must be a JSON object")
    schema = doc.get("schema")
    if schema != STATE_SCHEMA:
        raise StateFileError(f"unsupported state schema {schema!r}, expected {STATE_SCHEMA!r}")
    try:
        family = doc["family"]
        registry = CovariateRegistry(tuple(doc["covariates"]))
        init = doc["init"]
        history = tuple(
            UpdateRecord(
                t=int(rec["t"]),
                lam=rec["lam"],
                estimate=CoefficientVector(rec["estimate"]),
                weights=tuple(rec["weights"]) if rec.get("weights") is not None else None,
                diagnostics=rec.get("diagnostics", {}),
            )
            for rec in doc["history"]
        )
        retained = tuple(
            Batch(t=int(b["t"]), X=np.asarray(b["x"], dtype=float),
                  y=np.asarray(b["y"], dtype=float),
                  covariates=tuple(b["covariates"]), family=family)
            for b in doc["batches"]
        )
        return EstimatorState(
            family=family,
            registry=registry,
            init_target=CoefficientVector(init["target"]),
            init_note=str(init.get("note", "zeros")),
            history=history,
            retained=retained,
        )
    except KeyError as exc:
        raise StateFileError(f"state document is missing field {exc.args[0]!r}") from None


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def read_state(path: str) -> EstimatorState:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise StateFileError(f"state file {path!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise StateFileError(f"state file {path!r} is not valid JSON: {exc}") from None
    return doc_to_state(doc)


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-state-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_state(state: EstimatorState, path: str) -> None:
    """Serialize and atomically replace ``path``; readers never see partial writes."""
    _atomic_write_text(path, _dump(state_to_doc(state)))


@contextmanager
def state_lock(path: str):
    """Advisory lock around a state file's read-modify-write cycle.

    Purely cooperative: a crash can leave the lock file behind, in which
    case the operator removes ``<state>.lock`` after checking no run is
    active.
    """
    lock_path = path + ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"lock file {lock_path!r} exists; another run may be active "
            "(remove it if that run is dead)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(lock_path)
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# CSV ingestion

def _read_csv_columns(path: str) -> tuple[list[str], list[list[float]]]:
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ValidationError(f"data file {path!r} does not exist") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path!r} is empty; expected a header row") from None
        header = [h.strip() for h in header]
        if any(not h for h in header):
            raise ValidationError(f"{path!r} has an empty column name")
        if len(set(header)) != len(header):
            raise ValidationError(f"{path!r} has duplicate column names")
        rows: list[list[float]] = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            if len(raw) != len(header):
                raise ValidationError(
                    f"{path!r} line {lineno}: {len(raw)} fields for "
                    f"{len(header)} columns")
            parsed = []
            for name, cell in zip(header, raw):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValidationError(
                        f"{path!r} line {lineno}: column {name!r} has "
                        f"non-numeric value {cell.strip()!r}") from None
            rows.append(parsed)
    if not rows:
        raise ValidationError(f"{path!r} contains no data rows")
    return header, rows


def read_batch_csv(path: str, response: str, t: int, family: str) -> Batch:
    """Load one batch from headed CSV; every cell must parse as a number."""
    header, rows = _read_csv_columns(path)
    if response not in header:
        raise ValidationError(f"{path!r} has no column {response!r}")
    data = np.asarray(rows)
    y_col = header.index(response)
    covariates = tuple(h for h in header if h != response)
    x_cols = [i for i in range(len(header)) if i != y_col]
    return Batch(t=t, X=data[:, x_cols], y=data[:, y_col],
                 covariates=covariates, family=family)


def read_covariate_csv(path: str, registry: CovariateRegistry,
                       drop: str | None = None) -> np.ndarray:
    """Covariate rows aligned to the registry; unknown columns are errors."""
    header, rows = _read_csv_columns(path)
    if drop is not None and drop in header:
        keep = [i for i, h in enumerate(header) if h != drop]
        header = [header[i] for i in keep]
        rows = [[r[i] for i in keep] for r in rows]
    for name in header:
        if name not in registry:
            raise RegistryError(f"{path!r} column {name!r} is not a model covariate")
    data = np.asarray(rows)
    out = np.zeros((data.shape[0], registry.size))
    for j, name in enumerate(header):
        out[:, registry.index_of(name)] = data[:, j]
    return out


# ---------------------------------------------------------------------------
# plot datasets

@dataclass(frozen=True)
class PlotDataset:
    """A flat table destined for plotting, plus its metadata sidecar."""

    name: str
    columns: dict[str, list]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.name or "/" in self.name:
            raise ValidationError("dataset names must be non-empty and path-free")
        if not self.columns:
            raise ValidationError("a plot dataset needs at least one column")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) != 1:
            raise ValidationError("all columns must have the same length")


def write_plot_dataset(dataset: PlotDataset, out_dir: str) -> tuple[str, str]:
    """Write ``<name>.csv`` and ``<name>.meta.json``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, dataset.name + ".csv")
    meta_path = os.path.join(out_dir, dataset.name + ".meta.json")
    names = list(dataset.columns)
    cols = [dataset.columns[n] for n in names]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*cols):
            writer.writerow(["" if _is_nan(v) else v for v in row])
    _atomic_write_text(meta_path, _dump(dataset.metadata))
    return csv_path, meta_path


def _is_nan(v) -> bool:
    return isinstance(v, float) and np.isnan(v)


def _trajectory_datasets(study: str, config: ScenarioConfig, results) -> list[PlotDataset]:
    meta = {
        "study": study,
        "config": config.to_dict(),
        "series": [r.name for r in results],
        "tracked": list(tracked_positions(config)),
        "quantiles": [0.05, 0.5, 0.95],
    }
    series, ts, coords, q05, q50, q95 = [], [], [], [], [], []
    for r in results:
        bands = r.quantile_bands()
        for ci, pos in enumerate(r.tracked):
            for ti, t in enumerate(r.t_values):
                series.append(r.name)
                ts.append(int(t))
                coords.append(int(pos))
                q05.append(float(bands[0, ti, ci]))
                q50.append(float(bands[1, ti, ci]))
                q95.append(float(bands[2, ti, ci]))
    quant = PlotDataset(
        name=f"{study}_quantile_trajectories",
        columns={"series": series, "t": ts, "coordinate": coords,
                 "q05": q05, "q50": q50, "q95": q95},
        metadata=meta,
    )
    series2, ts2, mse = [], [], []
    for r in results:
        mean = r.mean_loss()
        for ti, t in enumerate(r.t_values):
            series2.append(r.name)
            ts2.append(int(t))
            mse.append(float(mean[ti]))
    curves = PlotDataset(
        name=f"{study}_mse_curves",
        columns={"series": series2, "t": ts2, "mean_squared_error": mse},
        metadata=meta,
    )
    return [quant, curves]


# ---------------------------------------------------------------------------
# commands

def _print_json(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _selection_config(args, constrained_default: bool = True) -> PenaltySearchConfig:
    grid = default_grid(args.grid_min, args.grid_max, args.grid_points)
    k_folds = None if (args.loocv or args.k_folds is None) else args.k_folds
    constrained = constrained_default
    if getattr(args, "constrained", None) is not None:
        constrained = args.constrained
    return PenaltySearchConfig(k_folds=k_folds, constrained=constrained, grid=grid,
                               seed=args.seed)


def _fit_initial(batch: Batch, lam: float) -> np.ndarray:
    zeros = np.zeros(batch.p)
    if batch.family == "linear":
        return fit_targeted_ridge(batch.X, batch.y, lam, zeros).coef
    return irls_fit(batch.X, batch.y, lam, zeros).coef


def cmd_init(args) -> int:
    if os.path.exists(args.state) and not args.force:
        raise ValidationError(
            f"state file {args.state!r} exists; pass --force to overwrite")
    sources = [s for s in (args.covariates, args.target_file, args.data) if s]
    if len(sources) != 1:
        raise ValidationError(
            "exactly one of --covariates, --target-file, --data must be given")
    report: dict = {"state": args.state, "family": args.family}
    if args.covariates:
        names = tuple(n.strip() for n in args.covariates.split(","))
        state = EstimatorState(
            family=args.family,
            registry=CovariateRegistry(names),
            init_target=CoefficientVector({n: 0.0 for n in names}),
            init_note="zeros",
        )
        report["init"] = "zeros"
    elif args.target_file:
        try:
            with open(args.target_file, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"target file {args.target_file!r} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"target file is not valid JSON: {exc}") from None
        if not isinstance(doc, dict) or not doc:
            raise ValidationError("target file must be a non-empty JSON object")
        target = CoefficientVector(doc)
        state = EstimatorState(
            family=args.family,
            registry=CovariateRegistry(target.names()),
            init_target=target,
            init_note="target-file",
        )
        report["init"] = "target-file"
    else:
        if not args.response:
            raise ValidationError("--data requires --response")
        batch = read_batch_csv(args.data, args.response, t=0, family=args.family)
        blank = EstimatorState(
            family=args.family,
            registry=CovariateRegistry(batch.covariates),
            init_target=CoefficientVector({n: 0.0 for n in batch.covariates}),
        )
        sel = _selection_config(args, constrained_default=False)
        chosen = select_penalty(blank, batch, sel)
        coef = _fit_initial(batch, chosen.chosen_lambda)
        state = EstimatorState(
            family=args.family,
            registry=CovariateRegistry(batch.covariates),
            init_target=CoefficientVector.from_array(batch.covariates, coef),
            init_note="fit-first-batch",
            retained=(batch,),
        )
        report["init"] = "fit-first-batch"
        report["lam"] = chosen.chosen_lambda
        report["score"] = chosen.score
        report["n"] = batch.n
    with state_lock(args.state):
        write_state(state, args.state)
    report["covariates"] = state.registry.size
    _print_json(report)
    return 0


def _run_selection(args, state: EstimatorState, batch: Batch):
    sel = _selection_config(args)
    report = select_penalty(state, batch, sel)
    return sel, report


def cmd_update(args) -> int:
    with state_lock(args.state):
        state = read_state(args.state)
        batch = read_batch_csv(args.data, args.response, t=state.t + 1,
                               family=state.family)
        _, report = _run_selection(args, state, batch)
        diagnostics = {
            "lam": report.chosen_lambda,
            "score": report.score,
            "constrained": report.constrained,
            "fallback_used": report.fallback_used,
            "n_feasible": sum(1 for c in report.cv_curve if c.feasible),
            "k_folds": report.k_folds,
            "seed": report.seed,
            "n": batch.n,
        }
        if state.family == "linear":
            state = update(state, batch, report.chosen_lambda, diagnostics=diagnostics)
        else:
            state = update_logistic(state, batch, report.chosen_lambda, diagnostics=diagnostics)
        write_state(state, args.state)
    out = dict(state.history[-1].diagnostics)
    out.update({"t": state.t, "state": args.state,
                "new_fraction": report.new_fraction})
    _print_json(out)
    return 0


def cmd_select_lambda(args) -> int:
    state = read_state(args.state)
    batch = read_batch_csv(args.data, args.response, t=state.t + 1,
                           family=state.family)
    _, report = _run_selection(args, state, batch)
    _print_json(report.to_dict())
    return 0


def cmd_predict(args) -> int:
    state = read_state(args.state)
    X = read_covariate_csv(args.data, state.registry, drop=args.response)
    names = state.registry.names
    coef = assemble_target(state, names).as_array(names)
    eta = X @ coef
    values = expit(eta) if state.family == "logistic" else eta
    for v in values:
        sys.stdout.write(f"{float(v)!r}\n")
    return 0


def cmd_simulate(args) -> int:
    try:
        with open(args.scenario, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"scenario file {args.scenario!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"scenario file is not valid JSON: {exc}") from None
    config = ScenarioConfig.from_dict(doc)
    if config.study == "regular-vs-updated":
        results = run_study_regular_vs_updated(config)
    else:
        results = run_study_mixed_vs_updated(config)
    written = []
    for dataset in _trajectory_datasets(config.study, config, results):
        csv_path, meta_path = write_plot_dataset(dataset, args.out)
        written.extend([csv_path, meta_path])
    _print_json({"study": config.study, "files": written,
                 "replicates": config.n_replicates})
    return 0


def cmd_export(args) -> int:
    state = read_state(args.state)
    w = sys.stdout.write
    w(f"family:     {state.family}\n")
    w(f"updates:    {state.t}\n")
    w(f"covariates: {state.registry.size}\n")
    w(f"init:       {state.init_note}\n")
    if state.history:
        w("history:\n")
        for rec in state.history:
            w(f"  t={rec.t} lam={rec.lam!r}")
            if rec.weights is not None:
                w(f" weights={list(rec.weights)}")
            w("\n")
    w("estimate:\n")
    current = assemble_target(state, state.registry.names)
    for name in state.registry.names:
        w(f"  {name} = {current[name]!r}\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_selection_flags(sub, with_constraint: bool = True,
                         k_default: int | None = 5) -> None:
    k_help = ("cross-validation folds (default 5)" if k_default
              else "cross-validation folds (default: leave-one-out)")
    sub.add_argument("--k-folds", type=int, default=k_default, help=k_help)
    sub.add_argument("--loocv", action="store_true",
                     help="leave-one-out cross-validation")
    if with_constraint:
        group = sub.add_mutually_exclusive_group()
        group.add_argument("--constrained", dest="constrained",
                           action="store_true", default=None,
                           help="require candidate penalties to preserve historic fit (default)")
        group.add_argument("--unconstrained", dest="constrained",
                           action="store_false",
                           help="score candidates by cross-validation alone")
    sub.add_argument("--grid-min", type=float, default=DEFAULT_GRID_MIN)
    sub.add_argument("--grid-max", type=float, default=DEFAULT_GRID_MAX)
    sub.add_argument("--grid-points", type=int, default=DEFAULT_GRID_POINTS)
    sub.add_argument("--seed", type=int, default=0,
                     help="seed for fold assignment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ridge-relay",
        description="Sequentially re-estimate a (generalized) linear model, "
                    "shrinking each batch's fit toward the previous estimate.",
        epilog="RIDGE_RELAY_THREADS caps worker threads (1 disables pools).")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("init", help="create a new state file")
    p.add_argument("--state", required=True)
    p.add_argument("--family", choices=("linear", "logistic"), default="linear")
    p.add_argument("--covariates", help="comma-separated names, zero init target")
    p.add_argument("--target-file", help="JSON object {covariate: value} init target")
    p.add_argument("--data", help="CSV batch to fit the init target from")
    p.add_argument("--response", help="response column of --data")
    p.add_argument("--force", action="store_true", help="overwrite an existing state")
    _add_selection_flags(p, with_constraint=False, k_default=None)
    p.set_defaults(func=cmd_init, constrained=False)

    p = commands.add_parser("update", help="apply one batch to the model")
    p.add_argument("--state", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_update)

    p = commands.add_parser("select-lambda",
                            help="run penalty selection without updating the state")
    p.add_argument("--state", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_select_lambda)

    p = commands.add_parser("predict", help="predict responses for covariate rows")
    p.add_argument("--state", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--response", help="column to ignore if present")
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("simulate", help="run a simulation study")
    p.add_argument("--scenario", required=True, help="JSON scenario configuration")
    p.add_argument("--out", required=True, help="output directory for plot datasets")
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser("export", help="print a state file as a readable summary")
    p.add_argument("--state", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, RegistryError, StateFileError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (ConvergenceError, SingularMatrixError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3
    except (SelectionError, EstimationError, LockError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 4
    except RidgeRelayError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
