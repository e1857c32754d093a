"""Command line interface: ``panellasso {fit,simulate,diagnose}``.

Exit codes: 0 on success, 2 for input errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, theory
from .lasso_solver import SolverSettings
from .panel_lasso import (
    ConvergenceError,
    PanelFit,
    RankDeficientError,
    fit_adaptive,
    fit_bic,
    fit_single_penalty_reduction,
)
from .panel_model import (
    STANDARDIZE_TARGETS,
    InvalidInputError,
    PanelDataset,
    standardize_covariates,
)
from .simulation import (
    ESTIMATOR_LABELS,
    ESTIMATORS,
    ExperimentConfig,
    population_gram,
    preset,
    run_experiment,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
MISSING = {"", "na", "nan", "null", "none", "."}

logger = logging.getLogger("panellasso")


# --- CSV ingestion ---------------------------------------------------------------------------


@dataclass
class IngestedPanel:
    """A dataset read from long-format CSV with its labels.

    ``scales`` holds the standardization divisors (ones when off); fitted
    covariate coefficients map back to the original units as ``b / scales``.
    """

    data: PanelDataset
    ids: list
    times: list
    columns: list[str]
    scales: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.scales is None:
            self.scales = np.ones(len(self.columns))


def _sort_key(values):
    # Numeric order when every key parses as a finite number, text order otherwise.
    try:
        table = {v: float(v) for v in values}
    except ValueError:
        return lambda v: v
    if all(math.isfinite(x) for x in table.values()):
        return table.__getitem__
    return lambda v: v


def _parse_float(text: str, column: str, line: int) -> float:
    if text.strip().lower() in MISSING:
        raise InvalidInputError(f"missing value in column {column!r} at line {line}")
    try:
        return float(text)
    except ValueError:
        raise InvalidInputError(
            f"non-numeric value {text!r} in column {column!r} at line {line}") from None


def ingest_csv(path, id_col: str, time_col: str, y_col: str, *,
               columns: list[str] | None = None, standardize: bool = False,
               target: str = "sqrt_nt") -> IngestedPanel:
    """Read a long-format panel, sort by (id, time) and check balance.

    All columns other than ``id_col``, ``time_col`` and ``y_col`` are
    covariates unless ``columns`` names a subset.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise InvalidInputError(f"{path}: empty file or missing header")
        for col in (id_col, time_col, y_col):
            if col not in header:
                raise InvalidInputError(f"{path}: column {col!r} not found in header")
        if len(set(header)) != len(header):
            raise InvalidInputError(f"{path}: duplicate column names in header")
        keys = {id_col, time_col, y_col}
        covs = [c for c in header if c not in keys] if columns is None else list(columns)
        unknown = [c for c in covs if c not in header or c in keys]
        if unknown:
            raise InvalidInputError(f"{path}: unknown covariate columns {unknown}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if None in rec or any(rec.get(c) is None for c in header):
                raise InvalidInputError(f"{path}: line {line} has the wrong number of fields")
            ident, when = rec[id_col].strip(), rec[time_col].strip()
            if ident.lower() in MISSING or when.lower() in MISSING:
                raise InvalidInputError(f"{path}: missing id or time at line {line}")
            yv = _parse_float(rec[y_col], y_col, line)
            xv = [_parse_float(rec[c], c, line) for c in covs]
            rows.append((ident, when, yv, xv))
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")

    id_key = _sort_key({r[0] for r in rows})
    time_key = _sort_key({r[1] for r in rows})
    seen = set()
    for r in rows:
        if (r[0], r[1]) in seen:
            raise InvalidInputError(f"duplicate observation for id {r[0]!r} at time {r[1]!r}")
        seen.add((r[0], r[1]))
    rows.sort(key=lambda r: (id_key(r[0]), time_key(r[1])))
    ids = sorted({r[0] for r in rows}, key=id_key)
    times_by_id: dict[str, list[str]] = {}
    for r in rows:
        times_by_id.setdefault(r[0], []).append(r[1])
    reference = times_by_id[ids[0]]
    for i in ids[1:]:
        if set(times_by_id[i]) != set(reference):
            raise InvalidInputError(
                f"unbalanced panel: id {i!r} has times {sorted(times_by_id[i], key=time_key)} "
                f"but id {ids[0]!r} has {reference}")
    y = np.array([r[2] for r in rows])
    x = np.array([r[3] for r in rows], dtype=float).reshape(len(rows), len(covs))
    data = PanelDataset(len(ids), len(reference), y, x)
    scales = None
    if standardize:
        data, scales = standardize_covariates(data, target)
    return IngestedPanel(data, ids, reference, covs, scales)


def write_panel_csv(path, data: PanelDataset, *, ids=None, times=None, columns=None,
                    id_col="id", time_col="time", y_col="y") -> None:
    """Write ``data`` in long format with shortest round-trip float text."""
    ids = list(range(1, data.n_individuals + 1)) if ids is None else list(ids)
    times = list(range(1, data.n_periods + 1)) if times is None else list(times)
    columns = [f"x{j + 1}" for j in range(data.n_covariates)] if columns is None else list(columns)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_col, time_col, y_col, *columns])
        for i in range(data.n_individuals):
            for t in range(data.n_periods):
                row = i * data.n_periods + t
                w.writerow([ids[i], times[t], repr(float(data.y[row])),
                            *(repr(float(v)) for v in data.x[row])])


# --- shared helpers --------------------------------------------------------------------------


def _software() -> dict:
    import scipy
    import sklearn
    return {"panellasso": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, argv: list[str], **payload) -> None:
    manifest = {"command": command, "argv": argv, "software": _software(), **payload}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_list(text: str | None, kind=str) -> list:
    if text is None:
        return []
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        return [kind(s) for s in items]
    except ValueError:
        raise InvalidInputError(f"cannot parse list {text!r}") from None


def _resolve_config(args) -> ExperimentConfig:
    if args.preset and args.config:
        raise InvalidInputError("give either --preset or --config, not both")
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise InvalidInputError("config must be a JSON object")
        cfg = ExperimentConfig.from_dict(raw)
    else:
        raise InvalidInputError("missing truth: give --preset or --config")
    changes = {}
    if args.reps is not None:
        changes["replications"] = args.reps
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "estimators", None):
        changes["estimators"] = _parse_list(args.estimators)
    if getattr(args, "bic_grid_size", None) is not None:
        changes["bic_grid_size"] = args.bic_grid_size
    if getattr(args, "bic_grid_ratio", None) is not None:
        changes["bic_grid_ratio"] = args.bic_grid_ratio
    return cfg.replace(**changes) if changes else cfg


# --- fit -------------------------------------------------------------------------------------


def _selected_lines(fit: PanelFit, panel: IngestedPanel) -> list[str]:
    beta = fit.beta_hat / panel.scales
    out = []
    for j in np.flatnonzero(beta):
        out.append(f"  {panel.columns[j]:<24} {float(beta[j])!r}")
    return out


def _fraction_grid(name: str, fractions: list[float], sets: list[set[int]],
                   panel: IngestedPanel) -> list[str]:
    used = sorted(set().union(*sets)) if sets else []
    width = max([len(panel.columns[j]) for j in used] + [8])
    head = f"{'variable':<{width}} " + " ".join(f"{f:>6g}" for f in fractions)
    lines = [f"{name}: variables selected at fractions of lambda_BIC", head]
    for j in used:
        marks = " ".join(f"{'x' if j in s else '.':>6}" for s in sets)
        lines.append(f"{panel.columns[j]:<{width}} {marks}")
    lines.append(f"{'nnz':<{width}} " + " ".join(f"{len(s):>6d}" for s in sets))
    return lines


def cmd_fit(args) -> int:
    panel = ingest_csv(args.path, args.id_col, args.time_col, args.y_col,
                       standardize=args.standardize == "on", target=args.standardize_target)
    data = panel.data
    factor = np.ones(data.n_covariates)
    for name in _parse_list(args.no_penalty_cols):
        if name not in panel.columns:
            raise InvalidInputError(f"--no-penalty-cols: unknown column {name!r}")
        factor[panel.columns.index(name)] = 0.0
    settings = SolverSettings(args.tol, args.max_sweeps)
    lasso = fit_bic(data, args.bic_grid_size, args.bic_grid_ratio,
                    penalty_factor=factor, settings=settings)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        alasso = fit_adaptive(data, lasso, args.bic_grid_size, args.bic_grid_ratio,
                              penalty_factor=factor, settings=settings)

    print(f"panel: N={data.n_individuals}, T={data.n_periods}, p={data.n_covariates}, "
          f"standardize={args.standardize}")
    report = {"lasso": None, "adaptive_lasso": None, "fractions": {}}
    for label, fit, key in (("Lasso", lasso, "lasso"), ("Adaptive Lasso", alasso, "adaptive_lasso")):
        if fit.penalty is None:
            print(f"{label}: no fit ({fit.warning})")
            continue
        print(f"{label} (BIC): lambda={fit.penalty.lam!r} mu={fit.penalty.mu!r} "
              f"bic={fit.bic!r} selected={fit.active_beta.size}")
        for line in _selected_lines(fit, panel):
            print(line)
        report[key] = {"lambda": fit.penalty.lam, "mu": fit.penalty.mu, "bic": fit.bic,
                       "coefficients": {panel.columns[j]: float(fit.beta_hat[j] / panel.scales[j])
                                        for j in fit.active_beta}}

    fractions = _parse_list(args.lambda_fractions, float)
    if any(not f > 0 for f in fractions):
        raise InvalidInputError("lambda fractions must be positive")
    if fractions:
        sets = []
        for f in fractions:
            fit = fit_single_penalty_reduction(data, f * lasso.penalty.lam,
                                               penalty_factor=factor, settings=settings)
            sets.append(set(fit.active_beta.tolist()))
        print()
        print("\n".join(_fraction_grid("Lasso", fractions, sets, panel)))
        report["fractions"]["lasso"] = {repr(f): [panel.columns[j] for j in sorted(s)]
                                        for f, s in zip(fractions, sets)}
        if alasso.penalty is not None:
            sets = []
            for f in fractions:
                fit = fit_adaptive(data, lasso, lambdas=[f * alasso.penalty.lam],
                                   penalty_factor=factor, settings=settings)
                sets.append(set(fit.active_beta.tolist()))
            print()
            print("\n".join(_fraction_grid("Adaptive Lasso", fractions, sets, panel)))
            report["fractions"]["adaptive_lasso"] = {
                repr(f): [panel.columns[j] for j in sorted(s)] for f, s in zip(fractions, sets)}

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "fit", args.argv, input={"path": str(args.path),
                                                  "sha256": _sha256(args.path)},
                    options={k: v for k, v in vars(args).items()
                             if k not in ("func", "argv", "path")})
    return EXIT_OK


# --- simulate --------------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    if not args.diagnostics:
        cfg = cfg.replace(diagnostics=False)
    result = run_experiment(cfg, threads=args.threads, progress=args.verbose)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = result.report.to_csv()
    (out / "metrics.csv").write_text(csv_text)
    with (out / "replications.jsonl").open("w") as fh:
        result.write_jsonl(fh)
    _write_manifest(out, "simulate", args.argv, config=cfg.to_dict(), seed=cfg.seed,
                    bic_grid_ratio_used=cfg.grid_ratio, threads=args.threads)
    print(f"experiment {cfg.name}: {cfg.replications} replications, seed {cfg.seed}")
    print(csv_text, end="")
    fails = {k: v for k, v in result.report.failures.items() if v}
    for name, count in fails.items():
        print(f"{ESTIMATOR_LABELS.get(name, name)}: {count} replication(s) without a fit")
    return EXIT_OK


# --- diagnose --------------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _rate(values) -> str:
    vals = [v for v in values if v is not None]
    return f"{np.mean(vals):.3f} ({len(vals)} evaluated)" if vals else "n/a"


def cmd_diagnose(args) -> int:
    cfg = _resolve_config(args)
    heavy = "heavy_tailed" in (cfg.covariate_dist, cfg.error_dist)
    regime = args.regime if args.regime != "auto" else ("moment" if heavy else "subgaussian")
    a_seq = args.a if args.a is not None else (float(cfg.n) if regime == "moment" else math.e)
    s1, s2 = cfg.s1, cfg.s2
    lines = [f"experiment {cfg.name}: N={cfg.n}, T={cfg.t}, p={cfg.p}, s1={s1}, s2={s2}, "
             f"errors={cfg.error_dist}"]

    gram = population_gram(cfg)
    re_info = None
    if args.kappa_sq is not None:
        kappa_sq, kappa_label = args.kappa_sq, "user supplied"
    elif s1 + s2 == 0:
        kappa_sq, kappa_label = 1.0, "not needed: empty true support"
    else:
        base = theory.TheoryInputs(n=cfg.n, t=cfg.t, p=cfg.p, r=args.r, a_seq=a_seq, s1=s1, s2=s2)
        pen0 = (theory.penalties_moment(base) if regime == "moment"
                else theory.penalties_subgaussian(base))
        weights = theory.cone_weights(pen0, cfg.n, cfg.t)
        if not min(weights) > 0:
            weights = (1.0, 1.0)
        re_info = theory.restricted_eigenvalue_estimate(
            gram, cfg.p, s1, s2, weights, restarts=args.re_restarts, cap=args.re_cap,
            allow_sampling=True, n_samples=args.re_samples, seed=cfg.seed)
        kappa_sq, kappa_label = re_info.value, re_info.label
    inputs = theory.TheoryInputs(n=cfg.n, t=cfg.t, p=cfg.p, r=args.r, a_seq=a_seq,
                                 max_eps_lr=1.0, kappa_sq=max(kappa_sq, 1e-300), s1=s1, s2=s2)
    if regime == "moment":
        pen = theory.penalties_moment(inputs)
        lines.append(f"penalties (finite moments, r={args.r:g}, a={a_seq:g}): "
                     f"lambda={pen.lam!r} mu={pen.mu!r}")
    else:
        pen = theory.penalties_subgaussian(inputs)
        lines.append(f"penalties (sub-gaussian, a={a_seq:g}): lambda={pen.lam!r} mu={pen.mu!r}")
    if re_info is not None:
        how = "all supports" if re_info.exact_enumeration else "sampled supports"
        lines.append(f"kappa^2 from Gamma: {kappa_sq!r} [{kappa_label}; {re_info.n_supports} {how}]")
    else:
        lines.append(f"kappa^2: {kappa_sq!r} [{kappa_label}]")
    if kappa_sq > 0:
        xi = theory.xi_bound(inputs, regime)
        lines.append(f"xi={xi.xi!r} radius_beta={xi.radius_beta!r} radius_c={xi.radius_c!r}")
    else:
        lines.append("xi: undefined (kappa^2 estimate is zero)")

    result = run_experiment(cfg.replace(diagnostics=True,
                                        estimators=[e for e in cfg.estimators
                                                    if e in ("lasso", "adaptive")] or ["lasso"]),
                            threads=args.threads)
    diags = [(r.index, r.diagnostics) for r in result.replications if r.diagnostics]
    dl = [d for _, d in diags]
    lines.append(f"replications with diagnostics: {len(dl)} of {cfg.replications} "
                 "(theory track: sub-gaussian penalties at a=e)")
    lines.append(f"event A frequency: {_rate([d['event_a'] for d in dl])}")
    lines.append(f"cone condition: {_rate([d['cone_ok'] for d in dl])}")
    lines.append(f"basic inequality IQ1: {_rate([d['iq1_ok'] for d in dl])}, "
                 f"IQ2: {_rate([d['iq2_ok'] for d in dl])}")
    skipped = sum(1 for d in dl if d["kappa_real"] is None)
    lines.append(f"realized-kappa bounds: {_rate([d['bound_ok'] for d in dl])}"
                 + (f"; {skipped} skipped: zero error" if skipped else ""))
    lines.append(f"events C1: {_rate([d['event_c1'] for d in dl])}, "
                 f"C2: {_rate([d['event_c2'] for d in dl])}, D: {_rate([d['event_d'] for d in dl])}")
    for key in ("albeta1", "albeta2", "alc1", "alc2"):
        lines.append(f"condition {key}: {_rate([d['sign_conditions'][key] for d in dl])}")
    cex = sum(1 for d in dl if d["sign_premise_beta"] and not d["sign_beta_ok"])
    prem = sum(1 for d in dl if d["sign_premise_beta"])
    lines.append(f"sign recovery of beta: premise held in {prem}, counterexamples {cex}")
    print("\n".join(lines))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "diagnostics.jsonl").open("w") as fh:
        for idx, d in diags:
            rec = {"replication": idx, **d}
            if d["kappa_real"] is None:
                rec["bound_ok"] = "skipped: zero error"
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")
    _write_manifest(out, "diagnose", args.argv, config=cfg.to_dict(), seed=cfg.seed,
                    regime=regime, a=a_seq, r=args.r, kappa_sq=kappa_sq, kappa_label=kappa_label,
                    penalties={"lambda": pen.lam, "mu": pen.mu})
    return EXIT_OK


def _json_default(o):
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


# --- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panellasso",
                                     description="Lasso and adaptive Lasso for fixed-effects panels.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit Lasso and adaptive Lasso to a long-format CSV panel")
    f.add_argument("path")
    f.add_argument("--id-col", required=True)
    f.add_argument("--time-col", required=True)
    f.add_argument("--y-col", required=True)
    f.add_argument("--lambda-fractions", default=None,
                   help="comma-separated fractions of lambda_BIC, e.g. 1,0.75,0.5,0.25,0.1")
    f.add_argument("--no-penalty-cols", default=None, help="comma-separated unpenalized covariates")
    f.add_argument("--standardize", choices=("on", "off"), default="on")
    f.add_argument("--standardize-target", choices=STANDARDIZE_TARGETS, default="sqrt_nt",
                   help="column l2-norm after scaling: sqrt(NT) (default) or NT")
    f.add_argument("--bic-grid-size", type=int, default=100)
    f.add_argument("--bic-grid-ratio", type=float, default=1e-3)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--max-sweeps", type=int, default=10_000)
    f.add_argument("--out-dir", default="panellasso_out")
    f.set_defaults(func=cmd_fit)

    def experiment_args(p):
        p.add_argument("--preset", choices=list("ABCDEFGHI") + list("abcdefghi"))
        p.add_argument("--config", help="JSON file with ExperimentConfig fields")
        p.add_argument("--reps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", default="panellasso_out")

    s = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    experiment_args(s)
    s.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    s.add_argument("--bic-grid-size", type=int)
    s.add_argument("--bic-grid-ratio", type=float,
                   help="default: 1e-3, or 1e-2 when p + N > NT")
    s.add_argument("--no-diagnostics", dest="diagnostics", action="store_false")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="theory diagnostics for a simulation design")
    experiment_args(d)
    d.add_argument("--regime", choices=("auto", "moment", "subgaussian"), default="auto")
    d.add_argument("--r", type=float, default=2.0, help="moment order for the moment regime")
    d.add_argument("--a", type=float, default=None,
                   help="sequence a; default N (moment regime) or e (sub-gaussian)")
    d.add_argument("--kappa-sq", type=float, default=None,
                   help="restricted eigenvalue; estimated from Gamma when absent")
    d.add_argument("--re-restarts", type=int, default=10)
    d.add_argument("--re-samples", type=int, default=200)
    d.add_argument("--re-cap", type=int, default=5000)
    d.set_defaults(func=cmd_diagnose, reps=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    args.argv = argv
    if args.command == "diagnose" and args.reps is None:
        args.reps = 50
    try:
        return args.func(args)
    except (ConvergenceError, RankDeficientError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
