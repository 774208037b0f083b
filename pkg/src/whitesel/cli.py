"""Batch command-line front end for the three-step selection pipeline.

Commands: ``select`` (full pipeline on a CSV), ``whiten-test`` (steps 1-2
only), ``simulate`` (synthetic comparison study) and ``bench`` (timing).

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 non-convergence.
``whiten-test`` additionally exits 1 when the identity (no whitening) model
is rejected at the 5% level.
"""

from __future__ import annotations

import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from whitesel import __version__
from whitesel.linmodel import FactorLabels, build_design, fit_anova, standardize
from whitesel.whitening import (
    CholeskyError,
    apply_whitening,
    select_whitening,
)
from whitesel.selection import (
    ConvergenceError,
    choose_threshold,
    cross_validate_lambda,
    stability_select,
    vectorize,
)
from whitesel.simulate import (
    METHODS,
    SimulationConfig,
    run_comparison,
    summarize_comparison,
    timing_benchmark,
)


class CsvFormatError(Exception):
    """Input CSV violates the expected layout."""


def _fmt(x: float) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return f"{x:.17g}"


def ingest_csv(path: str | Path) -> tuple[FactorLabels, np.ndarray, list[str]]:
    """Read a condition-labelled response matrix.

    Layout: header ``condition,<name_1>,...,<name_q>``; each data row is a
    condition label followed by q finite numeric values.  Missing values are
    a hard error (imputation belongs to upstream preprocessing), as are
    ragged rows, non-numeric cells and duplicate response names.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "condition":
            raise CsvFormatError(f"{path}: first header cell must be 'condition'")
        names = [c.strip() for c in header[1:]]
        if len(names) == 0:
            raise CsvFormatError(f"{path}: no response columns")
        dupes = {nm for nm in names if names.count(nm) > 1}
        if dupes:
            raise CsvFormatError(f"{path}: duplicate response names: {sorted(dupes)}")
        labels: list[str] = []
        rows: list[list[float]] = []
        for i, row in enumerate(reader, start=1):
            if len(row) != len(names) + 1:
                raise CsvFormatError(
                    f"{path}: row {i} has {len(row)} cells, expected {len(names) + 1}"
                )
            label = row[0].strip()
            if not label:
                raise CsvFormatError(f"{path}: missing condition label at row {i}")
            values = []
            for j, cell in enumerate(row[1:], start=2):
                text = cell.strip()
                if text == "":
                    raise CsvFormatError(f"{path}: missing value at row {i}, column {j}")
                try:
                    value = float(text)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: non-numeric value {text!r} at row {i}, column {j}"
                    ) from None
                if not math.isfinite(value):
                    raise CsvFormatError(f"{path}: missing value at row {i}, column {j}")
                values.append(value)
            labels.append(label)
            rows.append(values)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    factor = FactorLabels(tuple(labels))
    counts = factor.counts
    thin = [lv for lv, c in zip(factor.levels, counts) if c < 2]
    if thin:
        warnings.warn(f"levels with a single replicate: {thin}", stacklevel=2)
    return factor, np.array(rows), names


@dataclass(frozen=True)
class RunConfig:
    input: str
    out: str
    H: int = 10
    whitening: str = "auto"  # auto | identity | ar1 | nonparam
    n_resamples: int = 5000
    threshold: str = "one"  # one | maxpval
    seed: int = 42
    scale: bool = True
    threads: int | None = None

    def __post_init__(self):
        if self.H < 1 or self.n_resamples < 1:
            raise ValueError("H and resample count must be positive")
        if self.threads is not None and self.threads < 1:
            raise ValueError("thread count must be positive")


def _write_whitening_table(path: Path, results, selected: str) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "statistic", "dof", "pvalue", "selected"])
        for name in ("identity", "ar1", "nonparametric"):
            res = results[name]
            writer.writerow(
                [name, _fmt(res.statistic), res.dof, _fmt(res.pvalue), int(name == selected)]
            )


def _write_frequencies(path: Path, freq: np.ndarray, levels, names) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", *names])
        for c, lv in enumerate(levels):
            writer.writerow([lv, *(_fmt(v) for v in freq[c])])


def _write_support(path: Path, support: np.ndarray, freq: np.ndarray, levels, names) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "response", "frequency"])
        for c, lv in enumerate(levels):
            for j in np.flatnonzero(support[c]):
                writer.writerow([lv, names[j], _fmt(freq[c, j])])


def run_select(cfg: RunConfig) -> dict:
    """Execute the full pipeline and write the report files.

    Returns a summary dict (also dumped to ``run.json``).
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    factor, raw, names = ingest_csv(cfg.input)
    Y, constant = standardize(raw, scale=cfg.scale)
    X = build_design(factor)
    _, E = fit_anova(Y, X)

    best_op, results = select_whitening(E, cfg.H)
    name_map = {"identity": "identity", "ar1": "ar1", "nonparam": "nonparametric"}
    if cfg.whitening == "auto":
        op = best_op
        selected = op.kind
    else:
        if cfg.whitening not in name_map:
            raise ValueError(f"unknown whitening mode {cfg.whitening!r}")
        selected = name_map[cfg.whitening]
        ops = dict(_candidate_ops(E, cfg.H))
        op = ops[selected]

    Yw = apply_whitening(Y, op)
    problem = vectorize(Yw, X, op)
    cv = cross_validate_lambda(problem, seed=cfg.seed, n_jobs=cfg.threads)
    report = stability_select(
        problem, cv.lambda_cv, n_resamples=cfg.n_resamples, seed=cfg.seed, n_jobs=cfg.threads
    )
    mode = {"one": "fixed-one", "maxpval": "max-pvalue"}.get(cfg.threshold)
    if mode is None:
        raise ValueError(f"unknown threshold mode {cfg.threshold!r}")
    choice = choose_threshold(report, mode, Y=Y, X=X, operator=op, H=cfg.H)

    _write_whitening_table(out / "whitening.csv", results, selected)
    _write_frequencies(out / "frequencies.csv", report.frequencies, factor.levels, names)
    _write_support(out / "support.csv", choice.support, report.frequencies, factor.levels, names)

    summary = {
        "command": "select",
        "version": __version__,
        "input": str(cfg.input),
        "H": cfg.H,
        "whitening_mode": cfg.whitening,
        "whitening_selected": selected,
        "n_resamples": cfg.n_resamples,
        "n_failed_resamples": report.n_failed,
        "threshold_mode": cfg.threshold,
        "threshold": choice.threshold,
        "seed": cfg.seed,
        "scale": cfg.scale,
        "threads": cfg.threads,
        "lambda_cv": cv.lambda_cv,
        "n_selected": int(choice.support.sum()),
        "constant_columns": [names[j] for j in np.flatnonzero(constant)],
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _candidate_ops(E: np.ndarray, H: int):
    from whitesel.whitening import (
        ar1_inverse_sqrt,
        fit_ar1,
        identity_operator,
        nonparam_inverse_sqrt,
        pooled_autocovariance,
    )

    q = E.shape[1]
    yield "identity", identity_operator(q)
    yield "ar1", ar1_inverse_sqrt(fit_ar1(E).phi1, q)
    yield "nonparametric", nonparam_inverse_sqrt(pooled_autocovariance(E, q - 1))


def run_whiten_test(input_path: str, H: int, scale: bool) -> tuple[dict, bool]:
    """Steps 1-2 only: whitening-strategy score table.

    Returns the score table and whether identity (no whitening) is rejected
    at the 5% level.
    """
    factor, raw, _ = ingest_csv(input_path)
    Y, _ = standardize(raw, scale=scale)
    X = build_design(factor)
    _, E = fit_anova(Y, X)
    _, results = select_whitening(E, H)
    rejected = results["identity"].pvalue < 0.05
    return results, rejected


def _exit_code(exc: BaseException) -> int:
    # LinAlgError subclasses ValueError, so numerical failures go first.
    if isinstance(exc, (CholeskyError, np.linalg.LinAlgError, FloatingPointError)):
        return 3
    if isinstance(exc, (CsvFormatError, FileNotFoundError, ValueError)):
        return 2
    if isinstance(exc, (ConvergenceError, RuntimeError)):
        return 4
    return 1


def _run_guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - single exit-code funnel
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_code(exc))


@click.group()
@click.version_option(__version__)
def main():
    """Variable selection in the multivariate linear model with whitening."""


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--whitening", default="auto", type=click.Choice(["auto", "identity", "ar1", "nonparam"]))
@click.option("--H", "h_lags", default=10, show_default=True, type=int)
@click.option("--resamples", default=5000, show_default=True, type=int)
@click.option("--threshold", default="one", type=click.Choice(["one", "maxpval"]), show_default=True)
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--scale/--no-scale", default=True, show_default=True)
@click.option("--threads", default=None, type=int)
def select(input_path, out, whitening, h_lags, resamples, threshold, seed, scale, threads):
    """Run the full three-step pipeline on a CSV and write report files."""
    cfg = RunConfig(
        input=input_path,
        out=out,
        H=h_lags,
        whitening=whitening,
        n_resamples=resamples,
        threshold=threshold,
        seed=seed,
        scale=scale,
        threads=threads,
    )
    summary = _run_guarded(run_select, cfg)
    click.echo(
        f"selected {summary['n_selected']} coefficients "
        f"(whitening: {summary['whitening_selected']}, "
        f"lambda_cv: {summary['lambda_cv']:.4g}, threshold: {summary['threshold']:.4g})"
    )


@main.command("whiten-test")
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--H", "h_lags", default=10, show_default=True, type=int)
@click.option("--scale/--no-scale", default=True, show_default=True)
def whiten_test(input_path, h_lags, scale):
    """Score the whitening strategies; exit 1 if identity is rejected."""
    results, rejected = _run_guarded(run_whiten_test, input_path, h_lags, scale)
    click.echo("strategy statistic dof pvalue")
    for name in ("identity", "ar1", "nonparametric"):
        res = results[name]
        click.echo(f"{name} {res.statistic:.4g} {res.dof} {res.pvalue:.4g}")
    if rejected:
        click.echo("identity rejected at level 0.05", err=True)
        sys.exit(1)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--threads", default=None, type=int)
def simulate(config_path, out, threads):
    """Run the synthetic method comparison described by a flat JSON config."""

    def _run():
        with open(config_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        methods = tuple(payload.pop("methods", METHODS))
        cfg = SimulationConfig(**payload)
        table = run_comparison(cfg, methods=methods, n_jobs=threads)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "comparison.csv", index=False)
        summary = summarize_comparison(table)
        summary.to_csv(out_dir / "summary.csv", index=False)
        return summary

    summary = _run_guarded(_run)
    click.echo(summary.to_string(index=False))


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--n", default=30, show_default=True, type=int)
@click.option("--q-max", default=1000, show_default=True, type=int)
@click.option("--q-step", default=100, show_default=True, type=int)
@click.option("--resamples", default="100,500", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--threads", default=None, type=int)
def bench(out, n, q_max, q_step, resamples, seed, threads):
    """Measure end-to-end pipeline wall-clock across response counts."""

    def _run():
        counts = tuple(int(tok) for tok in resamples.split(","))
        table = timing_benchmark(
            n=n,
            q_grid=tuple(range(q_step, q_max + 1, q_step)),
            resample_counts=counts,
            seed=seed,
            n_jobs=threads,
        )
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "timing.csv", index=False)
        return table

    table = _run_guarded(_run)
    click.echo(table.to_string(index=False))


if __name__ == "__main__":
    main()
