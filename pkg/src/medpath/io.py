"""CSV ingestion and report serialization for the command-line workflows.

Dataset CSVs need a header row; a sidecar JSON config maps column names to
roles (outcome / treatment / mediator / covariate).  Files are UTF-8 with
'.' as the decimal point.  Mediators and covariates keep their CSV column
order.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core_types import Dataset, ValidationError
from .inference import SelectionReport
from .simulation import MetricsRow

ROLES = ("outcome", "treatment", "mediator", "covariate", "ignore")


def load_role_config(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if "roles" not in cfg or not isinstance(cfg["roles"], dict):
        raise ValidationError(f"config {path}: missing a 'roles' mapping of column name to role")
    bad = {c: r for c, r in cfg["roles"].items() if r not in ROLES}
    if bad:
        raise ValidationError(f"config {path}: unknown roles {bad}; choose from {ROLES}")
    return cfg


def read_dataset_csv(csv_path: str | Path, roles: dict[str, str]) -> Dataset:
    """Parse a dataset CSV against a column-role mapping."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{csv_path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{csv_path}: no data rows")
    missing = [c for c in roles if c not in header]
    if missing:
        raise ValidationError(f"{csv_path}: config names absent columns {missing}")
    by_role: dict[str, list[str]] = {r: [] for r in ROLES}
    for col in header:
        role = roles.get(col)
        if role is None:
            continue
        by_role[role].append(col)
    if len(by_role["outcome"]) != 1:
        raise ValidationError(f"{csv_path}: need exactly one outcome column, got {by_role['outcome']}")
    if len(by_role["treatment"]) != 1:
        raise ValidationError(f"{csv_path}: need exactly one treatment column, got {by_role['treatment']}")
    if not by_role["mediator"]:
        raise ValidationError(f"{csv_path}: need at least one mediator column")

    col_index = {c: i for i, c in enumerate(header)}

    def parse_column(name: str) -> np.ndarray:
        i = col_index[name]
        out = np.empty(len(rows))
        for r, row in enumerate(rows):
            try:
                out[r] = float(row[i])
            except (ValueError, IndexError) as exc:
                raise ValidationError(
                    f"{csv_path}: cannot parse column {name!r} at data row {r}: {exc}"
                ) from None
        return out

    y = parse_column(by_role["outcome"][0])
    z = parse_column(by_role["treatment"][0])
    m = np.column_stack([parse_column(c) for c in by_role["mediator"]])
    if by_role["covariate"]:
        x = np.column_stack([parse_column(c) for c in by_role["covariate"]])
    else:
        x = np.zeros((len(rows), 0))
    return Dataset(y=y, z=z, m=m, x=x, mediator_names=tuple(by_role["mediator"]))


def write_dataset_csv(path: str | Path, d: Dataset) -> None:
    """Write a dataset in the ingestion layout (used to round-trip synthetic data)."""
    header = ["y", "z"] + [d.mediator_name(j) for j in range(d.p)] + [
        f"x{i + 1}" for i in range(d.q)
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            writer.writerow(
                [repr(float(d.y[i])), repr(float(d.z[i]))]
                + [repr(float(v)) for v in d.m[i]]
                + [repr(float(v)) for v in d.x[i]]
            )


def roles_for_dataset(d: Dataset) -> dict[str, str]:
    roles = {"y": "outcome", "z": "treatment"}
    roles.update({d.mediator_name(j): "mediator" for j in range(d.p)})
    roles.update({f"x{i + 1}": "covariate" for i in range(d.q)})
    return roles


def write_metrics_csv(path: str | Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "n", "p", "phi", "phi1", "MSE", "TP", "FP", "reps", "failures"])
        for r in rows:
            writer.writerow([
                r.method, r.n, r.p, repr(r.phi), repr(r.phi1),
                repr(r.mse), repr(r.tp), repr(r.fp), r.n_reps, r.failures,
            ])


def write_selection_csv(path: str | Path, report: SelectionReport,
                        extra_adjusted: dict[str, np.ndarray] | None = None) -> None:
    """Per-mediator table: name, estimate, SD, raw p, adjusted-p columns."""
    extra = extra_adjusted or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = [
            "mediator", "index", "beta2_hat", "lambda_hat", "estimate", "SD", "p_value",
            f"adjusted_p_{report.method}",
        ] + [f"adjusted_p_{m}" for m in extra] + ["active"]
        writer.writerow(header)
        active = set(int(i) for i in report.active_pathways)
        for pos, row in enumerate(report.pathways):
            line = [
                row.name, row.index + 1, repr(row.beta2_hat), repr(row.lambda_hat),
                repr(row.nie_hat), repr(row.nie_se), repr(row.raw_p), repr(row.adjusted_p),
            ]
            line += [repr(float(extra[m][pos])) for m in extra]
            line.append(int(row.index in active))
            writer.writerow(line)


def selection_report_json(report: SelectionReport) -> dict:
    return {
        "method": report.method,
        "alpha": report.alpha,
        "nde": report.nde,
        "nie_se_note": report.nie_se_note,
        "active_pathways": [int(i) + 1 for i in report.active_pathways],
        "pathways": [
            {
                "index": row.index + 1,
                "name": row.name,
                "beta2_hat": row.beta2_hat,
                "lambda_hat": row.lambda_hat,
                "nie_hat": row.nie_hat,
                "nie_se": row.nie_se,
                "raw_p": row.raw_p,
                "adjusted_p": row.adjusted_p,
            }
            for row in report.pathways
        ],
    }
