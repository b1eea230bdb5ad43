"""
Export
Writers and readers for experiment results: records CSV, summary JSON and
the per-experiment report (JSON, aligned text table and optional Excel).
"""

import json
import logging
import math
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from enkf_lab.exceptions import InvalidInputError
from enkf_lab.experiments import RECORD_FIELDS, TrialRecord, fit_rate

logger = logging.getLogger(__name__)

REPORT_SLOPE_TARGET = -0.5
REPORT_SLOPE_TOL = 0.15


def _json_ready(value: Any) -> Any:
    """NaN and infinities become null; numpy scalars and arrays become plain Python"""
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_ready(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_json(obj: Any) -> str:
    """Deterministic JSON text (sorted keys, fixed indentation)"""
    return json.dumps(_json_ready(obj), indent=2, sort_keys=True) + "\n"


def write_json(obj: Any, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_json(obj))
    return path


def records_to_frame(records: Sequence[TrialRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in records], columns=list(RECORD_FIELDS))


def write_records_csv(records: Sequence[TrialRecord], path: str) -> str:
    """Records CSV with the fixed column order; NaN cells are left empty"""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    records_to_frame(records).to_csv(path, index=False, float_format="%.17g")
    return path


def read_records_csv(path: str) -> List[TrialRecord]:
    """
    Parse a records CSV back into TrialRecords.

    Raises:
        InvalidInputError: for missing files, missing columns, bad values or no rows
    """
    if not os.path.exists(path):
        raise InvalidInputError(f"Records file not found: {path}")
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise InvalidInputError(f"{path}: no records")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise InvalidInputError(f"{path}: malformed CSV ({e})") from e

    missing = [c for c in RECORD_FIELDS if c not in df.columns]
    if missing:
        raise InvalidInputError(f"{path}: missing columns {missing}")
    if df.empty:
        raise InvalidInputError(f"{path}: no records")

    records = []
    for row_number, row in enumerate(df[list(RECORD_FIELDS)].itertuples(index=False), start=2):
        try:
            records.append(TrialRecord(
                experiment=str(row.experiment),
                N=int(row.N),
                seed=int(row.seed),
                method=str(row.method),
                error_mean=float(row.error_mean),
                error_cov=float(row.error_cov),
                offset_norm=float(row.offset_norm),
                radius=float(row.radius),
                r2=float(row.r2),
                r_inf=float(row.r_inf),
            ))
        except (TypeError, ValueError, InvalidInputError) as e:
            raise InvalidInputError(f"{path}: bad value on line {row_number} ({e})") from e
    return records


def build_report(
    records: Sequence[TrialRecord],
    target: float = REPORT_SLOPE_TARGET,
    tol: float = REPORT_SLOPE_TOL,
) -> Dict[str, pd.DataFrame]:
    """
    Per-experiment tables: median errors per (experiment, method, r2, N) and
    log-log slopes of those medians with a PASS/FAIL status against target +/- tol
    (n/a with fewer than 3 N values).
    """
    if not records:
        raise InvalidInputError("no records")
    df = records_to_frame(records)
    df["r2"] = df["r2"].round(9)
    keys = ["experiment", "method", "r2"]

    medians = (
        df.groupby(keys + ["N"], dropna=False)
        .agg(trials=("seed", "count"),
             median_error_mean=("error_mean", "median"),
             median_error_cov=("error_cov", "median"))
        .reset_index()
    )

    fits = []
    for key, group in medians.groupby(keys, dropna=False):
        for fld in ("median_error_mean", "median_error_cov"):
            pts = [(n, e) for n, e in zip(group["N"], group[fld]) if e > 0]
            row = dict(zip(keys, key), field=fld.replace("median_", ""), n_points=len(pts),
                       slope=math.nan, status="n/a")
            if len(pts) >= 2 and len({n for n, _ in pts}) >= 2:
                fit = fit_rate(pts)
                row["slope"] = fit.slope
                if len(pts) >= 3:
                    row["status"] = "PASS" if abs(fit.slope - target) <= tol else "FAIL"
            fits.append(row)
    return {"medians": medians, "rate_fits": pd.DataFrame(fits)}


def write_report(tables: Dict[str, pd.DataFrame], out_dir: str, checks: Optional[List[Dict]] = None) -> List[str]:
    """Write report.json, report.txt and, when openpyxl is available, report.xlsx"""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    payload = {name: table.to_dict(orient="records") for name, table in tables.items()}
    if checks:
        payload["checks"] = checks
    written.append(write_json(payload, os.path.join(out_dir, "report.json")))

    txt_path = os.path.join(out_dir, "report.txt")
    with open(txt_path, "w", encoding="utf-8") as f:
        for name, table in tables.items():
            f.write(f"== {name} ==\n")
            f.write(table.to_string(index=False, float_format=lambda x: f"{x:.6g}"))
            f.write("\n\n")
        for check in checks or []:
            status = "PASS" if check.get("passed") else "FAIL"
            f.write(f"{status}  {check.get('name')}  {check.get('detail', '')}\n")
    written.append(txt_path)

    xlsx_path = os.path.join(out_dir, "report.xlsx")
    try:
        with pd.ExcelWriter(xlsx_path, engine="openpyxl") as writer:
            for name, table in tables.items():
                table.to_excel(writer, sheet_name=name[:31], index=False)  # Excel sheet name limit
        written.append(xlsx_path)
    except ImportError:
        logger.info("openpyxl not installed, skipping %s", xlsx_path)
    except (OSError, ValueError) as e:
        logger.warning("Excel export failed: %s", e)
    return written
