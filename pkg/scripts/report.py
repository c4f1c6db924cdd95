"""
Report Writer
Flat CSV tables, JSON dumps, plot series and an Excel workbook from experiment records
"""

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from config import RECORD_COLUMNS, ExperimentRecord


class MixedVersionError(ValueError):
    """Records stamped with different code versions"""


COLUMN_WIDTHS = {
    "kind": 14, "method": 16, "seed": 22, "t_mix": 10, "gamma_hat": 12,
    "mp_bound": 12, "errbar": 10, "wall_ms": 12,
}


def sort_records(records: Sequence[ExperimentRecord]) -> List[ExperimentRecord]:
    return sorted(records, key=lambda r: (r.kind, r.d, r.N, r.u, r.seed, r.stream))


def check_versions(records: Sequence[ExperimentRecord], allow_mixed: bool = False) -> List[str]:
    versions = sorted({r.code_version for r in records})
    if len(versions) > 1 and not allow_mixed:
        raise MixedVersionError(f"records come from code versions {versions}; pass the override to merge them")
    return versions


def write_csv(records: Sequence[ExperimentRecord], path: Path) -> Path:
    """RFC 4180 table in RECORD_COLUMNS order; header only when there are no records"""
    try:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(RECORD_COLUMNS)
            for record in records:
                writer.writerow(record.row())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def write_json(data, path: Path) -> Path:
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, default=str)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def plot_series(records: Sequence[ExperimentRecord]) -> Dict[str, dict]:
    """Per kind and N: median, quartiles and count of t_mix, gamma_hat and density"""
    series: Dict[str, dict] = {}
    for kind in sorted({r.kind for r in records}):
        subset = [r for r in records if r.kind == kind]
        panel = {}
        for quantity in ("t_mix", "gamma_hat", "density"):
            points = []
            for N in sorted({r.N for r in subset}):
                values = [getattr(r, quantity) for r in subset if r.N == N and getattr(r, quantity) is not None]
                if not values:
                    continue
                q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75])
                points.append({"N": N, "median": float(median), "q25": float(q25),
                               "q75": float(q75), "count": len(values)})
            if points:
                panel[quantity] = points
        series[kind] = panel
    return series


def write_excel(records: Sequence[ExperimentRecord], path: Path) -> Path:
    """Workbook with one sheet of all records, header styled and frozen"""
    try:
        wb = Workbook()
        ws = wb.active
        ws.title = "Records"

        header_fill = PatternFill(start_color="1F4E79", end_color="1F4E79", fill_type="solid")
        header_font = Font(bold=True, color="FFFFFF")
        thin_border = Border(
            left=Side(style='thin'),
            right=Side(style='thin'),
            top=Side(style='thin'),
            bottom=Side(style='thin')
        )

        for col, header in enumerate(RECORD_COLUMNS, 1):
            cell = ws.cell(row=1, column=col, value=header)
            cell.fill = header_fill
            cell.font = header_font
            cell.alignment = Alignment(horizontal='center', vertical='center')
            cell.border = thin_border

        for row_idx, record in enumerate(records, 2):
            for col, value in enumerate(record.row(), 1):
                # 64-bit seeds lose precision as spreadsheet numbers
                if RECORD_COLUMNS[col - 1] == "seed":
                    value = str(value)
                ws.cell(row=row_idx, column=col, value=value).border = thin_border

        for col, header in enumerate(RECORD_COLUMNS, 1):
            ws.column_dimensions[get_column_letter(col)].width = COLUMN_WIDTHS.get(header, 8)

        ws.freeze_panes = 'A2'
        wb.save(path)
        return path

    except Exception as e:
        raise OSError(f"cannot write Excel workbook {path}: {e}") from e


def write_report(records: Sequence[ExperimentRecord], out_dir, allow_mixed_versions: bool = False,
                 excel: bool = True) -> Dict[str, str]:
    """
    Write records.csv, one records_<kind>.csv per kind, records.json,
    plot_data.json and records.xlsx under out_dir.

    Rows are ordered by (kind, d, N, u, seed, stream), so the files depend only
    on the record set.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out_dir}: {e}") from e
    versions = check_versions(records, allow_mixed_versions)
    ordered = sort_records(records)

    files = {"csv": str(write_csv(ordered, out_dir / "records.csv"))}
    for kind in sorted({r.kind for r in ordered}):
        path = write_csv([r for r in ordered if r.kind == kind], out_dir / f"records_{kind}.csv")
        files[f"csv_{kind}"] = str(path)
    files["json"] = str(write_json({"code_versions": versions,
                                    "records": [r.model_dump() for r in ordered]},
                                   out_dir / "records.json"))
    files["plot_data"] = str(write_json(plot_series(ordered), out_dir / "plot_data.json"))
    if excel:
        files["excel"] = str(write_excel(ordered, out_dir / "records.xlsx"))

    print(f"📊 CSV saved: {files['csv']} ({len(ordered)} records)")
    return files
