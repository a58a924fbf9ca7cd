"""
Report Builder - tidy tables of benchmark, oracle and learning results
Exports CSV, JSON and a multi-sheet Excel workbook
"""
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import pandas as pd
from openpyxl import load_workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

logger = logging.getLogger(__name__)

HEADER_FILL = PatternFill(start_color="DDDDDD", end_color="DDDDDD", fill_type="solid")

# Numeric columns every benchmark row carries
BENCH_SCHEMA = {
    'scenario': str,
    'runtime': float,
    'objective': float,
    'converged': bool,
}


def bench_table(results: Iterable) -> pd.DataFrame:
    """One row per run, the scenario id repeated on every row"""
    rows = []
    for result in results:
        for run in result.runs:
            row = {'scenario': result.scenario}
            row.update({k: (json.dumps(v) if isinstance(v, (list, dict)) else v)
                        for k, v in run.items()})
            rows.append(row)
    return pd.DataFrame(rows)


def validate_bench_rows(df: pd.DataFrame) -> List[str]:
    """Names of schema columns that are missing or of the wrong kind"""
    problems = []
    for column, kind in BENCH_SCHEMA.items():
        if column not in df.columns:
            problems.append(f"missing column '{column}'")
        elif kind is float and not pd.api.types.is_numeric_dtype(df[column]):
            problems.append(f"column '{column}' is not numeric")
    return problems


def summary_table(df: pd.DataFrame, by: Sequence[str],
                  metrics: Sequence[str] = ('runtime', 'objective')) -> pd.DataFrame:
    """Mean, std and count of metrics per group"""
    present = [m for m in metrics if m in df.columns]
    grouped = df.groupby(list(by))[present].agg(['mean', 'std', 'count'])
    grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
    return grouped.reset_index()


def oracle_table(reports: Iterable) -> pd.DataFrame:
    rows = []
    for report in reports:
        row = {
            'name': report.name,
            'passed': report.passed,
            'trials': report.trials,
            'max_rel_error': report.max_rel_error,
            'tolerance': report.tolerance,
        }
        row.update({k: v for k, v in report.details.items() if not isinstance(v, (dict, list))})
        rows.append(row)
    return pd.DataFrame(rows)


def trace_table(trace: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({'iteration': range(len(trace)), 'objective': list(trace)})


def write_csv(df: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-exact floats keep the export lossless
    df.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"CSV written: {path}")
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def write_json(rows: Any, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(rows, pd.DataFrame):
        rows = rows.to_dict(orient='records')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(rows, f, indent=2, default=str)
    logger.info(f"JSON written: {path}")
    return path


def _style_sheet(ws, widths: Optional[Dict[int, int]] = None):
    """Bold shaded header row, frozen, columns sized to their content"""
    for cell in ws[1]:
        cell.font = Font(bold=True)
        cell.fill = HEADER_FILL
        cell.alignment = Alignment(horizontal="center", vertical="center", wrap_text=True)
    ws.freeze_panes = "A2"
    for col_num, column in enumerate(ws.iter_cols(min_row=1, max_row=min(ws.max_row, 200)), 1):
        longest = max((len(str(c.value)) for c in column if c.value is not None), default=8)
        width = (widths or {}).get(col_num, min(max(longest + 2, 10), 50))
        ws.column_dimensions[get_column_letter(col_num)].width = width


def write_workbook(sheets: Dict[str, pd.DataFrame], path: Path,
                   title: str = "CONVDL WORKBENCH REPORT") -> Path:
    """
    Multi-sheet Excel workbook with a summary sheet first

    Args:
        sheets: sheet name -> table
        path: output .xlsx path
        title: heading of the summary sheet
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    overview = pd.DataFrame([
        {'sheet': name, 'rows': len(df), 'columns': len(df.columns)}
        for name, df in sheets.items()
    ])
    with pd.ExcelWriter(path, engine='openpyxl') as writer:
        overview.to_excel(writer, sheet_name='Summary', index=False, startrow=3)
        for name, df in sheets.items():
            df.to_excel(writer, sheet_name=name[:31], index=False)

    wb = load_workbook(path)
    ws = wb['Summary']
    ws['A1'] = title
    ws['A1'].font = Font(size=16, bold=True)
    ws['A2'] = f"Generated: {datetime.now().isoformat(timespec='seconds')}"
    ws['A2'].font = Font(size=10, italic=True)
    for cell in ws[4]:
        cell.font = Font(bold=True)
        cell.fill = HEADER_FILL
    ws.column_dimensions['A'].width = 35
    for name in sheets:
        _style_sheet(wb[name[:31]])
    wb.save(path)
    logger.info(f"Excel report generated: {path} ({len(sheets) + 1} sheets)")
    return path


def build_report(input_dir: Path, output_dir: Optional[Path] = None,
                 excel: bool = True) -> Dict[str, Path]:
    """
    Collect every bench_*.json, verify_*.json and learning_results_*.json of
    `input_dir` into CSV tables and an optional workbook

    Returns:
        mapping of table name to written path
    """
    input_dir = Path(input_dir)
    output_dir = Path(output_dir or input_dir)
    sheets: Dict[str, pd.DataFrame] = {}

    bench_rows = []
    for path in sorted(input_dir.glob('bench_*.json')):
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        for run in data.get('runs', []):
            row = {'scenario': data.get('scenario', path.stem)}
            row.update({k: (json.dumps(v) if isinstance(v, (list, dict)) else v)
                        for k, v in run.items()})
            bench_rows.append(row)
    if bench_rows:
        sheets['Benchmarks'] = pd.DataFrame(bench_rows)
        problems = validate_bench_rows(sheets['Benchmarks'])
        if problems:
            logger.warning(f"Benchmark rows do not match the schema: {problems}")

    oracle_rows = []
    for path in sorted(input_dir.glob('verify_*.json')):
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        for report in data if isinstance(data, list) else [data]:
            oracle_rows.append({k: v for k, v in report.items() if not isinstance(v, dict)})
    if oracle_rows:
        sheets['Oracles'] = pd.DataFrame(oracle_rows)

    trace_rows = []
    for path in sorted(input_dir.glob('learning_results_*.json')):
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        for i, value in enumerate(data.get('statistics', {}).get('trace', [])):
            trace_rows.append({'run': path.stem, 'iteration': i, 'objective': value})
    if trace_rows:
        sheets['Learning'] = pd.DataFrame(trace_rows)

    if not sheets:
        logger.warning(f"No result files found in {input_dir}")
        return {}

    written = {}
    for name, df in sheets.items():
        written[name] = write_csv(df, output_dir / f"{name.lower()}.csv")
    if excel:
        timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
        written['workbook'] = write_workbook(sheets, output_dir / f"report_{timestamp}.xlsx")
    return written
