"""
报告输出：CSV + jinja2 渲染的文本表格
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from utils.stats import STAT_KEYS

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / "templates"
TABLE_TEMPLATE = "table.txt.j2"

_environment = Environment(
    loader=FileSystemLoader(str(TEMPLATE_DIR)),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
    undefined=StrictUndefined,
)


def _fmt(value, digits: int = 3) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{float(value):.{digits}f}"


_environment.filters["fmt"] = _fmt


@dataclass
class ReportRow:
    """一行四分位统计；extra 为附加列（例如丢弃数）"""

    name: str
    stats: Dict[str, float]
    extra: Dict[str, Union[int, float, str]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        row = {"name": self.name}
        row.update({key: self.stats.get(key, float("nan")) for key in STAT_KEYS})
        row.update(self.extra)
        return row


def write_csv(rows: List[ReportRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [row.as_dict() for row in rows]
    fieldnames = ["name", *STAT_KEYS]
    for record in records:
        fieldnames += [key for key in record if key not in fieldnames]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, restval="")
        writer.writeheader()
        writer.writerows(records)
    return path


def write_records(records: Iterable[dict], path: Union[str, Path]) -> Path:
    """把字典列表写成 CSV（学习曲线等）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = list(records)
    fieldnames: List[str] = []
    for record in records:
        fieldnames += [key for key in record if key not in fieldnames]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, restval="")
        writer.writeheader()
        writer.writerows(records)
    return path


def render_table(title: str, rows: List[ReportRow]) -> str:
    """渲染列为 25th % | mean ± std | median | 75th % 的文本表格"""
    template = _environment.get_template(TABLE_TEMPLATE)
    width = max([len(row.name) for row in rows] + [len("condition")])
    return template.render(title=title, rows=rows, width=width)


def write_report(title: str, rows: List[ReportRow], out_dir: Union[str, Path], stem: str) -> Tuple[Path, Path]:
    """
    写出 CSV 和文本表格

    Returns:
        (csv 路径, 表格路径)
    """
    out_dir = Path(out_dir)
    csv_path = write_csv(rows, out_dir / f"{stem}.csv")
    table_path = out_dir / f"{stem}.txt"
    table_path.write_text(render_table(title, rows), encoding="utf-8")
    logger.info(f"Wrote report '{title}' to {table_path}")
    return csv_path, table_path
