import os
import json
import logging

from jinja2 import Environment, FileSystemLoader

from .metrics_eval import EvalReport

logger = logging.getLogger('tcd_system.report')

TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), 'templates')
METRIC_ORDER = ["ADE", "FDE", "MMADE", "MMFDE", "APD", "repair_ADE"]

_env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), keep_trailing_newline=True, autoescape=False)


def report_json(report: EvalReport) -> str:
    """Canonical JSON (sorted keys), byte-identical for identical reports."""
    return json.dumps(report.model_dump(), sort_keys=True, indent=2) + "\n"


def write_json_report(report: EvalReport, output_path):
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        f.write(report_json(report))
    logger.info(f"JSON report written: {os.path.basename(output_path)}")
    return output_path


def _horizons(report):
    keys = {h for values in report.metrics.values() for h in values}
    for group in report.groups.values():
        keys |= {h for values in group.metrics.values() for h in values}
    return sorted(keys, key=int)


def _ordered_metrics(metrics):
    names = [n for n in METRIC_ORDER if n in metrics] + sorted(n for n in metrics if n not in METRIC_ORDER)
    return [(n, {h: f"{v:.1f}" for h, v in metrics[n].items()}) for n in names]


def _regime_label(report):
    regime = report.regime or {}
    return regime.get("kind", "clean") if regime else "clean"


def _table_rows(metrics, horizons, name_width, col_width):
    rows = []
    for name, values in _ordered_metrics(metrics):
        cells = "".join(values.get(h, "-").rjust(col_width) for h in horizons)
        rows.append(name.ljust(name_width) + cells)
    return rows


def render_table(report: EvalReport, title="TCD evaluation") -> str:
    """Aligned text table: one row per metric, one column per horizon (ms)."""
    horizons = _horizons(report)
    name_width = max(len(n) for n in list(report.metrics) + ["metric"]) + 2
    col_width = max(9, max(len(h) for h in horizons) + 5)
    header = "metric".ljust(name_width) + "".join(f"{h}ms".rjust(col_width) for h in horizons)
    groups = [(name, _table_rows(group.metrics, horizons, name_width, col_width))
              for name, group in sorted(report.groups.items())]
    return _env.get_template('report_table.txt.j2').render(
        title=title, report=report, regime_label=_regime_label(report), header=header, rule="-" * len(header),
        rows=_table_rows(report.metrics, horizons, name_width, col_width), groups=groups)


def generate_html_report(report: EvalReport, output_path, title="TCD evaluation"):
    """Static HTML page of the report (overall table plus one table per group)."""
    sections = [("", _ordered_metrics(report.metrics))]
    sections += [(name, _ordered_metrics(group.metrics)) for name, group in sorted(report.groups.items())]
    html = _env.get_template('report.html.j2').render(
        title=title, report=report, regime_label=_regime_label(report), horizons=_horizons(report),
        sections=sections)
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        f.write(html)
    logger.info(f"Static report generated: {os.path.basename(output_path)}")
    return output_path
