#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Module for writing run artifacts.
Transcripts and event logs as line-delimited records, summary and timing
tables as CSV, plus HTML and Excel reports with charts.
"""

import json
import logging
from typing import List, Dict, Any, Iterable, Optional, Sequence
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import jinja2

from net_sim import event_log_lines

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["test_id", "os", "scenario", "protocol", "channel", "repetition", "seed", "bits",
                   "successes", "invalid", "ber", "bit_rate_bph", "elapsed_s"]
TIMING_COLUMNS = ["repetition", "index", "bit", "decoded", "start", "end", "duration",
                  "sender_packets", "receiver_packets", "error"]

DEFAULT_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{{ report_title }}</title>
    <style>
        body { font-family: Arial, sans-serif; margin: 40px; line-height: 1.6; }
        .summary { margin: 20px 0; padding: 20px; background-color: #f9f9f9; border-radius: 5px; }
        .verdict { font-size: 22px; font-weight: bold; color: {{ verdict_color }}; }
        table { border-collapse: collapse; width: 100%; }
        th, td { padding: 8px; text-align: left; border-bottom: 1px solid #ddd; }
        th { background-color: #f2f2f2; }
        .wrong { background-color: #FFC7CE; }
        .guessed { background-color: #FFEB9C; }
    </style>
</head>
<body>
    <h1>{{ report_title }}</h1>
    <div class="summary">
        <p>Channel: {{ channel }} &middot; Target: {{ os_kind }} &middot; Topology: {{ scenario }}</p>
        <p>Master seed: {{ seed }}</p>
        <p class="verdict">{{ successes }}/{{ bits }} bits correct, {{ bit_rate }} b/h</p>
        {% if audit %}
        <p>Event-log audit: {{ audit.sav }} SAV and {{ audit.stateful }} stateful violation(s)</p>
        {% endif %}
    </div>

    {% for name, path in charts.items() %}
    <div><h3>{{ name }}</h3><img src="{{ path }}" alt="{{ name }}" width="80%"></div>
    {% endfor %}

    <h2>Repetitions</h2>
    <table>
        <tr>{% for col in summary_columns %}<th>{{ col }}</th>{% endfor %}</tr>
        {% for row in summary_rows %}
        <tr>{% for col in summary_columns %}<td>{{ row[col] }}</td>{% endfor %}</tr>
        {% endfor %}
    </table>

    <h2>Per-bit records (first repetition)</h2>
    <table>
        <tr><th>#</th><th>sent</th><th>decoded</th><th>start</th><th>end</th><th>error</th></tr>
        {% for rec in per_bit %}
        <tr class="{% if rec.details.guessed %}guessed{% elif rec.decoded != rec.bit %}wrong{% endif %}">
            <td>{{ rec.index }}</td><td>{{ rec.bit }}</td><td>{{ rec.decoded }}</td>
            <td>{{ '%.3f' % rec.start }}</td><td>{{ '%.3f' % rec.end }}</td><td>{{ rec.error or '' }}</td>
        </tr>
        {% endfor %}
    </table>
</body>
</html>
"""


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if hasattr(value, "to_dict"):
        return value.to_dict()
    return str(value)


def record_lines(records: Iterable[Dict[str, Any]]) -> Iterable[str]:
    for rec in records:
        yield json.dumps(rec, sort_keys=True, default=_json_default)


class ReportGenerator:
    """Writes every artifact of a scenario run into one output directory."""

    def __init__(self,
                 template_dir: str = '../templates',
                 output_dir: str = '../output'):
        """
        Args:
            template_dir: Directory holding report templates (created with a default)
            output_dir: Directory for generated artifacts
        """
        self.template_dir = Path(template_dir)
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self._init_jinja_env()
        logger.info(f"ReportGenerator initialized with template_dir={template_dir}, output_dir={output_dir}")

    def _init_jinja_env(self):
        self.template_dir.mkdir(parents=True, exist_ok=True)
        default_template_path = self.template_dir / 'run_report.html'
        if not default_template_path.exists():
            default_template_path.write_text(DEFAULT_TEMPLATE, encoding='utf-8')
        self.jinja_env = jinja2.Environment(
            loader=jinja2.FileSystemLoader(self.template_dir),
            autoescape=jinja2.select_autoescape(['html', 'xml'])
        )

    def _path(self, name: str) -> Path:
        path = self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    # -- line-delimited records ---------------------------------------------

    def write_records(self, records: Iterable[Dict[str, Any]], name: str) -> str:
        path = self._path(name)
        with open(path, 'w', encoding='utf-8') as f:
            for line in record_lines(records):
                f.write(line + "\n")
        return str(path)

    def write_transcript(self, per_bit: Sequence[Dict[str, Any]], name: str, fmt: str = "records",
                         repetition: int = 0) -> str:
        """One line per bit (records) or one row per bit (csv)."""
        if fmt == "csv":
            return self.write_bit_timing(per_bit, name, repetition)
        out = self.write_records(per_bit, name)
        logger.info(f"Transcript with {len(per_bit)} bit record(s) saved to {out}")
        return out

    def write_event_log(self, records: Iterable[Dict[str, Any]], name: str) -> str:
        path = self._path(name)
        count = 0
        with open(path, 'w', encoding='utf-8') as f:
            for line in event_log_lines(records):
                f.write(line + "\n")
                count += 1
        logger.info(f"Event log with {count} event(s) saved to {path}")
        return str(path)

    # -- tables ---------------------------------------------------------------

    def bit_timing_frame(self, per_bit: Sequence[Dict[str, Any]], repetition: int = 0) -> pd.DataFrame:
        rows = [{"repetition": repetition, "index": r["index"], "bit": r["bit"], "decoded": r["decoded"],
                 "start": r["start"], "end": r["end"], "duration": round(r["end"] - r["start"], 9),
                 "sender_packets": r["sender_packets"], "receiver_packets": r["receiver_packets"],
                 "error": r["error"] or ""} for r in per_bit]
        return pd.DataFrame(rows, columns=TIMING_COLUMNS)

    def write_bit_timing(self, per_bit: Sequence[Dict[str, Any]], name: str, repetition: int = 0) -> str:
        path = self._path(name)
        self.bit_timing_frame(per_bit, repetition).to_csv(path, index=False)
        return str(path)

    def write_summary(self, rows: Sequence[Dict[str, Any]], name: str = "summary.csv") -> str:
        path = self._path(name)
        pd.DataFrame(list(rows), columns=SUMMARY_COLUMNS).to_csv(path, index=False)
        logger.info(f"Summary with {len(rows)} row(s) saved to {path}")
        return str(path)

    def write_sweep(self, rows: Sequence[Dict[str, Any]], columns: Sequence[str], name: str = "sweep.csv") -> str:
        """An empty sweep still gets its header line."""
        path = self._path(name)
        pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False)
        logger.info(f"Sweep with {len(rows)} grid point(s) saved to {path}")
        return str(path)

    # -- charts ---------------------------------------------------------------

    def generate_charts(self, summary_rows: Sequence[Dict[str, Any]], per_bit: Sequence[Dict[str, Any]],
                        output_prefix: str) -> Dict[str, str]:
        """
        Returns:
            Chart titles mapped to paths relative to the output directory
        """
        chart_paths = {}
        if per_bit:
            fig, ax = plt.subplots(figsize=(10, 3))
            index = [r["index"] for r in per_bit]
            ax.step(index, [r["bit"] for r in per_bit], where="mid", label="sent", linewidth=2)
            ax.step(index, [-0.1 if r["decoded"] is None else r["decoded"] - 0.05 for r in per_bit],
                    where="mid", label="decoded", linestyle="--")
            ax.set_yticks([0, 1])
            ax.set_xlabel("bit index")
            ax.legend(loc="upper right")
            path = self._path(f"charts/{output_prefix}_bits.png")
            fig.savefig(path, dpi=100, bbox_inches='tight')
            plt.close(fig)
            chart_paths["Sent and decoded bits"] = str(path.relative_to(self.output_dir))
        summary_rows = [r for r in summary_rows if r.get("ber") is not None]
        if summary_rows:
            fig, ax1 = plt.subplots(figsize=(8, 4))
            reps = [r["repetition"] for r in summary_rows]
            ax1.bar(reps, [r["ber"] for r in summary_rows], color="#F44336", alpha=0.7)
            ax1.set_ylim(0, max(0.6, max(r["ber"] for r in summary_rows) * 1.1))
            ax1.set_xlabel("repetition")
            ax1.set_ylabel("BER")
            ax2 = ax1.twinx()
            ax2.plot(reps, [r["bit_rate_bph"] for r in summary_rows], color="#2196F3", marker="o")
            ax2.set_ylabel("bits/hour")
            path = self._path(f"charts/{output_prefix}_ber.png")
            fig.savefig(path, dpi=100, bbox_inches='tight')
            plt.close(fig)
            chart_paths["BER and throughput per repetition"] = str(path.relative_to(self.output_dir))
        return chart_paths

    def plot_curve(self, x: Sequence[float], y: Sequence[float], name: str, xlabel: str, ylabel: str,
                   reference: Optional[Sequence[float]] = None, logy: bool = False) -> str:
        """A measured curve with an optional closed-form reference, as used by sweeps."""
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(x, y, marker="o", label="measured")
        if reference is not None:
            ax.plot(x, reference, linestyle="--", label="closed form")
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        path = self._path(f"charts/{name}.png")
        fig.savefig(path, dpi=100, bbox_inches='tight')
        plt.close(fig)
        return str(path)

    # -- documents ------------------------------------------------------------

    def generate_html_report(self, run: Dict[str, Any], name: str = "report.html",
                             template_name: str = 'run_report.html') -> str:
        """
        Args:
            run: Scenario metadata plus 'summary_rows', 'per_bit' and optional 'audit'
        """
        rows = run.get("summary_rows", [])
        bits = sum(r["bits"] for r in rows)
        successes = sum(r["successes"] for r in rows)
        rates = [r["bit_rate_bph"] for r in rows if r.get("bit_rate_bph") is not None]
        charts = self.generate_charts(rows, run.get("per_bit", []), Path(name).stem)
        template_data = {
            'report_title': f"Covert channel run {run.get('test_id', '')}".strip(),
            'channel': run.get("channel", ""),
            'os_kind': run.get("os", ""),
            'scenario': run.get("scenario", ""),
            'seed': run.get("seed", ""),
            'bits': bits,
            'successes': successes,
            'bit_rate': f"{np.mean(rates):.2f}" if rates else "n/a",
            'verdict_color': "#4CAF50" if bits and successes == bits else "#F44336",
            'audit': run.get("audit"),
            'charts': charts,
            'summary_columns': SUMMARY_COLUMNS,
            'summary_rows': rows,
            'per_bit': run.get("per_bit", []),
        }
        template = self.jinja_env.get_template(template_name)
        path = self._path(name)
        path.write_text(template.render(**template_data), encoding='utf-8')
        logger.info(f"HTML report saved to {path}")
        return str(path)

    def generate_excel_report(self, summary_rows: Sequence[Dict[str, Any]], timing: pd.DataFrame,
                              name: str = "report.xlsx") -> str:
        path = self._path(name)
        writer = pd.ExcelWriter(path, engine='xlsxwriter')
        pd.DataFrame(list(summary_rows), columns=SUMMARY_COLUMNS).to_excel(writer, sheet_name='Summary', index=False)
        timing.to_excel(writer, sheet_name='Per-bit timing', index=False)

        workbook = writer.book
        summary_sheet = writer.sheets['Summary']
        summary_sheet.set_column('A:E', 14)
        summary_sheet.set_column('F:M', 11)
        timing_sheet = writer.sheets['Per-bit timing']
        timing_sheet.set_column('A:I', 12)
        timing_sheet.set_column('J:J', 50)
        wrong = workbook.add_format({'bg_color': '#FFC7CE', 'font_color': '#9C0006'})
        if len(timing):
            timing_sheet.conditional_format(f'D2:D{len(timing) + 1}', {
                'type': 'formula',
                'criteria': '=$D2<>$C2',
                'format': wrong
            })
        writer.close()
        logger.info(f"Excel report saved to {path}")
        return str(path)

    def write_seed_report(self, report: Dict[str, Any], name: str = "seed_report.json") -> str:
        path = self._path(name)
        path.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n",
                        encoding='utf-8')
        logger.info(f"Seed report saved to {path}")
        return str(path)
