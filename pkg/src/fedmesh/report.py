"""Report rendering: machine-readable rows plus aligned text tables.

``report.rows`` carries one record per line as sorted ``key=value`` pairs and
contains only run-deterministic values (metrics, seeds, virtual durations),
so identical configs reproduce it byte for byte.  ``report.txt`` is the
human rendering and may carry wall-clock timings.
"""

from __future__ import annotations

import math
from pathlib import Path

from .kvdoc import Scalar

Row = dict[str, Scalar]


def _format_value(value: Scalar) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value in report row: {value!r}")
        return repr(value)
    text = str(value)
    if " " in text or "=" in text or "\n" in text:
        raise ValueError(f"row values must be atom-like, got {text!r}")
    return text


def render_rows(rows: list[Row]) -> str:
    lines = []
    for row in rows:
        lines.append(" ".join(f"{k}={_format_value(row[k])}" for k in sorted(row)))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_rows(text: str) -> list[Row]:
    rows: list[Row] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        row: Row = {}
        for token in line.split():
            key, _, raw = token.partition("=")
            row[key] = _parse_value(raw)
        rows.append(row)
    return rows


def _parse_value(raw: str) -> Scalar:
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def _table(header: list[str], body: list[list[str]]) -> str:
    widths = [
        max(len(str(cell)) for cell in column)
        for column in zip(header, *body)
    ]
    def fmt(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(row) for row in body])


def metrics_table(rows: list[Row], label_key: str) -> str:
    """Precision/recall/F1 columns per configuration, entity level headline."""
    labels = [str(r[label_key]) for r in rows]
    header = ["metric"] + labels
    body = []
    for metric, key in (
        ("precision", "ent_precision"),
        ("recall", "ent_recall"),
        ("f1", "ent_f1"),
        ("token-f1", "tok_f1"),
    ):
        body.append([metric] + [f"{float(r[key]):.4f}" for r in rows])
    return _table(header, body)


def cross_site_table(rows: list[Row]) -> str:
    header = ["site", "entity-f1", "token-f1", "tp", "fp", "fn"]
    body = []
    for row in rows:
        if row.get("absent"):
            body.append([str(row["site"]), "absent", "-", "-", "-", "-"])
        else:
            body.append([
                str(row["site"]),
                f"{float(row['ent_f1']):.4f}",
                f"{float(row['tok_f1']):.4f}",
                str(row["ent_tp"]), str(row["ent_fp"]), str(row["ent_fn"]),
            ])
    return _table(header, body)


def round_table(rows: list[Row]) -> str:
    header = ["config", "round", "responded", "late", "attempts", "agg-norm", "virtual-ms"]
    body = [
        [
            str(r["config"]), str(r["round"]), str(r["responded"]), str(r["late"]),
            str(r["attempts"]), f"{float(r['aggregate_norm']):.6f}",
            f"{float(r['duration_ms']):.1f}",
        ]
        for r in rows
    ]
    return _table(header, body)


def write_report(out_dir: str | Path, rows: list[Row], text: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows_path = out / "report.rows"
    txt_path = out / "report.txt"
    rows_path.write_text(render_rows(rows), encoding="utf-8")
    txt_path.write_text(text, encoding="utf-8")
    return rows_path, txt_path
