"""Versioned JSON reports plus the delimited (CSV) per-pair dump.

Every report the CLI writes validates against REPORT_SCHEMA before it
hits disk; reports carry no timestamps so identical runs produce
byte-identical files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import jsonschema

SCHEMA_VERSION = "facevq-report-v1"

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema_version", "kind", "metadata", "body"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": ["metrics", "ablation", "probe"]},
        "metadata": {
            "type": "object",
            "required": ["seed"],
            "properties": {
                "seed": {"type": "integer"},
                "manifest": {"type": "string"},
                "checkpoints": {"type": "string"},
                "checkpoint_digests": {"type": "object"},
                "notes": {"type": "string"},
            },
        },
        "body": {"type": "object"},
        "pairs": {"type": "array", "items": {"type": "object"}},
    },
    "additionalProperties": False,
}


class ReportError(ValueError):
    pass


def make_report(kind: str, metadata: dict, body: dict, pairs: list | None = None) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "metadata": metadata,
        "body": body,
    }
    if pairs is not None:
        report["pairs"] = pairs
    validate_report(report)
    return report


def validate_report(report: dict):
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ReportError(f"report does not match {SCHEMA_VERSION}: {exc.message}") from exc


def write_report(report: dict, path: str | Path) -> Path:
    validate_report(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
    return path


def write_pairs_csv(pairs: list, path: str | Path) -> Path | None:
    """Per-pair records as CSV next to the JSON report."""
    if not pairs:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = sorted({k for rec in pairs for k in rec})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for rec in pairs:
            writer.writerow(rec)
    return path


def load_report(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    validate_report(report)
    return report
