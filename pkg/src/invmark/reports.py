"""Published report schema, validation and writers for the JSON/CSV metric files."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import jsonschema

from invmark.errors import ConfigError
from invmark.objectives import CSV_FIELDS, MetricReport

_PSNR = {"oneOf": [{"type": "number"}, {"const": "inf"}]}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "invmark metric report",
    "type": "object",
    "required": ["psnr_db", "brr_percent", "n_images", "entries", "meta"],
    "additionalProperties": False,
    "properties": {
        "psnr_db": _PSNR,
        "brr_percent": {"type": "number", "minimum": 0, "maximum": 100},
        "n_images": {"type": "integer", "minimum": 1},
        "meta": {"type": "object"},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["noise", "level", "brr_percent", "psnr_db", "n_images"],
                "additionalProperties": False,
                "properties": {
                    "noise": {"type": "string", "minLength": 1},
                    "level": {"type": ["number", "null"]},
                    "brr_percent": {"type": "number", "minimum": 0, "maximum": 100},
                    "psnr_db": _PSNR,
                    "n_images": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


def validate_report(data: dict) -> None:
    try:
        jsonschema.validate(data, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"report does not match schema: {exc.message}") from exc


def validate_csv(text: str) -> list[dict]:
    """Check header, column types and value ranges; returns the parsed rows."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_FIELDS:
        raise ConfigError(f"csv header {reader.fieldnames} != {CSV_FIELDS}")
    rows = list(reader)
    if not rows or rows[0]["noise"] != "none" or rows[0]["level"] != "":
        raise ConfigError("first csv row must be the clean (noise=none) row")
    for i, row in enumerate(rows):
        try:
            brr = float(row["brr_percent"])
            psnr = math.inf if row["psnr_db"] == "inf" else float(row["psnr_db"])
            n = int(row["n_images"])
            if row["level"] != "":
                float(row["level"])
        except ValueError as exc:
            raise ConfigError(f"csv row {i}: {exc}") from exc
        if not 0 <= brr <= 100 or n < 1 or math.isnan(psnr) or not row["noise"]:
            raise ConfigError(f"csv row {i} out of range: {row}")
    return rows


def write_report(report: MetricReport, out_dir, stem: str = "report") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    validate_report(data)
    paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv"}
    paths["json"].write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    paths["csv"].write_text(report.to_csv())
    return paths


def load_report(path) -> MetricReport:
    data = json.loads(Path(path).read_text())
    validate_report(data)
    return MetricReport.from_dict(data)


def write_schema(path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(REPORT_SCHEMA, indent=2) + "\n")
    return path
