#!/usr/bin/env python3
"""
Metrics report exporter
Writes ablation and evaluation tables to CSV, JSON, Excel and a text summary
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import jsonschema
import pandas as pd

from .errors import ArchiveFormatError
from .metrics import REPORT_SCHEMA, MetricsReport

logger = logging.getLogger(__name__)

REPORT_COLUMNS = list(REPORT_SCHEMA["required"])

METRICS_DOCUMENT_SCHEMA = {
    "type": "object",
    "required": ["metadata", "records"],
    "properties": {
        "metadata": {
            "type": "object",
            "required": ["export_date", "record_count"],
        },
        "records": {"type": "array", "items": REPORT_SCHEMA},
    },
}


def reports_frame(reports: Sequence[Union[MetricsReport, Dict]]) -> pd.DataFrame:
    """One row per report, columns in report-field order"""
    rows = [r.to_dict() if isinstance(r, MetricsReport) else dict(r) for r in reports]
    df = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return df


def _records(df: pd.DataFrame) -> List[Dict]:
    records = []
    for row in df.to_dict("records"):
        record = {}
        for key in REPORT_COLUMNS:
            value = row[key]
            if key == "resolution":
                value = [int(v) for v in value]
            elif key == "n_frames":
                value = int(value)
            elif key in ("pixel_mse", "frame_similarity", "prompt_fidelity"):
                value = None if value is None or pd.isna(value) else float(value)
            record[key] = value
        records.append(record)
    return records


def metrics_document(reports: Sequence[Union[MetricsReport, Dict]], edit_prompt: Optional[str] = None) -> Dict:
    records = _records(reports_frame(reports))
    document = {
        "metadata": {
            "export_date": datetime.now().isoformat(),
            "record_count": len(records),
            "edit_prompt": edit_prompt,
        },
        "records": records,
    }
    jsonschema.validate(document, METRICS_DOCUMENT_SCHEMA)
    return document


def read_metrics_json(path: Union[str, Path]) -> List[MetricsReport]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        jsonschema.validate(document, METRICS_DOCUMENT_SCHEMA)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as e:
        raise ArchiveFormatError(f"{path} is not a metrics document: {e}") from e
    return [MetricsReport(**{**r, "resolution": tuple(r["resolution"])}) for r in document["records"]]


class MetricsExporter:
    """Handles metrics exports in multiple formats"""

    def __init__(self, output_directory: Union[str, Path] = "output"):
        self.output_directory = Path(output_directory)
        self.output_directory.mkdir(parents=True, exist_ok=True)
        for sub in ("csv", "json", "excel", "reports"):
            (self.output_directory / sub).mkdir(exist_ok=True)

    def export_to_csv(self, reports: Sequence[MetricsReport], filename: str) -> Path:
        output_path = self.output_directory / "csv" / f"{filename}.csv"
        df = reports_frame(reports)
        df["resolution"] = df["resolution"].map(lambda r: f"{r[0]}x{r[1]}")
        df.to_csv(output_path, index=False)
        logger.info(f"✅ CSV exported to {output_path}")
        return output_path

    def export_to_json(self, reports: Sequence[MetricsReport], filename: str,
                       edit_prompt: Optional[str] = None) -> Path:
        output_path = self.output_directory / "json" / f"{filename}.json"
        document = metrics_document(reports, edit_prompt)
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
        logger.info(f"✅ JSON exported to {output_path}")
        return output_path

    def export_to_excel(self, reports: Sequence[MetricsReport], filename: str,
                        edit_prompt: Optional[str] = None) -> Path:
        output_path = self.output_directory / "excel" / f"{filename}.xlsx"
        df = reports_frame(reports)
        df["resolution"] = df["resolution"].map(lambda r: f"{r[0]}x{r[1]}")
        with pd.ExcelWriter(output_path, engine="openpyxl") as writer:
            df.to_excel(writer, sheet_name="Metrics", index=False)
            pd.DataFrame({
                "Metadata": ["Export Date", "Record Count", "Edit Prompt"],
                "Value": [datetime.now().isoformat(), len(df), edit_prompt or ""],
            }).to_excel(writer, sheet_name="Metadata", index=False)
        logger.info(f"✅ Excel exported to {output_path}")
        return output_path

    def generate_summary_report(self, reports: Sequence[MetricsReport], name: str,
                                edit_prompt: Optional[str] = None) -> Path:
        report_path = self.output_directory / "reports" / f"{name}_summary_report.txt"
        df = reports_frame(reports)
        with open(report_path, "w", encoding="utf-8") as f:
            f.write("Video Edit Metrics Summary\n")
            f.write("==========================\n\n")
            f.write(f"Run: {name}\n")
            f.write(f"Generated: {datetime.now().isoformat()}\n")
            if edit_prompt:
                f.write(f"Edit prompt: {edit_prompt}\n")
            f.write(f"Total Rows: {len(df)}\n\n")

            if len(df):
                f.write("Per variant:\n")
                for row in df.itertuples(index=False):
                    similarity = "n/a" if pd.isna(row.frame_similarity) else f"{row.frame_similarity:.4f}"
                    fidelity = "n/a" if pd.isna(row.prompt_fidelity) else f"{row.prompt_fidelity:.3f}"
                    f.write(f"  {row.variant or row.clip_id}: Pixel-MSE {row.pixel_mse:.3f}, "
                            f"frame similarity {similarity}, prompt fidelity {fidelity}\n")
                best = df.loc[df["pixel_mse"].idxmin()]
                f.write(f"\nLowest Pixel-MSE: {best['variant'] or best['clip_id']} ({best['pixel_mse']:.3f})\n")

        logger.info(f"✅ Summary report generated: {report_path}")
        return report_path

    def export_all(self, reports: Sequence[MetricsReport], name: str,
                   edit_prompt: Optional[str] = None) -> Dict[str, Path]:
        """Every format at once; Excel failures (missing engine) are logged and skipped"""
        paths = {
            "csv": self.export_to_csv(reports, name),
            "json": self.export_to_json(reports, name, edit_prompt),
            "report": self.generate_summary_report(reports, name, edit_prompt),
        }
        try:
            paths["excel"] = self.export_to_excel(reports, name, edit_prompt)
        except (ImportError, ValueError) as e:
            logger.warning(f"⚠️  Excel export skipped: {e}")
        return paths
