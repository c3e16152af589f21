from pathlib import Path
from typing import Dict, List, Optional, Tuple
from loguru import logger

from helpers.json_io import write_json
from models.report import MetricsReport, TrainingReport


class ReportGenerator:
    """
    Renders evaluation and training reports as JSON and aligned plain text.
    """

    def __init__(self):
        self.report_template = (
            "Localization report: {appliance}\n"
            "\n"
            "{scores}\n"
            "\n"
            "Per-timestamp counts\n"
            "{counts}\n"
            "\n"
            "Per-window detection counts\n"
            "{detection_counts}\n"
        )

    @staticmethod
    def _table(rows: List[Tuple[str, str]]) -> str:
        width = max(len(label) for label, _ in rows)
        value_width = max(len(value) for _, value in rows)
        return "\n".join(f"  {label:<{width}}  {value:>{value_width}}" for label, value in rows)

    @staticmethod
    def _fmt(value: Optional[float], digits: int = 4) -> str:
        return "n/a" if value is None else f"{value:.{digits}f}"

    def render_text(self, report: MetricsReport) -> str:
        scores = self._table([
            ("F1", self._fmt(report.f1)),
            ("Precision", self._fmt(report.precision)),
            ("Recall", self._fmt(report.recall)),
            ("Balanced accuracy", self._fmt(report.balanced_accuracy)),
            ("MAE (W)", self._fmt(report.mae, 2)),
            ("RMSE (W)", self._fmt(report.rmse, 2)),
            ("Matching ratio", self._fmt(report.matching_ratio)),
            ("Timestamps", str(report.timestamps_evaluated)),
            ("Windows", str(report.windows_evaluated)),
        ])
        return self.report_template.format(
            appliance=report.appliance,
            scores=scores,
            counts=self._counts_table(report.counts.model_dump()),
            detection_counts=self._counts_table(report.detection_counts.model_dump()),
        )

    def _counts_table(self, counts: Dict[str, int]) -> str:
        return self._table([(name.upper(), str(value)) for name, value in counts.items()])

    def render_training_text(self, report: TrainingReport) -> str:
        rows = [("Candidate", "epochs  val-sub   validation  selected")]
        for c in report.candidates:
            rows.append((
                f"k={c.kernel_size:<3} trial={c.trial}",
                f"{c.epochs_run:>6}  {c.best_val_sub_loss:.4f}    {c.validation_loss:.4f}      {'yes' if c.selected else ''}",
            ))
        width = max(len(label) for label, _ in rows)
        body = "\n".join(f"  {label:<{width}}  {value}" for label, value in rows)
        accuracy = self._fmt(report.validation_balanced_accuracy)
        return f"Training report: {report.appliance}\n\n{body}\n\nValidation balanced accuracy: {accuracy}\n"

    def export(self, report: MetricsReport, out_dir: Path, stem: str = "metrics") -> Tuple[Path, Path]:
        """
        Write ``<stem>.json`` and ``<stem>.txt`` into ``out_dir``.
        """
        try:
            out_dir = Path(out_dir)
            json_path = write_json(out_dir / f"{stem}.json", report)
            text_path = out_dir / f"{stem}.txt"
            text_path.write_text(self.render_text(report), encoding="utf-8")
            logger.info(f"Metrics report exported to {json_path} and {text_path}")
            return json_path, text_path
        except Exception as e:
            logger.error(f"Error exporting report: {str(e)}")
            raise

    def export_training(self, report: TrainingReport, out_dir: Path, stem: str = "training_report") -> Tuple[Path, Path]:
        out_dir = Path(out_dir)
        json_path = write_json(out_dir / f"{stem}.json", report)
        text_path = out_dir / f"{stem}.txt"
        text_path.write_text(self.render_training_text(report), encoding="utf-8")
        logger.info(f"Training report exported to {json_path}")
        return json_path, text_path
