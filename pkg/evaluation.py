"""
Evaluation module for scoring segmentation models on labelled eval sets.
Builds confusion matrices, per-class IoU and mIoU, per domain and averaged.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix

from mixing import IGNORE
from model import SegModel, forward
from numerics import no_grad
from utils import ArgumentError, format_miou, save_json, load_json


@dataclass
class EvalReport:
    """
    Scores of one model on one domain.

    Attributes:
        domain: Domain name
        confusion: (K, K) counts, rows = ground truth, columns = prediction
        iou: (K,) per-class IoU, NaN where the class is neither present nor predicted
        miou: Mean of the defined IoUs (NaN when none is defined)
    """
    domain: str
    confusion: np.ndarray
    iou: np.ndarray
    miou: float

    @property
    def pixel_count(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "domain": self.domain,
            "confusion": self.confusion.astype(int).tolist(),
            "iou": [None if np.isnan(v) else float(v) for v in self.iou],
            "miou": None if np.isnan(self.miou) else float(self.miou),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        return cls(
            domain=data["domain"],
            confusion=np.asarray(data["confusion"], dtype=np.int64),
            iou=np.array([np.nan if v is None else v for v in data["iou"]], dtype=np.float64),
            miou=np.nan if data["miou"] is None else float(data["miou"]),
        )


@dataclass
class EvalSummary:
    """Per-domain reports plus their arithmetic-mean mIoU."""
    reports: Dict[str, EvalReport] = field(default_factory=dict)

    @property
    def mean_miou(self) -> float:
        values = [r.miou for r in self.reports.values() if not np.isnan(r.miou)]
        return float(np.mean(values)) if values else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        mean = self.mean_miou
        return {
            "domains": {name: report.to_dict() for name, report in self.reports.items()},
            "mean_miou": None if np.isnan(mean) else mean,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalSummary":
        return cls({name: EvalReport.from_dict(r) for name, r in data["domains"].items()})


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """IoU_j = TP_j / (TP_j + FP_j + FN_j); NaN where the denominator is 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=1) + cm.sum(axis=0) - tp
    return np.divide(tp, denom, out=np.full_like(tp, np.nan), where=denom > 0)


class Evaluator:
    """Handles prediction and scoring of segmentation models."""

    def __init__(self, num_classes: int, class_names: Optional[List[str]] = None, batch_size: int = 16):
        """
        Initialize the evaluator.

        Args:
            num_classes: Class count K
            class_names: Optional names used in summaries
            batch_size: Images per forward pass
        """
        self.num_classes = num_classes
        self.class_names = class_names or [str(j) for j in range(num_classes)]
        self.batch_size = batch_size

    def confusion(self, predictions: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """
        Confusion matrix over all non-IGNORE pixels.

        Args:
            predictions: Predicted class ids
            labels: Ground-truth ids, same shape, 255 = IGNORE

        Returns:
            (K, K) int64 counts
        """
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        if predictions.shape != labels.shape:
            raise ArgumentError(f"Predictions {predictions.shape} and labels {labels.shape} differ in shape")
        valid = labels != IGNORE
        y_true, y_pred = labels[valid].ravel(), predictions[valid].ravel()
        if np.any(y_true >= self.num_classes) or np.any(y_true < 0):
            raise ArgumentError(f"Ground truth has ids outside [0, {self.num_classes})")
        k = self.num_classes
        if y_true.size == 0:
            return np.zeros((k, k), dtype=np.int64)
        return confusion_matrix(y_true, y_pred, labels=np.arange(k)).astype(np.int64)

    def report(self, predictions: np.ndarray, labels: np.ndarray, domain: str = "") -> EvalReport:
        cm = self.confusion(predictions, labels)
        iou = iou_from_confusion(cm)
        miou = float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else float("nan")
        return EvalReport(domain=domain, confusion=cm, iou=iou, miou=miou)

    def predict(self, model: SegModel, images: np.ndarray) -> np.ndarray:
        """Argmax label maps for a stack of images."""
        outputs = []
        for start in range(0, len(images), self.batch_size):
            with no_grad():
                _, logits = forward(model, images[start:start + self.batch_size])
            outputs.append(np.argmax(logits.data, axis=-1))
        return np.concatenate(outputs)

    def evaluate(self, model: SegModel, eval_set) -> EvalReport:
        """
        Score a model on one labelled domain split.

        Args:
            model: Model to evaluate
            eval_set: DomainData with labels

        Returns:
            EvalReport for that domain
        """
        if eval_set.labels is None:
            raise ArgumentError(f"Eval set '{eval_set.name}' has no labels")
        return self.report(self.predict(model, eval_set.images), eval_set.labels, eval_set.name)

    def evaluate_domains(self, model: SegModel, eval_sets: Dict[str, Any]) -> EvalSummary:
        """Per-domain reports plus their mean, in eval-set order."""
        if not eval_sets:
            raise ArgumentError("No eval sets to evaluate on")
        return EvalSummary({name: self.evaluate(model, data) for name, data in eval_sets.items()})

    def pair_iou(self, report: EvalReport, pair: Sequence[int]) -> float:
        """Mean IoU over a class pair (defined entries only)."""
        values = report.iou[list(pair)]
        values = values[~np.isnan(values)]
        return float(values.mean()) if values.size else float("nan")

    def save_summary(self, summary: EvalSummary, output_path: str) -> None:
        save_json(summary.to_dict(), output_path)

    def load_summary(self, report_path: str) -> EvalSummary:
        return EvalSummary.from_dict(load_json(report_path))

    def get_summary(self, summary: EvalSummary, title: str = "EVALUATION SUMMARY") -> str:
        """
        Generate a human-readable summary of the evaluation.

        Args:
            summary: Per-domain reports
            title: Heading line

        Returns:
            Formatted summary string
        """
        text = f"\n{title}\n{'=' * len(title)}\n"
        for name, report in summary.reports.items():
            text += f"\n{name}: mIoU {format_miou(report.miou)} over {report.pixel_count} pixels\n"
            for j, value in enumerate(report.iou):
                text += f"  {self.class_names[j]:<10} {format_miou(value)}\n"
        if len(summary.reports) > 1:
            text += f"\nAverage mIoU: {format_miou(summary.mean_miou)}\n"
        return text


def evaluate(model: SegModel, eval_set, batch_size: int = 16) -> EvalReport:
    """Convenience wrapper: score ``model`` on one labelled eval set."""
    return Evaluator(model.num_classes, batch_size=batch_size).evaluate(model, eval_set)
