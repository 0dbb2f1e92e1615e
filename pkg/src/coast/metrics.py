"""Confusion-matrix IoU evaluation and uncertainty-map export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .data import DomainDataset
from .segnet import AGNOSTIC, ModelBundle
from .selftrain import rectification_weight


class UnlabeledDatasetError(ValueError):
    pass


class ConfusionMatrix:
    """K x K counts indexed [true class, predicted class]."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
        if pred.size == 0:
            return self
        k = self.num_classes
        for name, arr in (("prediction", pred), ("truth", truth)):
            if arr.min() < 0 or arr.max() >= k:
                raise ValueError(f"{name} has a class outside [0, {k})")
        flat = truth.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    return cm.accumulate(pred, truth)


def miou(cm: ConfusionMatrix | np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where TP+FP+FN = 0) and the mean over present classes."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    iou = np.full(len(tp), np.nan)
    present = denom > 0
    iou[present] = tp[present] / denom[present]
    return iou, float(iou[present].mean())


@dataclass
class DomainReport:
    domain_id: str
    head: str
    iou: np.ndarray
    miou: float
    confusion: ConfusionMatrix


@dataclass
class MetricsReport:
    domains: list[DomainReport] = field(default_factory=list)

    @property
    def per_domain(self) -> dict[str, float]:
        return {d.domain_id: d.miou for d in self.domains}

    @property
    def avg_miou(self) -> float:
        return float(np.mean([d.miou for d in self.domains]))

    def add(self, report: DomainReport) -> "MetricsReport":
        self.domains.append(report)
        return self

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "class", "iou"])
            for d in self.domains:
                for k, v in enumerate(d.iou):
                    w.writerow([d.domain_id, k, "" if np.isnan(v) else repr(float(v))])
                w.writerow([d.domain_id, "mIoU", repr(d.miou)])
            w.writerow(["ALL", "avg_mIoU", repr(self.avg_miou)])


def predict_labels(bundle: ModelBundle, images: np.ndarray, head=AGNOSTIC, batch_size: int = 50) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            p = bundle.forward(images[s : s + batch_size].astype(bundle.config.dtype), head)
            out.append(p.data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.uint8)


def evaluate(bundle: ModelBundle, dataset: DomainDataset, head=AGNOSTIC, batch_size: int = 50) -> DomainReport:
    """Eval-mode segmentation of a labeled dataset; C^A unless another head is named."""
    if dataset.labels is None:
        raise UnlabeledDatasetError(f"dataset {dataset.domain_id!r} has no labels to evaluate against")
    bundle.check_head(head)
    cm = ConfusionMatrix(bundle.config.num_classes)
    cm.accumulate(predict_labels(bundle, dataset.images, head, batch_size), dataset.labels)
    iou, m = miou(cm)
    return DomainReport(dataset.domain_id, str(head), iou, m, cm)


def evaluate_all(bundle: ModelBundle, datasets: list[DomainDataset], head=AGNOSTIC) -> MetricsReport:
    report = MetricsReport()
    for ds in datasets:
        report.add(evaluate(bundle, ds, head))
    return report


def rectification_map(bundle: ModelBundle, image, domain: int, style_sources: dict, gamma: float = 1.0) -> np.ndarray:
    """Per-pixel rectification weight [H, W] of a single image from target ``domain``.

    ``style_sources`` maps every other target index j to an image of domain j.
    """
    others = {j: s for j, s in style_sources.items() if j != domain}
    if not others:
        raise ValueError("uncertainty needs at least one other target domain (M >= 2)")
    x = np.asarray(image, dtype=bundle.config.dtype)[None]
    with no_grad():
        p_i = bundle.forward(x, domain)
        cross = [bundle.forward(x, j, style_source=np.asarray(s, dtype=bundle.config.dtype)[None]) for j, s in sorted(others.items())]
        return rectification_weight(p_i, cross, gamma).w.data[0]


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_uncertainty_map(bundle: ModelBundle, image, domain: int, style_sources: dict, path: str | Path, gamma: float = 1.0) -> np.ndarray:
    """Write round(255 * (1 - w)) as a binary PGM; bright pixels are uncertain."""
    w = rectification_map(bundle, image, domain, style_sources, gamma)
    gray = np.rint(255.0 * (1.0 - w)).astype(np.uint8)
    write_pgm(path, gray)
    return gray


__all__ = [
    "ConfusionMatrix",
    "DomainReport",
    "MetricsReport",
    "UnlabeledDatasetError",
    "accumulate",
    "evaluate",
    "evaluate_all",
    "export_uncertainty_map",
    "miou",
    "predict_labels",
    "read_pgm",
    "rectification_map",
    "write_pgm",
]
