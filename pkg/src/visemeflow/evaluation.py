"""Accuracy reporting, confusion matrices, and first-layer kernel inspection.

Accuracies are tracked as fractions internally and rendered as percentages
with two decimals in emitted reports.  The confusion matrix convention is
row = true class, column = predicted class.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DataError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K] int64, row = true, column = predicted
    labels: list

    @classmethod
    def from_predictions(cls, y_true, y_pred, labels):
        k = len(labels)
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise DataError(
                f"prediction count {y_pred.shape} does not match "
                f"label count {y_true.shape}"
            )
        bad = (y_true < 0) | (y_true >= k) | (y_pred < 0) | (y_pred >= k)
        if bad.any():
            raise DataError(f"class index outside [0,{k}) at position {bad.argmax()}")
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts=counts, labels=list(labels))

    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        total = self.total()
        if total == 0:
            raise DataError("confusion matrix is empty")
        return float(np.trace(self.counts)) / total

    def per_class_accuracy(self) -> dict:
        row_sums = self.counts.sum(axis=1)
        out = {}
        for i, word in enumerate(self.labels):
            out[word] = (
                float(self.counts[i, i]) / row_sums[i] if row_sums[i] else 0.0
            )
        return out


def percent(fraction: float) -> float:
    """Fraction -> percentage rounded to the two decimals reports use."""
    return round(100.0 * fraction, 2)


@dataclass
class EvalReport:
    accuracies: dict  # split name -> fraction
    per_class: dict  # word -> fraction, measured on the test split
    confusion: ConfusionMatrix
    metadata: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "accuracies": {k: self.accuracies[k] for k in sorted(self.accuracies)},
            "accuracies_percent": {
                k: percent(self.accuracies[k]) for k in sorted(self.accuracies)
            },
            "per_class_percent": {
                w: percent(self.per_class[w]) for w in self.confusion.labels
            },
            "confusion": self.confusion.counts.tolist(),
            "vocabulary": list(self.confusion.labels),
            "metadata": {k: self.metadata[k] for k in sorted(self.metadata)},
        }


def split_predictions(predict_fn, manifest, indices):
    """Run the per-video predictor over one split; returns (true, predicted)."""
    from .datasets import load_batch

    y_true = np.empty(len(indices), dtype=np.int64)
    y_pred = np.empty(len(indices), dtype=np.int64)
    for row, idx in enumerate(indices):
        videos, labels = load_batch(manifest, [idx])
        y_true[row] = labels[0]
        y_pred[row] = predict_fn(videos[0])
    return y_true, y_pred


def evaluate(predict_fn, manifest, splits, metadata=None) -> EvalReport:
    """Accuracy on every split plus a test-split confusion matrix.

    ``predict_fn`` maps one [T,1,H,W] video tensor to a class index;
    ``splits`` maps split names to record index lists and must contain
    ``test``.  Deterministic: records are visited in the given order.
    """
    if "test" not in splits:
        raise DataError("splits must include a test entry")
    accuracies = {}
    confusion = None
    for name in sorted(splits):
        indices = splits[name]
        if len(indices) == 0:
            raise DataError(f"split {name} is empty")
        y_true, y_pred = split_predictions(predict_fn, manifest, indices)
        cm = ConfusionMatrix.from_predictions(y_true, y_pred, manifest.vocabulary)
        accuracies[name] = cm.accuracy()
        if name == "test":
            confusion = cm
    return EvalReport(
        accuracies=accuracies,
        per_class=confusion.per_class_accuracy(),
        confusion=confusion,
        metadata=dict(metadata or {}),
    )


def msi_average(reports) -> float:
    """Unweighted mean test accuracy over held-out-speaker folds."""
    reports = list(reports)
    if not reports:
        raise DataError("no fold reports to average")
    return float(np.mean([r.accuracies["test"] for r in reports]))


@dataclass
class FeatureMaps:
    maps: np.ndarray  # [K, h, w], each min-max normalized to [0, 1]
    raw_std: np.ndarray  # [K] pre-normalization standard deviations


def first_layer_feature_maps(params, desc, frame, prefix="enc.") -> FeatureMaps:
    """Convolve every first-layer kernel with one frame.

    ``frame`` is [H, W] or [1, H, W].  Biases are left out so each map shows
    the kernel response alone; constant maps normalize to all zeros.
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        frame = frame[None]
    layer = desc.conv_layers[0]
    w = params[f"{prefix}conv0.w"]
    out, _ = nn.conv2d_forward(
        frame[None],
        w,
        np.zeros(w.shape[0], dtype=w.dtype),
        stride=layer.stride,
        pad=layer.pad,
    )
    maps = out[0]
    raw_std = maps.reshape(maps.shape[0], -1).std(axis=1)
    normalized = np.empty_like(maps)
    for k in range(maps.shape[0]):
        lo, hi = maps[k].min(), maps[k].max()
        normalized[k] = (maps[k] - lo) / (hi - lo) if hi > lo else 0.0
    return FeatureMaps(maps=normalized, raw_std=raw_std)


def emptiness_score(feature_maps: FeatureMaps, tau: float = 1e-3) -> float:
    """Fraction of kernels whose raw response map barely varies."""
    return float((feature_maps.raw_std < tau).mean())


# ---------------------------------------------------------------------------
# file formats

CSV_CORNER = "true\\predicted"


def emit_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([CSV_CORNER] + list(cm.labels))
        for i, word in enumerate(cm.labels):
            writer.writerow([word] + [int(v) for v in cm.counts[i]])


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != [CSV_CORNER]:
        raise DataError(f"{path} is not a confusion CSV")
    labels = rows[0][1:]
    k = len(labels)
    if len(rows) != k + 1:
        raise DataError(f"{path}: expected {k} data rows, found {len(rows) - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        if row[0] != labels[i] or len(row) != k + 1:
            raise DataError(f"{path}: malformed row {i + 1}")
        counts[i] = [int(v) for v in row[1:]]
    return ConfusionMatrix(counts=counts, labels=labels)


def emit_pgm(image, path) -> None:
    """8-bit binary PGM (P5); input values are fractions of white."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"PGM wants a 2-d image, got shape {a.shape}")
    pixels = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    """Binary PGM -> float image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM is supported, maxval {maxval}")
    pos += 1  # single whitespace byte after the header
    pixels = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float32) / 255.0


def write_feature_map_pgms(feature_maps: FeatureMaps, out_dir) -> list:
    """One kernel_NNN.pgm per map; returns the paths written."""
    import os

    paths = []
    for k in range(feature_maps.maps.shape[0]):
        path = os.path.join(out_dir, f"kernel_{k:03d}.pgm")
        emit_pgm(feature_maps.maps[k], path)
        paths.append(path)
    return paths


def write_report(report: EvalReport, path) -> None:
    """Stable-key JSON rendering of an EvalReport."""
    with open(path, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
