"""Deterministic on-disk formats for datasets, models, and reports.

Features are raw little-endian float32, row major, no header; labels and
the poison mask are one byte per sample. A JSON manifest (UTF-8, sorted
keys) carries shapes and provenance, so every artifact diffs cleanly and
round-trips bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .attacks import LabeledDataset
from .nncore import MlpModel

MANIFEST_NAME = "manifest.json"
FEATURE_FILE = "features.f32"
LABEL_FILE = "labels.u8"
MASK_FILE = "mask.u8"
MODEL_MANIFEST = "model.json"
MODEL_BLOB = "params.f64"


class StorageError(OSError):
    pass


def quantize_features(features: np.ndarray) -> np.ndarray:
    """Snap float64 features onto the float32 grid used on disk."""
    return np.asarray(features, dtype=np.float32).astype(np.float64)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StorageError(f"missing manifest {path}") from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f"corrupt manifest {path}: {exc}") from exc


def save_dataset(dataset: LabeledDataset, out_dir, provenance: dict | None = None) -> Path:
    """Write manifest + binary files; returns the directory path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(dataset.features, dtype="<f4")
    (out / FEATURE_FILE).write_bytes(feats.tobytes())
    manifest = {
        "version": 1,
        "n": int(len(dataset)),
        "d": int(dataset.dim),
        "k": int(dataset.n_classes),
        "has_labels": dataset.labels is not None,
        "has_mask": dataset.poison_mask is not None,
        "target_class": None if dataset.target_class is None else int(dataset.target_class),
        "feature_file": FEATURE_FILE,
        "label_file": LABEL_FILE if dataset.labels is not None else None,
        "mask_file": MASK_FILE if dataset.poison_mask is not None else None,
        "provenance": provenance or {},
    }
    if dataset.labels is not None:
        if dataset.labels.size and dataset.labels.max() > 255:
            raise StorageError("labels exceed one byte")
        (out / LABEL_FILE).write_bytes(dataset.labels.astype(np.uint8).tobytes())
    if dataset.poison_mask is not None:
        (out / MASK_FILE).write_bytes(dataset.poison_mask.astype(np.uint8).tobytes())
    _write_json(out / MANIFEST_NAME, manifest)
    return out


def load_dataset(in_dir, drop_mask: bool = False) -> LabeledDataset:
    """Read a dataset directory, validating byte lengths against the manifest."""
    src = Path(in_dir)
    m = _read_json(src / MANIFEST_NAME)
    n, d = int(m["n"]), int(m["d"])
    raw = (src / m["feature_file"]).read_bytes()
    if len(raw) != n * d * 4:
        raise StorageError(f"feature file holds {len(raw)} bytes, expected {n * d * 4}")
    feats = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float64)
    labels = mask = None
    if m["has_labels"]:
        raw = (src / m["label_file"]).read_bytes()
        if len(raw) != n:
            raise StorageError("label file length mismatch")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if m["has_mask"] and not drop_mask:
        raw = (src / m["mask_file"]).read_bytes()
        if len(raw) != n:
            raise StorageError("mask file length mismatch")
        mask = np.frombuffer(raw, dtype=np.uint8).astype(bool)
    return LabeledDataset(feats, labels, mask, m.get("target_class"), int(m["k"]))


def dataset_provenance(in_dir) -> dict:
    return _read_json(Path(in_dir) / MANIFEST_NAME).get("provenance", {})


def save_model(model: MlpModel, out_dir, provenance: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chunks = []
    for w, b in zip(model.weights, model.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    (out / MODEL_BLOB).write_bytes(b"".join(chunks))
    _write_json(out / MODEL_MANIFEST, {
        "version": 1,
        "layer_dims": [int(x) for x in model.layer_dims],
        "blob": MODEL_BLOB,
        "provenance": provenance or {},
    })
    return out


def load_model(in_dir) -> MlpModel:
    src = Path(in_dir)
    m = _read_json(src / MODEL_MANIFEST)
    dims = [int(x) for x in m["layer_dims"]]
    raw = (src / m["blob"]).read_bytes()
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:])) * 8
    if len(raw) != expected:
        raise StorageError(f"model blob holds {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8")
    weights, biases, pos = [], [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(flat[pos:pos + b].copy())
        pos += b
    return MlpModel(dims, weights, biases)


def format_float(x: float) -> str:
    """Shortest exact decimal form, reused everywhere reports print floats."""
    return repr(float(x))


def write_detection_report(out_dir, report, config_echo: dict,
                           poison_mask=None, n_bins: int = 30) -> Path:
    """Write flagged indices, per-sample losses, a JSON summary, and a
    histogram of losses. TPR/FPR appear only when a mask is supplied."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flagged_mask = report.flagged_mask
    (out / "flagged.txt").write_text(
        "".join(f"{i}\n" for i in report.flagged.tolist()), encoding="utf-8")
    lines = ["index,loss,flagged"]
    for i, loss in enumerate(report.losses):
        lines.append(f"{i},{format_float(loss)},{int(flagged_mask[i])}")
    (out / "losses.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary = {
        "config_echo": config_echo,
        "gaussian_mu": report.fit.mean,
        "gaussian_var": report.fit.variance,
        "n_flagged": int(len(report.flagged)),
        "n_samples": int(report.losses.shape[0]),
    }
    if poison_mask is not None:
        from .evalkit import compute_metrics
        m = compute_metrics(flagged_mask, poison_mask)
        summary["tpr"] = m.tpr
        summary["fpr"] = m.fpr
    _write_json(out / "summary.json", summary)

    lo, hi = float(report.losses.min()), float(report.losses.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)
    header = "bin_left,bin_right,count_clean,count_poison,count_total" \
        if poison_mask is not None else "bin_left,bin_right,count_total"
    rows = [header]
    total, _ = np.histogram(report.losses, bins=edges)
    if poison_mask is not None:
        mask = np.asarray(poison_mask, dtype=bool)
        clean, _ = np.histogram(report.losses[~mask], bins=edges)
        poison, _ = np.histogram(report.losses[mask], bins=edges)
        for i in range(n_bins):
            rows.append(f"{format_float(edges[i])},{format_float(edges[i + 1])},"
                        f"{clean[i]},{poison[i]},{total[i]}")
    else:
        for i in range(n_bins):
            rows.append(f"{format_float(edges[i])},{format_float(edges[i + 1])},{total[i]}")
    (out / "histogram.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out
