"""Readers and writers for the CSV/JSON files exchanged between stages."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .propagation import ScoreMatrix
from .seeder import FeatureDataset


def _fmt(x) -> str:
    return repr(float(x))


def read_semantic_csv(path) -> dict:
    """``class_id,v0,...`` rows -> ordered ``{class_id: vector}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "class_id" or len(header) < 2:
            raise InvalidInputError(f"{path}: header must be class_id,v0,...")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidInputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if row[0] in out:
                raise InvalidInputError(f"{path}:{lineno}: duplicate class id {row[0]!r}")
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out


def write_semantic_csv(path, vectors: dict):
    vectors = {k: np.asarray(v, dtype=float) for k, v in vectors.items()}
    d = len(next(iter(vectors.values())))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id"] + [f"v{i}" for i in range(d)])
        for cid, v in vectors.items():
            w.writerow([cid] + [_fmt(x) for x in v])


def read_split_json(path) -> tuple:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return [str(c) for c in doc["seen"]], [str(c) for c in doc["unseen"]]
    except (KeyError, TypeError):
        raise InvalidInputError(f"{path}: split file must be an object with 'seen' and 'unseen' lists") from None


def write_split_json(path, seen, unseen):
    Path(path).write_text(json.dumps({"seen": list(seen), "unseen": list(unseen)}, indent=2) + "\n",
                          encoding="utf-8")


def read_features_csv(path) -> FeatureDataset:
    """``image_id,label,f0,...`` rows. An empty label becomes ``None``; all-empty means no labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["image_id", "label"] or len(header) < 3:
            raise InvalidInputError(f"{path}: header must be image_id,label,f0,...")
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidInputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            labels.append(row[1] or None)
            try:
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
    X = np.array(rows, dtype=float).reshape(len(rows), len(header) - 2)
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"{path}: duplicate image ids")
    if all(l is None for l in labels):
        labels = None
    return FeatureDataset(ids, X, labels)


def write_features_csv(path, data: FeatureDataset):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label"] + [f"f{i}" for i in range(data.dim)])
        labels = data.labels or (None,) * len(data)
        for iid, lab, x in zip(data.image_ids, labels, data.features):
            w.writerow([iid, "" if lab is None else lab] + [_fmt(v) for v in x])


def write_scores_csv(path, scores: ScoreMatrix):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id"] + list(scores.class_order))
        for iid, row in zip(scores.image_ids, scores.values):
            w.writerow([iid] + [_fmt(v) for v in row])


def read_scores_csv(path, n_seen: int) -> ScoreMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "image_id":
            raise InvalidInputError(f"{path}: header must be image_id,<class ids...>")
        ids, rows = [], []
        for row in reader:
            if row:
                ids.append(row[0])
                rows.append([float(v) for v in row[1:]])
    values = np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
    return ScoreMatrix(values, ids, header[1:], n_seen)


def write_matrix_csv(path, matrix, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id"] + list(labels))
        for lab, row in zip(labels, np.asarray(matrix)):
            w.writerow([lab] + [_fmt(v) for v in row])


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment. Values stay strings."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out
