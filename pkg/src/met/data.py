"""Image datasets on disk and the seeded synthetic grating task."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray        # N x 3 x H x W, float
    labels: np.ndarray        # N, int
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) < 1:
            raise DataError("empty dataset")
        check_labels(self.labels, self.num_classes)

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def check_labels(labels: np.ndarray, num_classes: int) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}); got range "
                        f"[{labels.min()}, {labels.max()}]")


def class_pattern(c: int, num_classes: int, size: int, phase: float) -> np.ndarray:
    """Oriented sinusoidal grating; orientation and frequency both vary with class."""
    theta = math.pi * c / num_classes
    freq = 2.0 + 1.5 * (c % 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)


def generate_synthetic(seed: int, num_classes: int, per_class: int, image_size: int,
                       noise: float = 0.3, split: int = 0) -> Dataset:
    """Class-specific gratings plus iid Gaussian pixel noise, shuffled.

    The class patterns depend on ``seed`` only; ``split`` selects an
    independent noise/shuffle stream so train and test share their classes.
    """
    if num_classes < 2:
        raise DataError("need at least two classes")
    phases = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi, size=(num_classes, 3))
    rng = np.random.default_rng([seed, split])
    protos = np.stack([
        np.stack([class_pattern(c, num_classes, image_size, phases[c, ch]) for ch in range(3)])
        for c in range(num_classes)
    ])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = protos[labels] + noise * rng.standard_normal((len(labels), 3, image_size, image_size))
    order = rng.permutation(len(labels))
    return Dataset(images[order].astype(np.float32), labels[order], num_classes)


def write_dataset(ds: Dataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    n, c, h, w = ds.images.shape
    ds.images.astype("<f4").tofile(os.path.join(directory, "images.bin"))
    ds.labels.astype("<u4").tofile(os.path.join(directory, "labels.bin"))
    manifest = {"num_samples": n, "channels": c, "height": h, "width": w,
                "num_classes": ds.num_classes, "images": "images.bin", "labels": "labels.bin"}
    with open(os.path.join(directory, "data.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_dataset(directory: str) -> Dataset:
    with open(os.path.join(directory, "data.json")) as f:
        man = json.load(f)
    n, c, h, w = man["num_samples"], man["channels"], man["height"], man["width"]
    if c != 3:
        raise DataError(f"expected 3 channels, manifest says {c}")
    img_path = os.path.join(directory, man["images"])
    lab_path = os.path.join(directory, man["labels"])
    for path, want in ((img_path, n * c * h * w * 4), (lab_path, n * 4)):
        if not os.path.exists(path):
            raise DataError(f"missing dataset file {path}")
        got = os.path.getsize(path)
        if got != want:
            raise DataError(f"{path}: expected {want} bytes, found {got}")
    images = np.fromfile(img_path, dtype="<f4").reshape(n, c, h, w)
    labels = np.fromfile(lab_path, dtype="<u4").astype(np.int64)
    return Dataset(images, labels, int(man["num_classes"]))


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    x = train.images.reshape(len(train), -1).astype(np.float64)
    cents = np.stack([x[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    y = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((y[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((d.argmin(1) == test.labels).mean())
