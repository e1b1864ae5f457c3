"""Synthetic datasets and a small deterministic MLP trainer.

These provide networks with real decision boundaries for the attack and
conditioning experiments; nothing here aims at competitive accuracy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergedError
from .network import Network, classify, dense_mlp, make_activation
from .tensor import make_rng

CENTER_RADIUS = 4.0


@dataclass
class Dataset:
    features: np.ndarray    # (n_samples, dim)
    labels: np.ndarray      # (n_samples,) int
    class_count: int
    split: np.ndarray       # (n_samples,) of "train" / "test"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        if self.features.ndim != 2:
            raise InvalidArgumentError("features must be a (samples, dim) array")
        n = len(self.features)
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise InvalidArgumentError("labels and split need one entry per sample")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidArgumentError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, split: str | None) -> "Dataset":
        if split in (None, "all"):
            return self
        mask = self.split == split
        return Dataset(self.features[mask], self.labels[mask], self.class_count, self.split[mask])


def simplex_centers(class_count: int, dim: int) -> np.ndarray:
    """Vertices of a regular simplex with circumradius ``CENTER_RADIUS``,
    embedded in the first ``class_count - 1`` coordinates."""
    if class_count < 1:
        raise InvalidArgumentError("class_count must be positive")
    if dim < class_count - 1:
        raise InvalidArgumentError(
            f"dim {dim} too small for {class_count} separated centers (need {class_count - 1})")
    k = class_count
    centers = np.zeros((k, dim))
    if k == 1:
        return centers
    # Helmert basis of the sum-zero subspace of R^k.
    for j in range(1, k):
        h = np.zeros(k)
        h[:j] = 1.0
        h[j] = -float(j)
        centers[:, j - 1] = h / math.sqrt(j * (j + 1))
    return CENTER_RADIUS * centers / math.sqrt(1.0 - 1.0 / k)


def _test_split(labels, test_fraction):
    if not 0.0 <= test_fraction < 1.0:
        raise InvalidArgumentError("test_fraction must lie in [0, 1)")
    split = np.array(["train"] * len(labels), dtype=object)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_test = int(round(len(idx) * test_fraction))
        if n_test:
            split[idx[-n_test:]] = "test"
    return split


def make_blobs(n_per_class: int, class_count: int, dim: int, spread: float, seed: int,
               test_fraction: float = 0.0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, around simplex vertices.

    Within each class the last ``test_fraction`` of samples are tagged "test".
    """
    if n_per_class < 1 or class_count < 1 or dim < 1:
        raise InvalidArgumentError("n_per_class, class_count and dim must be positive")
    if spread < 0:
        raise InvalidArgumentError("spread must be non-negative")
    centers = simplex_centers(class_count, dim)
    rng = make_rng(seed)
    feats = np.concatenate([centers[c] + spread * rng.standard_normal((n_per_class, dim))
                            for c in range(class_count)])
    labels = np.repeat(np.arange(class_count), n_per_class)
    return Dataset(feats, labels, class_count, _test_split(labels, test_fraction))


def make_two_spirals(n: int, noise: float, seed: int, turns: float = 1.5,
                     test_fraction: float = 0.0) -> Dataset:
    """Two interleaved planar spirals; class 1 is class 0 rotated by pi."""
    if n < 2:
        raise InvalidArgumentError("n must be at least 2")
    if noise < 0:
        raise InvalidArgumentError("noise must be non-negative")
    rng = make_rng(seed)
    n0 = n - n // 2
    parts = []
    for c, count in enumerate((n0, n // 2)):
        t = np.sqrt(rng.uniform(0.0, 1.0, count))
        phi = 2.0 * math.pi * turns * t + c * math.pi
        pts = np.stack([t * np.cos(phi), t * np.sin(phi)], axis=1)
        parts.append(pts + noise * rng.standard_normal((count, 2)))
    labels = np.repeat([0, 1], [n0, n // 2])
    return Dataset(np.concatenate(parts), labels, 2, _test_split(labels, test_fraction))


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["split", "label"])
        for x, s, y in zip(ds.features, ds.split, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [s, int(y)])


def load_dataset(path, class_count: int | None = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidArgumentError(f"{path}: empty dataset file")
    header, body = rows[0], rows[1:]
    if len(header) < 2 or header[-1] != "label":
        raise InvalidArgumentError(f"{path}: header must end with a 'label' column")
    has_split = header[-2] == "split"
    n_feat = len(header) - (2 if has_split else 1)
    feats, labels, split = [], [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InvalidArgumentError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:n_feat]])
            labels.append(int(row[-1]))
        except ValueError as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
        split.append(row[-2] if has_split else "train")
    feats = np.array(feats, dtype=np.float64).reshape(len(body), n_feat)
    if not np.all(np.isfinite(feats)):
        raise InvalidArgumentError(f"{path}: non-finite feature value")
    k = class_count if class_count is not None else (max(labels) + 1 if labels else 1)
    return Dataset(feats, np.array(labels, dtype=np.int64), k, np.array(split, dtype=object))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_mlp(layer_widths: Sequence[int], activation: str, dataset: Dataset, epochs: int,
              lr: float, seed: int, batch_size: int = 32, alpha: float = 0.1) -> Network:
    """Mini-batch gradient descent on softmax cross-entropy.

    ``layer_widths`` runs from the input dimension to the class count. Only
    "train" samples are used. Batches come from one seeded permutation that is
    reused every epoch, so the result is bit-reproducible for a given seed.
    """
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2 or min(widths) < 1:
        raise InvalidArgumentError("layer_widths needs at least input and output widths")
    train = dataset.subset("train")
    if len(train) == 0:
        raise InvalidArgumentError("dataset has no training samples")
    if widths[0] != train.dim or widths[-1] != dataset.class_count:
        raise InvalidArgumentError(
            f"widths {widths} do not match dim {train.dim} and {dataset.class_count} classes")
    act = make_activation(activation, alpha)
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, fan_out))

    X, Y = train.features, train.labels
    order = rng.permutation(len(X))
    X, Y = X[order], Y[order]
    onehot = np.eye(dataset.class_count)[Y]
    n_layers = len(weights)

    # Divergence is detected below, so silence numpy's overflow chatter.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            for start in range(0, len(X), batch_size):
                xb, tb = X[start:start + batch_size], onehot[start:start + batch_size]
                hs, zs = [xb], []
                for i, (w, b) in enumerate(zip(weights, biases)):
                    z = hs[-1] @ w.T + b
                    zs.append(z)
                    hs.append(act.f(z) if i < n_layers - 1 else z)
                p = _softmax(hs[-1])
                loss = -np.mean(np.sum(tb * np.log(np.maximum(p, 1e-300)), axis=1))
                if not np.isfinite(loss) or not np.all(np.isfinite(hs[-1])):
                    raise TrainingDivergedError(
                        f"loss became non-finite in epoch {epoch}; try a lower learning rate")
                g = (p - tb) / len(xb)
                for i in range(n_layers - 1, -1, -1):
                    gw = g.T @ hs[i]
                    gb = g.sum(axis=0)
                    if i > 0:
                        g = (g @ weights[i]) * act.df(zs[i - 1])
                    weights[i] = weights[i] - lr * gw
                    biases[i] = biases[i] - lr * gb
    return dense_mlp(weights, biases, activation, alpha)


def accuracy(net: Network, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    hits = sum(classify(net, x) == y for x, y in zip(dataset.features, dataset.labels))
    return hits / len(dataset)
