"""Class-wise feature pooling and EMA prototype banks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, Tensor, as_tensor, matmul, reshape, transpose

IGNORE_INDEX = 255


class LabelError(ValueError):
    pass


@dataclass
class ClassFeatures:
    """Masked-average feature per class plus the classes actually seen.

    ``features`` stays a :class:`Tensor` so losses can backpropagate into the
    encoder through the pooling.
    """

    features: Tensor
    present: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.features.data

    @property
    def num_classes(self) -> int:
        return len(self.present)


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    initialized: np.ndarray
    momentum: float

    @classmethod
    def empty(cls, num_classes: int, dim: int, momentum: float) -> "PrototypeBank":
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool), momentum)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.initialized.copy(), self.momentum)


def downsample_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour label downsampling; each cell takes its top-left pixel."""
    labels = np.asarray(labels)
    B, H, W = labels.shape
    if h <= 0 or w <= 0 or H % h or W % w:
        raise ShapeError("downsample_labels", labels.shape, (h, w))
    return labels[:, :: H // h, :: W // w].copy()


def check_labels(labels: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> None:
    bad = (labels >= num_classes) & (labels != ignore_index) | (labels < 0)
    if bad.any():
        raise LabelError(f"label value {int(labels[bad].flat[0])} outside [0, {num_classes}) and != {ignore_index}")


def pool_class_features(
    features,
    labels: np.ndarray,
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> ClassFeatures:
    features = as_tensor(features)
    if features.ndim != 4:
        raise ShapeError("pool_class_features", features.shape)
    B, N, h, w = features.shape
    labels = np.asarray(labels)
    if labels.ndim != 3 or labels.shape[0] != B:
        raise ShapeError("pool_class_features", features.shape, labels.shape)
    check_labels(labels, num_classes, ignore_index)
    small = downsample_labels(labels, h, w).reshape(-1)

    # (C, B*h*w) averaging matrix; ignored pixels get an all-zero column
    onehot = (small[None, :] == np.arange(num_classes)[:, None]).astype(np.float64)
    counts = onehot.sum(axis=1)
    present = counts > 0
    weights = onehot / np.where(present, counts, 1.0)[:, None]

    flat = reshape(transpose(features, (0, 2, 3, 1)), (B * h * w, N))
    return ClassFeatures(matmul(Tensor(weights), flat), present)


def update_bank(bank: PrototypeBank, cf: ClassFeatures | np.ndarray, present: np.ndarray | None = None) -> PrototypeBank:
    """EMA update for present classes; a class seen for the first time is copied in."""
    if isinstance(cf, ClassFeatures):
        values, present = cf.values, cf.present
    else:
        values = np.asarray(cf, dtype=np.float64)
    if values.shape != bank.prototypes.shape or present is None or len(present) != len(bank.initialized):
        raise ShapeError("update_bank", bank.prototypes.shape, values.shape)
    m = bank.momentum
    protos = bank.prototypes.copy()
    init = bank.initialized.copy()
    blend = present & init
    fresh = present & ~init
    protos[blend] = m * protos[blend] + (1.0 - m) * values[blend]
    protos[fresh] = values[fresh]
    init |= present
    return PrototypeBank(protos, init, m)
