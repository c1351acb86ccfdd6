"""Segmentation cross-entropy and the prototype contrastive objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .protobank import IGNORE_INDEX, ClassFeatures, check_labels

ABLATIONS = ("baseline", "pcl", "upcl", "hpcl", "cdpcl")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.8
    tau_u: float = 0.8
    tau_h: float = 0.8
    lambda1: float = 0.1
    lambda2: float = 0.01
    include_positive_in_denominator: bool = True
    normalize_features: bool = True

    def __post_init__(self):
        for name in ("tau", "tau_u", "tau_h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("lambda1", "lambda2"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def seg_loss(logits, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean pixel cross-entropy over non-ignored pixels of B x C x H x W logits."""
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels)
    B, C, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise nx.ShapeError("seg_loss", logits.shape, labels.shape)
    check_labels(labels, C, ignore_index)
    valid = labels != ignore_index
    n = int(valid.sum())
    if n == 0:
        nx.warn("seg_all_ignored")
        return Tensor(0.0)
    onehot = (labels[:, None, :, :] == np.arange(C)[None, :, None, None]).astype(np.float64)
    logp = nx.log_softmax(logits, axis=1)
    return -(logp * Tensor(onehot)).sum() / float(n)


def active_classes(present: np.ndarray, initialized: np.ndarray | None = None) -> np.ndarray:
    present = np.asarray(present, dtype=bool)
    if initialized is None:
        return present
    return present & np.asarray(initialized, dtype=bool)


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    norm = np.sqrt((p * p).sum(axis=1, keepdims=True))
    clamped = norm < nx.GUARD_EPS
    if clamped.any():
        nx.warn("normalize_clamped", int(clamped.sum()))
    return p / np.where(clamped, nx.GUARD_EPS, norm)


def _prototype_contrast(
    feats: Tensor,
    prototypes: np.ndarray,
    active: np.ndarray,
    tau: float,
    cfg: LossConfig,
    scale: np.ndarray | None = None,
) -> Tensor:
    """Sum over active anchors of ``lse(denominator logits) - positive logit``.

    Row ``i`` of the logit matrix is anchored at class feature ``i``; column
    ``k`` is prototype ``k``. ``scale[i, k]`` multiplies prototype ``k`` when it
    is compared against anchor ``i``.
    """
    idx = np.flatnonzero(active)
    A = idx.size
    if A == 0:
        nx.warn("contrast_empty_active_set")
        return Tensor(0.0)
    if A == 1 and not cfg.include_positive_in_denominator:
        nx.warn("contrast_single_class_skipped")
        return Tensor(0.0)

    f = feats[idx]
    p = np.asarray(prototypes, dtype=np.float64)[idx]
    if cfg.normalize_features:
        f = nx.l2_normalize(f, axis=1)
        p = _normalize_rows(p)
    logits = f @ Tensor(p.T)
    if scale is not None:
        logits = logits * Tensor(scale[np.ix_(idx, idx)])
    logits = logits / tau

    diag = np.arange(A)
    positive = logits[diag, diag]
    if cfg.include_positive_in_denominator:
        denom = logits
    else:
        cols = np.array([[k for k in range(A) if k != i] for i in range(A)], dtype=np.intp)
        denom = logits[np.repeat(diag[:, None], A - 1, axis=1), cols]
    shift = Tensor(denom.data.max(axis=1, keepdims=True))
    lse = nx.log(nx.exp(denom - shift).sum(axis=1)) + Tensor(shift.data[:, 0])
    return (lse - positive).sum()


def pcl_loss(
    prototypes: np.ndarray,
    class_feats: ClassFeatures,
    cfg: LossConfig,
    initialized: np.ndarray | None = None,
    tau: float | None = None,
) -> Tensor:
    active = active_classes(class_feats.present, initialized)
    return _prototype_contrast(class_feats.features, prototypes, active, cfg.tau if tau is None else tau, cfg)


def upcl_loss(
    prototypes_src: np.ndarray,
    U: np.ndarray,
    class_feats: ClassFeatures,
    cfg: LossConfig,
    initialized: np.ndarray | None = None,
) -> Tensor:
    weighted = np.asarray(prototypes_src) * np.asarray(U)
    active = active_classes(class_feats.present, initialized)
    return _prototype_contrast(class_feats.features, weighted, active, cfg.tau_u, cfg)


def hard_scale(H: np.ndarray) -> np.ndarray:
    """Per-pair prototype multipliers: ``H[i, i]`` for positives, ``1 / H[i, k]`` for negatives."""
    C = H.shape[0]
    scale = 1.0 / H
    scale[np.diag_indices(C)] = np.diag(H)
    return scale


def hpcl_loss(
    prototypes_aug: np.ndarray,
    H: np.ndarray,
    class_feats: ClassFeatures,
    cfg: LossConfig,
    initialized: np.ndarray | None = None,
) -> Tensor:
    active = active_classes(class_feats.present, initialized)
    return _prototype_contrast(
        class_feats.features, prototypes_aug, active, cfg.tau_h, cfg, scale=hard_scale(np.asarray(H))
    )


def loss_weights(cfg: LossConfig, mode: str = "cdpcl") -> tuple[float, float]:
    """Weights of the (uncertainty or plain) contrastive term and the hard term."""
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATIONS}")
    w1 = cfg.lambda1 if mode in ("pcl", "upcl", "cdpcl") else 0.0
    w2 = cfg.lambda2 if mode in ("hpcl", "cdpcl") else 0.0
    return w1, w2


def total_loss(l_seg, l_upcl, l_hpcl, cfg: LossConfig, mode: str = "cdpcl") -> Tensor:
    """``L_seg + lambda1 * L_upcl + lambda2 * L_hpcl``; zero-weight terms are left off the graph."""
    w1, w2 = loss_weights(cfg, mode)
    parts = [("l_seg", l_seg, 1.0), ("l_upcl", l_upcl, w1), ("l_hpcl", l_hpcl, w2)]
    total = None
    for name, term, w in parts:
        if w == 0.0 or term is None:
            continue
        term = nx.as_tensor(term)
        if not math.isfinite(term.item()):
            raise NonFiniteLoss(f"{name} is not finite: {term.item()}")
        weighted = term if w == 1.0 else term * w
        total = weighted if total is None else total + weighted
    return total if total is not None else Tensor(0.0)
