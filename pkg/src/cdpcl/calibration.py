"""Uncertainty and hard-weight calibration of prototype banks.

All functions here operate on plain ``numpy`` arrays: the calibration
matrices are treated as constants by the losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import GUARD_EPS, ShapeError, warn

EPS_H = 1e-4


@dataclass
class UncertaintyMatrix:
    U: np.ndarray
    momentum: float
    initialized: bool = False

    @classmethod
    def empty(cls, num_classes: int, dim: int, momentum: float) -> "UncertaintyMatrix":
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        return cls(np.ones((num_classes, dim)), momentum, False)


def difference_matrix(proto_src: np.ndarray, proto_aug: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Elementwise Manhattan gap between the two banks, zero on invalid rows."""
    if proto_src.shape != proto_aug.shape:
        raise ShapeError("difference_matrix", proto_src.shape, proto_aug.shape)
    D = np.abs(proto_src - proto_aug)
    D[~np.asarray(valid, dtype=bool)] = 0.0
    return D


def uncertainty_matrix(D: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """``1 - softmax(D)`` over the valid classes of every feature column.

    Invalid rows get the neutral weight 1. With fewer than two valid classes
    the softmax is degenerate, so the whole matrix is returned as ones.
    """
    valid = np.asarray(valid, dtype=bool)
    U = np.ones_like(D, dtype=np.float64)
    if valid.sum() < 2:
        warn("calibration_skipped")
        return U
    Dv = D[valid]
    z = Dv - Dv.max(axis=0, keepdims=True)
    e = np.exp(z)
    U[valid] = 1.0 - e / e.sum(axis=0, keepdims=True)
    return U


def update_uncertainty(state: UncertaintyMatrix, U_c: np.ndarray) -> UncertaintyMatrix:
    if U_c.shape != state.U.shape:
        raise ShapeError("update_uncertainty", state.U.shape, U_c.shape)
    if not state.initialized:
        return UncertaintyMatrix(U_c.copy(), state.momentum, True)
    m = state.momentum
    return UncertaintyMatrix(m * state.U + (1.0 - m) * U_c, m, True)


def similarity_matrix(proto_src: np.ndarray, proto_aug: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Cosine similarity ``S[i, k] = cos(src_i, aug_k)``.

    Rows and columns of invalid (or zero-norm) classes are filled so that the
    derived hard weights are neutral: 1 on the diagonal, 0 elsewhere.
    """
    if proto_src.shape != proto_aug.shape:
        raise ShapeError("similarity_matrix", proto_src.shape, proto_aug.shape)
    valid = np.asarray(valid, dtype=bool).copy()
    ns = np.linalg.norm(proto_src, axis=1)
    na = np.linalg.norm(proto_aug, axis=1)
    degenerate = valid & ((ns < GUARD_EPS) | (na < GUARD_EPS))
    if degenerate.any():
        warn("similarity_zero_norm", int(degenerate.sum()))
        valid &= ~degenerate
    C = len(valid)
    S = np.eye(C)
    if valid.any():
        idx = np.flatnonzero(valid)
        a = proto_src[idx] / ns[idx, None]
        b = proto_aug[idx] / na[idx, None]
        S[np.ix_(idx, idx)] = np.clip(a @ b.T, -1.0, 1.0)
    return S


def hard_weight_matrix(S: np.ndarray, eps_h: float = EPS_H) -> np.ndarray:
    """``|1 - I - S|`` clamped below by ``eps_h``."""
    C = S.shape[0]
    if S.shape != (C, C):
        raise ShapeError("hard_weight_matrix", S.shape)
    H = np.abs(np.ones((C, C)) - np.eye(C) - S)
    return np.maximum(H, eps_h)
