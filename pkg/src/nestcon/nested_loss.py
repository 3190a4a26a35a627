"""Symmetric InfoNCE at lesion and patient level, fusion, and their gradients.

Similarities are cosines, so every gradient passes through the row
normalization exactly (quotient rule), not a stop-gradient approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import as_matrix, log_softmax_rows, normalize_rows


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lam: float = 0.9

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must be in [0, 1]")


@dataclass
class FusionParams:
    weight: np.ndarray  # (2D, D)
    bias: np.ndarray  # (D,)

    @classmethod
    def init(cls, dim, rng):
        bound = np.sqrt(6.0 / (3 * dim))
        return cls(rng.uniform(-bound, bound, size=(2 * dim, dim)), np.zeros(dim))

    @property
    def dim(self):
        return self.bias.shape[0]

    def copy(self):
        return FusionParams(self.weight.copy(), self.bias.copy())


@dataclass
class PatientBatchTensors:
    W: list  # per patient (n_p, D) image embeddings
    H: list  # per patient (n_p, D) lesion-metadata embeddings
    X: np.ndarray  # (B, D) patient-metadata embeddings

    def __post_init__(self):
        if len(self.W) != len(self.H) or len(self.W) != self.X.shape[0]:
            raise ShapeError("W, H and X must cover the same patients")
        for w, h in zip(self.W, self.H):
            if w.shape != h.shape or w.shape[0] < 1:
                raise ShapeError(f"per-patient W/H shapes differ or are empty: {w.shape} vs {h.shape}")


def _normalized_backward(U, norms, dU_hat):
    """Pull a gradient on row-normalized ``U_hat`` back onto raw ``U``."""
    radial = np.einsum("ij,ij->i", U, dU_hat)[:, None]
    return dU_hat / norms[:, None] - U * radial / norms[:, None] ** 3


def info_nce_symmetric(W, H, tau):
    """Mean of the image->meta and meta->image InfoNCE losses over ``n`` aligned pairs.

    Returns ``(loss, dW, dH)``.
    """
    W = as_matrix(W, "W")
    H = as_matrix(H, "H")
    if W.shape != H.shape:
        raise ShapeError(f"W {W.shape} and H {H.shape} must have the same shape")
    n = W.shape[0]
    if n < 1:
        raise ShapeError("need at least one pair")
    Wn, wnorm = normalize_rows(W)
    Hn, hnorm = normalize_rows(H)
    S = (Wn @ Hn.T) / tau
    log_row = log_softmax_rows(S)
    log_col = log_softmax_rows(S.T)
    diag = np.arange(n)
    loss = -(log_row[diag, diag].sum() + log_col[diag, diag].sum()) / (2 * n)
    eye = np.eye(n)
    dS = ((np.exp(log_row) - eye) + (np.exp(log_col) - eye).T) / (2 * n)
    dWn = dS @ Hn / tau
    dHn = dS.T @ Wn / tau
    return float(loss), _normalized_backward(W, wnorm, dWn), _normalized_backward(H, hnorm, dHn)


def inner_lesion_loss(batch: PatientBatchTensors, tau):
    """Average over patients of within-patient InfoNCE; negatives never cross patients.

    Returns ``(loss, dW_list, dH_list)`` with gradients of the averaged loss.
    """
    B = len(batch.W)
    if B < 1:
        raise ShapeError("empty batch")
    total = 0.0
    dW, dH = [], []
    for w, h in zip(batch.W, batch.H):
        loss, gw, gh = info_nce_symmetric(w, h, tau)
        total += loss
        dW.append(gw / B)
        dH.append(gh / B)
    return total / B, dW, dH


def fuse_patient(W_p, H_p, fusion: FusionParams):
    """``z = bias + weight^T mean_l [w_l, h_l]``; returns ``(z, pooled)``."""
    W_p = as_matrix(W_p, "W_p")
    H_p = as_matrix(H_p, "H_p")
    if W_p.shape[0] != H_p.shape[0]:
        raise ShapeError("W_p and H_p need the same number of lesions")
    pooled = np.concatenate([W_p, H_p], axis=1).mean(axis=0)
    if pooled.shape[0] != fusion.weight.shape[0]:
        raise ShapeError(f"concatenated width {pooled.shape[0]} != fusion input {fusion.weight.shape[0]}")
    return fusion.bias + pooled @ fusion.weight, pooled


def fuse_backward(pooled, n_lesions, dz, fusion: FusionParams):
    """Gradients of fuse_patient: ``(dweight, dbias, dW_p, dH_p)``."""
    D = fusion.dim
    dweight = np.outer(pooled, dz)
    dconcat = fusion.weight @ dz / n_lesions
    dW = np.broadcast_to(dconcat[:D], (n_lesions, D)).copy()
    dH = np.broadcast_to(dconcat[D:], (n_lesions, D)).copy()
    return dweight, dz.copy(), dW, dH


def outer_patient_loss(Z, X, tau):
    return info_nce_symmetric(Z, X, tau)


@dataclass
class TotalLossResult:
    total: float
    inner: float
    outer: float
    dW: list
    dH: list
    dX: np.ndarray
    dweight: np.ndarray
    dbias: np.ndarray
    Z: np.ndarray


def total_loss(batch: PatientBatchTensors, cfg: LossConfig, fusion: FusionParams) -> TotalLossResult:
    """``lam * inner + (1 - lam) * outer`` with gradients summed over both paths into W, H."""
    lam = cfg.lam
    inner, dW_in, dH_in = inner_lesion_loss(batch, cfg.tau)
    fused = [fuse_patient(w, h, fusion) for w, h in zip(batch.W, batch.H)]
    Z = np.stack([z for z, _ in fused])
    outer, dZ, dX = outer_patient_loss(Z, batch.X, cfg.tau)
    dweight = np.zeros_like(fusion.weight)
    dbias = np.zeros_like(fusion.bias)
    dW, dH = [], []
    for p, (w, (_, pooled)) in enumerate(zip(batch.W, fused)):
        gw_f, gb_f, gW, gH = fuse_backward(pooled, w.shape[0], (1.0 - lam) * dZ[p], fusion)
        dweight += gw_f
        dbias += gb_f
        dW.append(lam * dW_in[p] + gW)
        dH.append(lam * dH_in[p] + gH)
    total = lam * inner + (1.0 - lam) * outer
    return TotalLossResult(total, inner, outer, dW, dH, (1.0 - lam) * dX, dweight, dbias, Z)


def flat_loss(W, G, tau):
    """Single-level InfoNCE over all lesions of a batch; negatives cross patients."""
    return info_nce_symmetric(W, G, tau)
