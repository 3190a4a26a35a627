"""Float64 primitives shared by the losses, encoders and retrieval code."""

import numpy as np

from .errors import DegenerateVectorError, ShapeError

DEFAULT_EPS = 1e-9


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(v, name="vector"):
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {x.shape}")
    return x


def l2_normalize(v, eps=DEFAULT_EPS):
    v = as_vector(v)
    norm = np.linalg.norm(v)
    if not norm >= eps:
        raise DegenerateVectorError(f"vector norm {norm:.3g} below eps={eps:g}")
    return v / norm


def row_norms(M, eps=DEFAULT_EPS):
    """Euclidean norm of each row; raises on the first row shorter than ``eps``."""
    M = as_matrix(M)
    norms = np.sqrt(np.einsum("ij,ij->i", M, M))
    bad = np.flatnonzero(~(norms >= eps))
    if bad.size:
        raise DegenerateVectorError(f"row {bad[0]} has norm {norms[bad[0]]:.3g}", index=int(bad[0]))
    return norms


def normalize_rows(M, eps=DEFAULT_EPS):
    M = as_matrix(M)
    norms = row_norms(M, eps)
    return M / norms[:, None], norms


def cosine_sim(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    c = float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(1.0, max(-1.0, c))


def pairwise_cosine(A, B):
    """Cosine similarity of every row of ``A`` against every row of ``B`` (n x m)."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"column mismatch: {A.shape[1]} vs {B.shape[1]}")
    An, _ = normalize_rows(A)
    Bn, _ = normalize_rows(B)
    return np.clip(An @ Bn.T, -1.0, 1.0)


def softmax_rows(M):
    M = as_matrix(M)
    shifted = M - M.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(M):
    M = as_matrix(M)
    shifted = M - M.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_sum_exp_row(v):
    v = as_vector(v)
    if v.size == 0:
        raise ShapeError("log_sum_exp of an empty vector")
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def check_finite(a, what="array"):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a
