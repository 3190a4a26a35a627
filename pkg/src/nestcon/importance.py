"""Feature importance from tabular-encoder self-attention maps.

For each attention matrix the diagonal is masked and every row renormalized
to sum to one; a feature's score is the mean attention it receives from the
other ``T - 1`` tokens. Scores are averaged over records and normalized to
sum to one. The encoder has no class token, so nothing is discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRowError, ShapeError
from .iohelpers import atomic_write_text
from .model import DatasetArrays


@dataclass
class ImportanceReport:
    importance: np.ndarray
    names: list

    def ranked(self):
        order = sorted(range(len(self.names)), key=lambda j: (-self.importance[j], j))
        return [(self.names[j], float(self.importance[j])) for j in order]


def importance_from_attention(attn_batch, names=None, row_tol=1e-8) -> ImportanceReport:
    A = np.asarray(attn_batch, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    if A.ndim != 3 or A.shape[1] != A.shape[2]:
        raise ShapeError(f"expected (n, T, T) attention, got {A.shape}")
    n, T, _ = A.shape
    if n == 0:
        raise ShapeError("no attention matrices")
    if T < 2:
        raise ShapeError("need at least two tokens once the diagonal is masked")
    if np.any(A < 0) or np.max(np.abs(A.sum(axis=2) - 1.0)) > row_tol:
        raise ShapeError("attention rows must be nonnegative and sum to 1")
    off = A * (1.0 - np.eye(T))
    row_mass = off.sum(axis=2, keepdims=True)
    if np.any(row_mass <= 0):
        m, i = np.argwhere(row_mass[:, :, 0] <= 0)[0]
        raise DegenerateRowError(f"matrix {m}, row {i} has no off-diagonal attention")
    received = (off / row_mass).sum(axis=1) / (T - 1)  # (n, T)
    expected = received.mean(axis=0)
    imp = expected / expected.sum()
    if names is None:
        names = [f"f{j}" for j in range(T)]
    if len(names) != T:
        raise ShapeError(f"{len(names)} names for {T} tokens")
    return ImportanceReport(imp, list(names))


def dataset_importance(model, dataset, encoder="lesion") -> ImportanceReport:
    """Importance of every token of the lesion or patient encoder over a dataset."""
    if model.config.architecture != "nested" and encoder != "joint":
        raise ConfigError("flat models only expose the 'joint' encoder")
    data = DatasetArrays(dataset)
    if encoder == "lesion":
        enc, args = model.lesion, (data.lesion_meta, data.lesion_missing)
    elif encoder == "patient":
        enc, args = model.patient, (data.patient_meta, data.patient_missing)
    elif encoder == "joint":
        enc, args = model.joint, data.joint_meta()
    else:
        raise ConfigError(f"unknown encoder {encoder!r}")
    _, trace = enc.forward(*args)
    return importance_from_attention(trace.cache["A"], enc.layout.token_names())


def write_importance(report: ImportanceReport, path):
    lines = ["feature_name,importance"] + [f"{n},{v!r}" for n, v in report.ranked()]
    atomic_write_text(path, "\n".join(lines) + "\n")
