"""Patient batches with capped, malignancy-aware lesion subsets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyDatasetError
from .rng import make_rng


@dataclass(frozen=True)
class SamplerConfig:
    batch_patients: int = 4
    max_lesions: int = 100
    positive_sampling: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_patients < 1:
            raise ConfigError("batch_patients must be >= 1")
        if self.max_lesions < 1:
            raise ConfigError("max_lesions must be >= 1")


@dataclass(frozen=True)
class Batch:
    # (patient index, sorted selected lesion indices) per patient
    entries: tuple[tuple[int, tuple[int, ...]], ...]

    @property
    def patient_indices(self):
        return [p for p, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def select_lesions(patient, max_lesions, positive_sampling, rng):
    """Indices of the lesions used for ``patient`` this epoch, ascending.

    Patients within the cap contribute every lesion. Otherwise positive
    sampling keeps all malignant lesions (a uniform subset of them if they
    alone overflow the cap) and fills the rest uniformly from benign ones.
    """
    n = patient.num_lesions
    if n <= max_lesions:
        return tuple(range(n))
    if not positive_sampling:
        return tuple(sorted(int(i) for i in rng.choice(n, size=max_lesions, replace=False)))
    malignant = np.array([i for i, les in enumerate(patient.lesions) if les.label != 0], dtype=np.int64)
    benign = np.array([i for i, les in enumerate(patient.lesions) if les.label == 0], dtype=np.int64)
    if malignant.size >= max_lesions:
        chosen = rng.choice(malignant, size=max_lesions, replace=False)
    else:
        fill = rng.choice(benign, size=max_lesions - malignant.size, replace=False)
        chosen = np.concatenate([malignant, fill])
    return tuple(sorted(int(i) for i in chosen))


def sample_epoch(dataset, cfg: SamplerConfig, epoch: int):
    """Shuffle patients, cut into groups of ``batch_patients`` (short tail kept)."""
    P = len(dataset.patients)
    if P < 1:
        raise EmptyDatasetError("dataset has no patients")
    rng = make_rng(cfg.seed, f"epoch-{epoch}")
    order = rng.permutation(P)
    batches = []
    for start in range(0, P, cfg.batch_patients):
        entries = []
        for pi in order[start:start + cfg.batch_patients]:
            sel = select_lesions(dataset.patients[pi], cfg.max_lesions, cfg.positive_sampling, rng)
            entries.append((int(pi), sel))
        batches.append(Batch(tuple(entries)))
    return batches
