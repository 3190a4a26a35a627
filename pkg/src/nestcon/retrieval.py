"""Exact cosine retrieval over reference embedding pools.

Pools hold raw (unnormalized) embeddings; ranking is by cosine similarity
with ties broken by ascending pool index. Metadata extrapolation gives an
image-only lesion pseudo lesion- and patient-metadata embeddings drawn from
a reference dataset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EvalError, ShapeError
from .iohelpers import atomic_write_bytes, atomic_write_text
from .nested_loss import FusionParams, fuse_patient
from .numerics import as_matrix, normalize_rows

PERCENTILE_LEVELS = (2, 10, 25, 50, 75, 90, 98)
HIST_WIDTH = 0.05
VARIANTS = ("I2I", "I2L", "I2L2P")


@dataclass
class RetrievalPool:
    embeddings: np.ndarray  # (m, D), raw
    ids: list
    kind: str  # "lesion", "patient" or "image"

    def __post_init__(self):
        self.embeddings = as_matrix(self.embeddings, "pool")
        if len(self.ids) != self.embeddings.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {self.embeddings.shape[0]} pool rows")
        if self.kind not in ("lesion", "patient", "image"):
            raise ConfigError(f"unknown pool kind {self.kind!r}")
        self._unit, _ = normalize_rows(self.embeddings)
        self._index = {pid: i for i, pid in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def unit(self):
        return self._unit

    def row_of(self, pid):
        return self._index[pid]

    def similarities(self, queries):
        """Cosine of each query row against every pool row, ``(q, m)``."""
        Qn, _ = normalize_rows(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
        if Qn.shape[1] != self._unit.shape[1]:
            raise ShapeError(f"query width {Qn.shape[1]} != pool width {self._unit.shape[1]}")
        return np.clip(Qn @ self._unit.T, -1.0, 1.0)


@dataclass
class ReferencePools:
    """Lesion and patient metadata pools, plus what the ablation variants need.

    The two metadata pools carry no association with each other; ``owner``
    (lesion id -> patient id) and the ``image`` pool are only consulted by the
    I2L and I2I variants.
    """

    lesion: RetrievalPool
    patient: RetrievalPool
    image: RetrievalPool | None = None
    owner: dict = field(default_factory=dict)


def _rank(sims, k):
    """Top-``k`` indices per row, by descending similarity then ascending index."""
    m = sims.shape[1]
    k = min(k, m)
    # stable sort on the negated similarities keeps ascending index among ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order


def nearest(pool: RetrievalPool, query, k=1):
    """Exact top-``k`` ``(id, cosine)`` pairs, best first; ``k`` is clamped to the pool size."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(pool) == 0:
        raise EvalError("empty pool")
    sims = pool.similarities(query)
    order = _rank(sims, k)[0]
    return [(pool.ids[i], float(sims[0, i])) for i in order]


def nearest_rows(pool: RetrievalPool, queries, k=1):
    """Batched variant returning ``(indices, cosines)``, both ``(q, k)``."""
    sims = pool.similarities(queries)
    order = _rank(sims, k)
    return order, np.take_along_axis(sims, order, axis=1)


def build_pools(reference, model, with_image_pool=True):
    """Encode every reference lesion and patient with a trained nested model."""
    if model.config.architecture != "nested":
        raise ConfigError("metadata pools need a nested model")
    emb = model.embed(reference)
    lesion_ids = [les.lesion_id for _, les in reference.lesions()]
    patient_ids = [p.patient_id for p in reference.patients]
    owner = {lid: patient_ids[pi] for lid, pi in zip(lesion_ids, emb["owner"])}
    lesion = RetrievalPool(emb["H"], lesion_ids, "lesion")
    patient = RetrievalPool(emb["X"], patient_ids, "patient")
    image = RetrievalPool(emb["W"], lesion_ids, "image") if with_image_pool else None
    return ReferencePools(lesion, patient, image, owner)


@dataclass
class Extrapolation:
    h: np.ndarray  # (q, D) pseudo lesion-metadata embeddings
    x: np.ndarray  # (q, D) pseudo patient-metadata embeddings
    lesion_ids: list
    patient_ids: list


def extrapolate(W, pools: ReferencePools, fusion: FusionParams, variant="I2L2P") -> Extrapolation:
    """Retrieve pseudo metadata embeddings for image embeddings ``W`` (one row per lesion).

    I2L2P: nearest lesion-metadata row to ``w``; fuse ``(w, h)`` as a one-lesion
    patient; nearest patient-metadata row to the fused vector.
    I2L: the same lesion retrieval, paired with the retrieved lesion's own patient.
    I2I: nearest reference image; that lesion's metadata and its patient.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if variant in ("I2L", "I2I") and not pools.owner:
        raise ConfigError(f"{variant} needs the lesion -> patient ownership map")
    if variant == "I2I":
        if pools.image is None:
            raise ConfigError("I2I needs an image pool")
        idx, _ = nearest_rows(pools.image, W, 1)
        lesion_ids = [pools.image.ids[i] for i in idx[:, 0]]
        lrows = [pools.lesion.row_of(lid) for lid in lesion_ids]
        patient_ids = [pools.owner[lid] for lid in lesion_ids]
    else:
        idx, _ = nearest_rows(pools.lesion, W, 1)
        lrows = list(idx[:, 0])
        lesion_ids = [pools.lesion.ids[i] for i in lrows]
        if variant == "I2L":
            patient_ids = [pools.owner[lid] for lid in lesion_ids]
        else:
            H_hat = pools.lesion.embeddings[lrows]
            Z = np.stack([fuse_patient(w[None], h[None], fusion)[0] for w, h in zip(W, H_hat)])
            pidx, _ = nearest_rows(pools.patient, Z, 1)
            patient_ids = [pools.patient.ids[i] for i in pidx[:, 0]]
    prows = [pools.patient.row_of(pid) for pid in patient_ids]
    return Extrapolation(pools.lesion.embeddings[lrows].copy(), pools.patient.embeddings[prows].copy(),
                         lesion_ids, patient_ids)


def recall_at_k(queries, pool: RetrievalPool, truth_ids, ks=(1, 5, 10, 100)):
    """Percentage of queries whose true id is within the top ``k`` (k clamped to the pool)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if len(truth_ids) != queries.shape[0]:
        raise ShapeError("one truth id per query required")
    try:
        truth = np.array([pool.row_of(t) for t in truth_ids])
    except KeyError as exc:
        raise EvalError(f"truth id {exc.args[0]!r} not in pool") from None
    ranks = truth_ranks(pool.similarities(queries), truth)
    return {k: 100.0 * float(np.mean(ranks <= min(k, len(pool)))) for k in ks}


def truth_ranks(sims, truth):
    """1-based rank of ``truth[i]`` in row ``i`` under the (cosine desc, index asc) order."""
    q, m = sims.shape
    t = sims[np.arange(q), truth][:, None]
    better = (sims > t).sum(axis=1)
    tied_before = ((sims == t) & (np.arange(m)[None, :] < truth[:, None])).sum(axis=1)
    return better + tied_before + 1


# ---------------------------------------------------------------------------
# embedding-space diagnostics


@dataclass
class PercentileReport:
    levels: tuple
    matching: np.ndarray
    non_matching: np.ndarray


def nearest_rank_percentile(values, level):
    """Nearest-rank percentile: the ``ceil(level/100 * n)``-th smallest value."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise EvalError("percentile of an empty sample")
    r = max(1, math.ceil(level / 100.0 * x.size - 1e-12))
    return float(x[min(r, x.size) - 1])


def histogram_density(values, width=HIST_WIDTH):
    edges = np.linspace(-1.0, 1.0, int(round(2.0 / width)) + 1)
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=edges)
    return edges[:-1], counts / (len(values) * width)


@dataclass
class Diagnostics:
    percentiles: PercentileReport
    bin_left: np.ndarray
    matched_density: np.ndarray
    retrieved_density: np.ndarray
    matched: np.ndarray = field(repr=False)
    non_matched: np.ndarray = field(repr=False)
    retrieved: np.ndarray = field(repr=False)


def similarity_diagnostics(W, H, rng, n_neg=10, retrieval_pool: RetrievalPool | None = None):
    """Cosine distributions of matched, non-matched and retrieved image/metadata pairs.

    Non-matched pairs: ``n_neg`` uniform draws per image from the other rows of
    ``H``. Retrieved: best cosine of each image against ``retrieval_pool``
    (``H`` itself when no pool is given).
    """
    W = as_matrix(W, "W")
    H = as_matrix(H, "H")
    if W.shape != H.shape:
        raise ShapeError("W and H must be aligned")
    n = W.shape[0]
    if n < 2:
        raise EvalError("need at least two matched pairs")
    if n_neg < 1:
        raise ConfigError("n_neg must be >= 1")
    Wn, _ = normalize_rows(W)
    Hn, _ = normalize_rows(H)
    matched = np.clip(np.einsum("ij,ij->i", Wn, Hn), -1.0, 1.0)
    draws = rng.integers(0, n - 1, size=(n, n_neg))
    draws += draws >= np.arange(n)[:, None]
    non_matched = np.clip(np.einsum("id,ikd->ik", Wn, Hn[draws]).ravel(), -1.0, 1.0)
    pool = retrieval_pool if retrieval_pool is not None else RetrievalPool(H, list(range(n)), "lesion")
    retrieved = pool.similarities(W).max(axis=1)
    report = PercentileReport(
        PERCENTILE_LEVELS,
        np.array([nearest_rank_percentile(matched, p) for p in PERCENTILE_LEVELS]),
        np.array([nearest_rank_percentile(non_matched, p) for p in PERCENTILE_LEVELS]),
    )
    left, md = histogram_density(matched)
    _, rd = histogram_density(retrieved)
    return Diagnostics(report, left, md, rd, matched, non_matched, retrieved)


def write_diagnostics(diag: Diagnostics, out_dir):
    d = Path(out_dir)
    lines = ["population," + ",".join(f"p{lv}" for lv in diag.percentiles.levels)]
    for name, vals in (("non_matching", diag.percentiles.non_matching), ("matching", diag.percentiles.matching)):
        lines.append(name + "," + ",".join(repr(float(v)) for v in vals))
    atomic_write_text(d / "percentiles.csv", "\n".join(lines) + "\n")
    rows = ["bin_left,matched_density,retrieved_density"]
    for b, m, r in zip(diag.bin_left, diag.matched_density, diag.retrieved_density):
        rows.append(f"{round(float(b), 10)!r},{float(m)!r},{float(r)!r}")
    atomic_write_text(d / "histogram.csv", "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# pool files


def save_pool(pool: RetrievalPool, out_dir, owner=None):
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "kind": pool.kind, "m": len(pool),
                "D": int(pool.embeddings.shape[1]), "ids": list(pool.ids)}
    if owner:
        manifest["owner"] = [owner[i] for i in pool.ids]
    atomic_write_bytes(d / "pool.f32", pool.embeddings.astype("<f4").tobytes())
    atomic_write_text(d / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def load_pool(in_dir):
    d = Path(in_dir)
    try:
        m = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        raw = np.frombuffer((d / "pool.f32").read_bytes(), dtype="<f4").astype(np.float64)
        if raw.size != m["m"] * m["D"]:
            raise EvalError(f"pool.f32 holds {raw.size} values, manifest declares {m['m']}x{m['D']}")
        pool = RetrievalPool(raw.reshape(m["m"], m["D"]), list(m["ids"]), m["kind"])
    except (OSError, KeyError, ValueError) as exc:
        raise EvalError(f"cannot load pool from {d}: {exc}") from None
    owner = dict(zip(m["ids"], m["owner"])) if "owner" in m else {}
    return pool, owner


def save_reference_pools(pools: ReferencePools, out_dir):
    d = Path(out_dir)
    save_pool(pools.lesion, d / "lesion", pools.owner)
    save_pool(pools.patient, d / "patient")
    if pools.image is not None:
        save_pool(pools.image, d / "image")


def load_reference_pools(in_dir):
    d = Path(in_dir)
    lesion, owner = load_pool(d / "lesion")
    patient, _ = load_pool(d / "patient")
    image = load_pool(d / "image")[0] if (d / "image").is_dir() else None
    return ReferencePools(lesion, patient, image, owner)
