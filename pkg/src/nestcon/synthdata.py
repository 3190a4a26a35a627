"""Hierarchical patient/lesion datasets: synthetic generation, file I/O, splits.

A dataset is a list of patients, each carrying patient-level metadata and one
or more lesions (image vector, lesion-level metadata, class label). The
synthetic generator plants a per-patient latent factor shared by all lesions
of that patient, so lesions of one patient look alike in every modality.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestError, LowShotError, SplitError
from .iohelpers import atomic_write_bytes, atomic_write_text
from .rng import make_rng

FORMAT_VERSION = 1
CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class TableSchema:
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    # number of levels for categorical features, 0 for continuous ones
    levels: tuple[int, ...]

    def __post_init__(self):
        if not len(self.names) == len(self.kinds) == len(self.levels):
            raise ConfigError("schema names/kinds/levels lengths differ")
        for kind, lv in zip(self.kinds, self.levels):
            if kind not in (CONTINUOUS, CATEGORICAL):
                raise ConfigError(f"unknown feature kind {kind!r}")
            if kind == CATEGORICAL and lv < 1:
                raise ConfigError("categorical features need at least one level")

    def __len__(self):
        return len(self.names)

    def to_json(self):
        return [
            {"name": n, "kind": k, "levels": lv}
            for n, k, lv in zip(self.names, self.kinds, self.levels)
        ]

    @classmethod
    def from_json(cls, items):
        return cls(
            names=tuple(str(it["name"]) for it in items),
            kinds=tuple(str(it["kind"]) for it in items),
            levels=tuple(int(it.get("levels", 0)) for it in items),
        )


@dataclass(frozen=True)
class DatasetSchema:
    image_dim: int
    num_classes: int
    patient: TableSchema
    lesion: TableSchema


@dataclass
class LesionRecord:
    lesion_id: str
    image: np.ndarray  # float32, values in [0, 1]
    meta: np.ndarray  # float64; categorical entries hold integer codes; 0.0 where missing
    missing: np.ndarray  # bool, same length as meta
    label: int
    labeled: bool = True


@dataclass
class PatientRecord:
    patient_id: str
    meta: np.ndarray
    missing: np.ndarray
    lesions: list[LesionRecord] = field(default_factory=list)

    @property
    def num_lesions(self):
        return len(self.lesions)


@dataclass
class Dataset:
    schema: DatasetSchema
    patients: list[PatientRecord]

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def __getitem__(self, i):
        return self.patients[i]

    @property
    def num_lesions(self):
        return sum(p.num_lesions for p in self.patients)

    def lesions(self):
        """Yield ``(patient_index, lesion)`` in dataset order."""
        for pi, p in enumerate(self.patients):
            for les in p.lesions:
                yield pi, les

    def labels(self):
        return np.array([les.label for _, les in self.lesions()], dtype=np.int64)

    def images(self):
        return np.stack([les.image for _, les in self.lesions()]).astype(np.float64)

    def lesion_meta(self):
        rows = [(les.meta, les.missing) for _, les in self.lesions()]
        return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])

    def patient_meta(self):
        return (
            np.stack([p.meta for p in self.patients]),
            np.stack([p.missing for p in self.patients]),
        )

    def lesion_owner(self):
        """Index of the owning patient for every lesion, in dataset order."""
        return np.array([pi for pi, _ in self.lesions()], dtype=np.int64)


# --------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class GenConfig:
    num_patients: int = 200
    lesions_per_patient_range: tuple[int, int] = (8, 12)
    image_dim: int = 64
    patient_meta_dim: int = 6
    lesion_meta_dim: int = 8
    latent_dim: int = 8
    malignant_rate: float = 0.3
    missing_rate: float = 0.02
    noise_scale: float = 0.7
    seed: int = 0
    # fixed projections are drawn from projection_seed (defaults to seed), so
    # held-out samples of the same population share A, G, H, K
    projection_seed: int | None = None
    image_noise: float = 0.02
    image_gain: float = 2.0
    meta_noise: float = 0.1
    patient_categorical: int = 1
    lesion_categorical: int = 1
    category_levels: int = 4
    num_classes: int = 2
    # rotates the image projection towards a fresh random one; 0 = same domain
    image_shift: float = 0.0
    informative_feature: int | None = None
    informative_gain: float = 5.0

    def validate(self):
        lo, hi = self.lesions_per_patient_range
        checks = [
            (self.num_patients >= 1, "num_patients must be >= 1"),
            (1 <= lo <= hi, "lesions_per_patient_range must satisfy 1 <= min <= max"),
            (self.image_dim >= 1, "image_dim must be >= 1"),
            (self.patient_meta_dim >= 1, "patient_meta_dim must be >= 1"),
            (self.lesion_meta_dim >= 1, "lesion_meta_dim must be >= 1"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (0.0 < self.malignant_rate < 1.0, "malignant_rate must be in (0, 1)"),
            (0.0 <= self.missing_rate < 1.0, "missing_rate must be in [0, 1)"),
            (self.noise_scale >= 0, "noise_scale must be >= 0"),
            (self.image_noise >= 0 and self.meta_noise >= 0, "noise levels must be >= 0"),
            (0 <= self.patient_categorical <= self.patient_meta_dim, "too many patient categorical features"),
            (0 <= self.lesion_categorical <= self.lesion_meta_dim, "too many lesion categorical features"),
            (self.category_levels >= 2, "category_levels must be >= 2"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (0.0 <= self.image_shift <= 1.0, "image_shift must be in [0, 1]"),
        ]
        if self.informative_feature is not None:
            checks.append(
                (0 <= self.informative_feature < self.lesion_meta_dim - self.lesion_categorical,
                 "informative_feature must index a continuous lesion feature")
            )
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def _table_schema(prefix, dim, n_cat, levels):
    n_cont = dim - n_cat
    names = [f"{prefix}_c{j}" for j in range(n_cont)] + [f"{prefix}_k{j}" for j in range(n_cat)]
    kinds = [CONTINUOUS] * n_cont + [CATEGORICAL] * n_cat
    return TableSchema(tuple(names), tuple(kinds), tuple([0] * n_cont + [levels] * n_cat))


def _quantize_tail(values, n_cat, levels):
    """Replace the last ``n_cat`` columns by quantile-bin codes 0..levels-1."""
    if n_cat == 0:
        return values
    out = values.copy()
    qs = np.arange(1, levels) / levels
    for j in range(values.shape[1] - n_cat, values.shape[1]):
        edges = np.quantile(values[:, j], qs)
        out[:, j] = np.searchsorted(edges, values[:, j], side="right").astype(np.float64)
    return out


def generate(cfg: GenConfig) -> Dataset:
    """Sample a dataset from the planted two-level latent model.

    Per patient ``u ~ N(0, I)``; per lesion ``v = A u + noise_scale * eps``.
    Images are ``sigmoid(G v)`` plus pixel noise, lesion metadata ``H v`` plus
    noise, patient metadata ``K u`` plus noise. Labels threshold a fixed linear
    score of ``v`` at sample quantiles, so the malignant fraction matches
    ``malignant_rate``.
    """
    cfg.validate()
    L = cfg.latent_dim
    pseed = cfg.seed if cfg.projection_seed is None else cfg.projection_seed
    proj = make_rng(pseed, "projections")
    A = proj.standard_normal((L, L)) / math.sqrt(L)
    G = proj.standard_normal((cfg.image_dim, L)) * (cfg.image_gain / math.sqrt(L))
    H = proj.standard_normal((cfg.lesion_meta_dim, L)) / math.sqrt(L)
    K = proj.standard_normal((cfg.patient_meta_dim, L)) / math.sqrt(L)
    score_dir = proj.standard_normal(L)
    score_dir /= np.linalg.norm(score_dir)
    if cfg.image_shift > 0:
        G_new = make_rng(pseed, "image-shift").standard_normal(G.shape) * (cfg.image_gain / math.sqrt(L))
        theta = cfg.image_shift * math.pi / 2
        G = math.cos(theta) * G + math.sin(theta) * G_new
    if cfg.informative_feature is not None:
        H[cfg.informative_feature] *= cfg.informative_gain

    rng = make_rng(cfg.seed, "sample")
    lo, hi = cfg.lesions_per_patient_range
    P = cfg.num_patients
    counts = rng.integers(lo, hi + 1, size=P)
    owner = np.repeat(np.arange(P), counts)
    n = int(counts.sum())
    u = rng.standard_normal((P, L))
    v = u[owner] @ A.T + cfg.noise_scale * rng.standard_normal((n, L))
    logits = v @ G.T
    images = 1.0 / (1.0 + np.exp(-logits)) + cfg.image_noise * rng.standard_normal((n, cfg.image_dim))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    lesion_meta = v @ H.T + cfg.meta_noise * rng.standard_normal((n, cfg.lesion_meta_dim))
    patient_meta = u @ K.T + cfg.meta_noise * rng.standard_normal((P, cfg.patient_meta_dim))
    lesion_missing = rng.random((n, cfg.lesion_meta_dim)) < cfg.missing_rate
    patient_missing = rng.random((P, cfg.patient_meta_dim)) < cfg.missing_rate

    lesion_meta = _quantize_tail(lesion_meta, cfg.lesion_categorical, cfg.category_levels)
    patient_meta = _quantize_tail(patient_meta, cfg.patient_categorical, cfg.category_levels)
    lesion_meta[lesion_missing] = 0.0
    patient_meta[patient_missing] = 0.0

    scores = v @ score_dir
    if cfg.num_classes == 2:
        edges = np.array([np.quantile(scores, 1.0 - cfg.malignant_rate)])
    else:
        edges = np.quantile(scores, np.arange(1, cfg.num_classes) / cfg.num_classes)
    labels = np.searchsorted(edges, scores, side="right")

    schema = DatasetSchema(
        image_dim=cfg.image_dim,
        num_classes=cfg.num_classes,
        patient=_table_schema("pat", cfg.patient_meta_dim, cfg.patient_categorical, cfg.category_levels),
        lesion=_table_schema("les", cfg.lesion_meta_dim, cfg.lesion_categorical, cfg.category_levels),
    )
    patients = []
    start = 0
    for p in range(P):
        lesions = []
        for i in range(start, start + counts[p]):
            lesions.append(
                LesionRecord(
                    lesion_id=f"L{i:06d}",
                    image=images[i],
                    meta=lesion_meta[i],
                    missing=lesion_missing[i],
                    label=int(labels[i]),
                )
            )
        start += counts[p]
        patients.append(PatientRecord(f"P{p:05d}", patient_meta[p], patient_missing[p], lesions))
    return Dataset(schema, patients)


# --------------------------------------------------------------------------
# file format


def _fmt(value, kind, missing):
    if missing:
        return ""
    if kind == CATEGORICAL:
        return str(int(value))
    return repr(float(value))


def _csv_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def save_dataset(dataset: Dataset, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    s = dataset.schema
    prow = [["patient_id", *s.patient.names]]
    lrow = [["lesion_id", "patient_id", "label", *s.lesion.names]]
    images = []
    for p in dataset.patients:
        prow.append([p.patient_id, *(_fmt(x, k, m) for x, k, m in zip(p.meta, s.patient.kinds, p.missing))])
        for les in p.lesions:
            lrow.append([
                les.lesion_id, p.patient_id, str(les.label),
                *(_fmt(x, k, m) for x, k, m in zip(les.meta, s.lesion.kinds, les.missing)),
            ])
            images.append(np.asarray(les.image, dtype="<f4"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "image_dim": s.image_dim,
        "num_classes": s.num_classes,
        "num_patients": len(dataset.patients),
        "num_lesions": dataset.num_lesions,
        "patient_features": s.patient.to_json(),
        "lesion_features": s.lesion.to_json(),
    }
    blob = np.concatenate(images).astype("<f4").tobytes() if images else b""
    atomic_write_text(d / "patients.csv", _csv_text(prow))
    atomic_write_text(d / "lesions.csv", _csv_text(lrow))
    atomic_write_bytes(d / "images.f32", blob)
    atomic_write_text(d / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_meta(cells, table: TableSchema, where):
    if len(cells) != len(table):
        raise IngestError(f"{where}: expected {len(table)} feature cells, got {len(cells)}")
    meta = np.zeros(len(table))
    missing = np.zeros(len(table), dtype=bool)
    for j, (cell, kind, levels) in enumerate(zip(cells, table.kinds, table.levels)):
        if cell == "":
            missing[j] = True
            continue
        try:
            if kind == CATEGORICAL:
                code = int(cell)
                if not 0 <= code < levels:
                    raise IngestError(f"{where}: category code {code} out of range for {table.names[j]}")
                meta[j] = code
            else:
                meta[j] = float(cell)
        except ValueError:
            raise IngestError(f"{where}: cannot parse {cell!r} for {table.names[j]}") from None
        if not math.isfinite(meta[j]):
            raise IngestError(f"{where}: non-finite value for {table.names[j]}")
    return meta, missing


def _read_csv(path):
    if not path.is_file():
        raise IngestError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def load_dataset(dir_path) -> Dataset:
    d = Path(dir_path)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise IngestError(f"missing file: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise IngestError(f"unsupported dataset format_version {manifest.get('format_version')!r}")
        schema = DatasetSchema(
            image_dim=int(manifest["image_dim"]),
            num_classes=int(manifest["num_classes"]),
            patient=TableSchema.from_json(manifest["patient_features"]),
            lesion=TableSchema.from_json(manifest["lesion_features"]),
        )
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise IngestError(f"malformed manifest: {exc}") from None

    prows = _read_csv(d / "patients.csv")
    lrows = _read_csv(d / "lesions.csv")
    if not prows or prows[0][:1] != ["patient_id"]:
        raise IngestError("patients.csv: missing header")
    if not lrows or lrows[0][:3] != ["lesion_id", "patient_id", "label"]:
        raise IngestError("lesions.csv: missing header")

    patients = []
    index = {}
    for r, row in enumerate(prows[1:], start=2):
        where = f"patients.csv row {r}"
        if not row:
            raise IngestError(f"{where}: empty row")
        meta, missing = _parse_meta(row[1:], schema.patient, where)
        if row[0] in index:
            raise IngestError(f"{where}: duplicate patient_id {row[0]!r}")
        index[row[0]] = len(patients)
        patients.append(PatientRecord(row[0], meta, missing, []))

    ipath = d / "images.f32"
    if not ipath.is_file():
        raise IngestError(f"missing file: {ipath}")
    raw = ipath.read_bytes()
    n_lesions = len(lrows) - 1
    expected = n_lesions * schema.image_dim * 4
    if len(raw) != expected:
        raise IngestError(
            f"images.f32: {len(raw)} bytes, expected {expected} "
            f"({n_lesions} lesions x {schema.image_dim} floats); offset {min(len(raw), expected)}"
        )
    images = np.frombuffer(raw, dtype="<f4").reshape(n_lesions, schema.image_dim).astype(np.float32)

    seen = set()
    for r, row in enumerate(lrows[1:], start=2):
        where = f"lesions.csv row {r}"
        if len(row) < 3:
            raise IngestError(f"{where}: too few columns")
        lid, pid, label_cell = row[0], row[1], row[2]
        if pid not in index:
            raise IngestError(f"{where}: unknown patient_id {pid!r}")
        if lid in seen:
            raise IngestError(f"{where}: duplicate lesion_id {lid!r}")
        seen.add(lid)
        try:
            label = int(label_cell)
        except ValueError:
            raise IngestError(f"{where}: bad label {label_cell!r}") from None
        if not 0 <= label < schema.num_classes:
            raise IngestError(f"{where}: label {label} outside [0, {schema.num_classes})")
        meta, missing = _parse_meta(row[3:], schema.lesion, where)
        patients[index[pid]].lesions.append(LesionRecord(lid, images[r - 2].copy(), meta, missing, label))

    for p in patients:
        if not p.lesions:
            raise IngestError(f"patient {p.patient_id!r} has no lesions")
    ds = Dataset(schema, patients)
    # the image blob is in lesions.csv order; dataset order must agree with it
    order = [les.lesion_id for _, les in ds.lesions()]
    if order != [row[0] for row in lrows[1:]]:
        raise IngestError("lesions.csv rows are not grouped in patients.csv order")
    return ds


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.schema != b.schema or len(a.patients) != len(b.patients):
        return False
    for p, q in zip(a.patients, b.patients):
        if (p.patient_id != q.patient_id or not np.array_equal(p.meta, q.meta)
                or not np.array_equal(p.missing, q.missing) or len(p.lesions) != len(q.lesions)):
            return False
        for x, y in zip(p.lesions, q.lesions):
            if (x.lesion_id != y.lesion_id or x.label != y.label or x.labeled != y.labeled
                    or x.image.dtype != y.image.dtype or not np.array_equal(x.image, y.image)
                    or not np.array_equal(x.meta, y.meta) or not np.array_equal(x.missing, y.missing)):
                return False
    return True


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "lesion_level"  # or "patient_disjoint"
    train_fraction: float = 0.9
    seed: int = 0

    def validate(self):
        if self.mode not in ("lesion_level", "patient_disjoint"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


def _regroup(dataset, keep):
    """Sub-dataset holding the lesions whose (patient, position) pairs are in ``keep``."""
    patients = []
    for pi, p in enumerate(dataset.patients):
        lesions = [les for li, les in enumerate(p.lesions) if (pi, li) in keep]
        if lesions:
            patients.append(replace(p, lesions=lesions))
    return Dataset(dataset.schema, patients)


def split(dataset: Dataset, spec: SplitSpec):
    spec.validate()
    if not dataset.patients:
        raise SplitError("cannot split an empty dataset")
    if spec.mode == "lesion_level":
        keys = [(pi, li) for pi, p in enumerate(dataset.patients) for li in range(p.num_lesions)]
        perm = make_rng(spec.seed, "split").permutation(len(keys))
        n_train = int(round(spec.train_fraction * len(keys)))
        if n_train == 0 or n_train == len(keys):
            raise SplitError(f"split of {len(keys)} lesions at {spec.train_fraction} leaves one side empty")
        train_keys = {keys[i] for i in perm[:n_train]}
        eval_keys = {keys[i] for i in perm[n_train:]}
        return _regroup(dataset, train_keys), _regroup(dataset, eval_keys)

    total = dataset.num_lesions
    target = spec.train_fraction * total
    order = sorted(range(len(dataset.patients)),
                   key=lambda i: (-dataset.patients[i].num_lesions, dataset.patients[i].patient_id))
    in_train = set()
    n_train = 0
    for i in order:
        n_p = dataset.patients[i].num_lesions
        if abs(n_train + n_p - target) < abs(n_train - target):
            in_train.add(i)
            n_train += n_p
    train = [p for i, p in enumerate(dataset.patients) if i in in_train]
    held = [p for i, p in enumerate(dataset.patients) if i not in in_train]
    if not train or not held:
        raise SplitError("patient-disjoint split leaves one side empty")
    return Dataset(dataset.schema, train), Dataset(dataset.schema, held)


def subsample_labels(train: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep ``ceil(fraction * n)`` labelled lesions, at least one per present class."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("label fraction must be in (0, 1]")
    keys = [(pi, li, les.label) for pi, p in enumerate(train.patients) for li, les in enumerate(p.lesions)]
    classes = sorted({k[2] for k in keys})
    if len(classes) < 2:
        raise LowShotError(f"train split holds a single class {classes}; low-shot probing needs two")
    if fraction == 1.0:
        return train
    n_keep = math.ceil(fraction * len(keys) - 1e-9)
    if n_keep < len(classes):
        raise LowShotError(f"{n_keep} labels cannot represent {len(classes)} classes")
    rng = make_rng(seed, "low-shot")
    chosen = []
    for c in classes:
        members = [i for i, k in enumerate(keys) if k[2] == c]
        chosen.append(members[int(rng.integers(len(members)))])
    rest = np.array(sorted(set(range(len(keys))) - set(chosen)))
    chosen.extend(int(i) for i in rng.choice(rest, size=n_keep - len(chosen), replace=False))
    keep = {(keys[i][0], keys[i][1]) for i in chosen}
    patients = []
    for pi, p in enumerate(train.patients):
        lesions = [replace(les, labeled=(pi, li) in keep) for li, les in enumerate(p.lesions)]
        patients.append(replace(p, lesions=lesions))
    return Dataset(train.schema, patients)

