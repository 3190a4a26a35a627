"""Model state (encoders, fusion, optimizer moments), embedding, checkpoints.

Two architectures share this container:

``nested``
    image encoder + lesion tabular encoder + patient tabular encoder + fusion.
``flat``
    image encoder + one tabular encoder over the concatenated
    patient-and-lesion metadata of each lesion.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import (
    EncoderParams,
    ImageEncoder,
    TabularEncoder,
    TabularLayout,
    encoder_from_manifest,
    encoder_manifest,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .iohelpers import atomic_write_bytes, atomic_write_text
from .nested_loss import FusionParams
from .rng import make_rng
from .synthdata import Dataset, TableSchema

CHECKPOINT_VERSION = 1
ARCHITECTURES = ("nested", "flat")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "nested"
    embed_dim: int = 32
    token_dim: int = 16
    hidden: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if self.embed_dim < 1 or self.token_dim < 1 or min(self.hidden) < 1:
            raise ConfigError("model dimensions must be >= 1")


def joint_schema(schema) -> TableSchema:
    """Patient features followed by lesion features, as seen by the flat encoder."""
    p, les = schema.patient, schema.lesion
    return TableSchema(p.names + les.names, p.kinds + les.kinds, p.levels + les.levels)


class DatasetArrays:
    """Dense per-lesion and per-patient arrays of a dataset, gathered once."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.images = dataset.images()
        self.lesion_meta, self.lesion_missing = dataset.lesion_meta()
        self.patient_meta, self.patient_missing = dataset.patient_meta()
        counts = np.array([p.num_lesions for p in dataset.patients], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.owner = dataset.lesion_owner()

    def joint_meta(self, rows=None):
        rows = np.arange(self.images.shape[0]) if rows is None else rows
        owner = self.owner[rows]
        meta = np.concatenate([self.patient_meta[owner], self.lesion_meta[rows]], axis=1)
        missing = np.concatenate([self.patient_missing[owner], self.lesion_missing[rows]], axis=1)
        return meta, missing


@dataclass
class ModelState:
    config: ModelConfig
    image: ImageEncoder
    lesion: TabularEncoder | None = None
    patient: TabularEncoder | None = None
    fusion: FusionParams | None = None
    joint: TabularEncoder | None = None
    moments: dict = field(default_factory=dict)
    step: int = 0

    # parameter registry -------------------------------------------------

    def modules(self):
        """``(prefix, EncoderParams)`` for every parameter-holding module, fixed order."""
        out = [("image", self.image.params)]
        if self.config.architecture == "nested":
            out += [("lesion", self.lesion.params), ("patient", self.patient.params),
                    ("fusion", self.fusion_params())]
        else:
            out.append(("joint", self.joint.params))
        return out

    def fusion_params(self):
        # a live view: arrays are the FusionParams arrays themselves
        return EncoderParams({"weight": self.fusion.weight, "bias": self.fusion.bias}, (), {})

    def named_arrays(self):
        for prefix, params in self.modules():
            for name, arr in params.arrays.items():
                yield f"{prefix}.{name}", arr

    def encoders(self):
        if self.config.architecture == "nested":
            return {"image": self.image, "lesion": self.lesion, "patient": self.patient}
        return {"image": self.image, "joint": self.joint}

    def reset_moments(self, keys=None):
        for key, arr in self.named_arrays():
            if keys is None or key in keys or key not in self.moments:
                self.moments[key] = (np.zeros_like(arr), np.zeros_like(arr))

    def body_bytes(self):
        """Concatenated bytes of every encoder body, keyed by encoder name."""
        return {name: enc.params.body_bytes() for name, enc in self.encoders().items()}

    def copy(self):
        return copy.deepcopy(self)

    # embedding ----------------------------------------------------------

    def embed(self, data: DatasetArrays | Dataset, image_only=False):
        """Embeddings of every lesion and patient of a dataset.

        Returns a dict with ``W`` (lesions x D) and, for nested models, ``H``
        (lesions x D) and ``X`` (patients x D); flat models give ``G``.
        ``image_only`` skips the metadata encoders, so the dataset's metadata
        need not match them.
        """
        if isinstance(data, Dataset):
            data = DatasetArrays(data)
        out = {"W": self.image.forward(data.images)[0], "owner": data.owner}
        if image_only:
            return out
        if self.config.architecture == "nested":
            out["H"] = self.lesion.forward(data.lesion_meta, data.lesion_missing)[0]
            out["X"] = self.patient.forward(data.patient_meta, data.patient_missing)[0]
        else:
            out["G"] = self.joint.forward(*data.joint_meta())[0]
        return out


def init_model(dataset: Dataset, config: ModelConfig, seed: int) -> ModelState:
    rng = make_rng(seed, "init")
    data = DatasetArrays(dataset)
    s = dataset.schema
    D = config.embed_dim
    image = ImageEncoder.init(s.image_dim, D, tuple(config.hidden), rng)
    if config.architecture == "nested":
        lesion = TabularEncoder.init(TabularLayout.fit(s.lesion, data.lesion_meta, data.lesion_missing),
                                     config.token_dim, D, rng)
        patient = TabularEncoder.init(TabularLayout.fit(s.patient, data.patient_meta, data.patient_missing),
                                      config.token_dim, D, rng)
        state = ModelState(config, image, lesion, patient, FusionParams.init(D, rng))
    else:
        joint = TabularEncoder.init(TabularLayout.fit(joint_schema(s), *data.joint_meta()),
                                    config.token_dim, D, rng)
        state = ModelState(config, image, joint=joint)
    state.reset_moments()
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _sha(blob):
    return hashlib.sha256(blob).hexdigest()


def _encode(arrays, dtype):
    flat = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    return np.concatenate(flat).astype(dtype).tobytes() if flat else b""


def save_checkpoint(state: ModelState, path, dtype="<f8") -> None:
    """Write ``manifest.json``, the parameter blob and the moment blob.

    Blobs are raw little-endian floats in manifest order. The default float64
    keeps the round trip lossless; ``dtype="<f4"`` writes the compact
    32-bit interchange variant.
    """
    if dtype not in ("<f8", "<f4"):
        raise ConfigError("checkpoint dtype must be '<f8' or '<f4'")
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    ext = "f64" if dtype == "<f8" else "f32"
    keys = [k for k, _ in state.named_arrays()]
    arrays = [a for _, a in state.named_arrays()]
    params_blob = _encode(arrays, dtype)
    moments_blob = _encode([state.moments[k][0] for k in keys] + [state.moments[k][1] for k in keys], dtype)
    modules, offset = [], 0
    for prefix, params in state.modules():
        if prefix == "fusion":
            entry = {"name": prefix, "kind": "fusion", "partition": params.partition_table()}
        else:
            entry = {"name": prefix, **encoder_manifest(getattr(state, prefix))}
        entry["offset"] = offset
        offset += params.size()
        modules.append(entry)
    cfg = state.config
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model": {"architecture": cfg.architecture, "embed_dim": cfg.embed_dim,
                  "token_dim": cfg.token_dim, "hidden": list(cfg.hidden)},
        "dtype": dtype,
        "step": state.step,
        "modules": modules,
        "total_params": offset,
        "optimizer": {"segments": [{"moment": "first", "offset": 0}, {"moment": "second", "offset": offset}],
                      "keys": keys},
        "files": {"params": f"params.{ext}", "moments": f"moments.{ext}"},
        "sha256": {"params": _sha(params_blob), "moments": _sha(moments_blob)},
    }
    atomic_write_bytes(d / f"params.{ext}", params_blob)
    atomic_write_bytes(d / f"moments.{ext}", moments_blob)
    atomic_write_text(d / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> ModelState:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {manifest.get('format_version')!r}"
                              if isinstance(manifest, dict) else "checkpoint manifest is not an object")
    try:
        dtype = manifest["dtype"]
        if dtype not in ("<f8", "<f4"):
            raise CheckpointError(f"unsupported dtype {dtype!r}")
        blobs = {}
        for which in ("params", "moments"):
            f = d / manifest["files"][which]
            if not f.is_file():
                raise CheckpointError(f"missing checkpoint file {f.name}")
            blobs[which] = f.read_bytes()
            if _sha(blobs[which]) != manifest["sha256"][which]:
                raise CheckpointError(f"{f.name} does not match its recorded checksum")
        total = int(manifest["total_params"])
        flat = np.frombuffer(blobs["params"], dtype=dtype).astype(np.float64)
        mom = np.frombuffer(blobs["moments"], dtype=dtype).astype(np.float64)
        if flat.size != total or mom.size != 2 * total:
            raise CheckpointError(f"checkpoint sizes {flat.size}/{mom.size} do not match total {total}")
        mc = manifest["model"]
        config = ModelConfig(mc["architecture"], int(mc["embed_dim"]), int(mc["token_dim"]), tuple(mc["hidden"]))
        parts = {}
        for entry in manifest["modules"]:
            if entry["kind"] == "fusion":
                tbl = {e["name"]: e for e in entry["partition"]}
                off = int(entry["offset"])
                w, b = tbl["weight"], tbl["bias"]
                ws = int(np.prod(w["shape"]))
                weight = flat[off + w["offset"]: off + w["offset"] + ws].reshape(w["shape"]).copy()
                bs = int(np.prod(b["shape"]))
                bias = flat[off + b["offset"]: off + b["offset"] + bs].reshape(b["shape"]).copy()
                parts["fusion"] = FusionParams(weight, bias)
            else:
                parts[entry["name"]] = encoder_from_manifest(entry, flat, int(entry["offset"]))
        state = ModelState(config, parts["image"], parts.get("lesion"), parts.get("patient"),
                           parts.get("fusion"), parts.get("joint"), step=int(manifest["step"]))
        keys = [k for k, _ in state.named_arrays()]
        if keys != manifest["optimizer"]["keys"]:
            raise CheckpointError("optimizer key table does not match the parameter layout")
        off = 0
        for key, arr in state.named_arrays():
            state.moments[key] = (mom[off:off + arr.size].reshape(arr.shape).copy(),
                                  mom[total + off: total + off + arr.size].reshape(arr.shape).copy())
            off += arr.size
        if off != total:
            raise CheckpointError("parameter layout does not cover the declared total")
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, ConfigError, ShapeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    return state
