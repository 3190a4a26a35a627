"""Small encoders with hand-written forward and backward passes.

Both encoders split their parameters into an *embedding layer* (the first
input transform) and a *body* (everything deeper). Continual pre-training
trains only the embedding layer, so the split is what the freeze masks and
checkpoint partition tables are built from.

All forward passes are batched: inputs are ``(n, ...)`` arrays and outputs
``(n, D)``. Traces cache whatever the backward pass needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, EncodingError, ShapeError, TraceError
from .iohelpers import atomic_write_text, read_floats, write_floats
from .synthdata import CATEGORICAL, TableSchema

CHECKPOINT_VERSION = 1
EMBEDDING = "embedding"
BODY = "body"


def glorot(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class EncoderParams:
    """Ordered named arrays plus the embedding/body partition.

    ``version`` is bumped by every in-place update so that traces taken
    before an update are rejected by the backward pass.
    """

    arrays: dict[str, np.ndarray]
    embedding_names: tuple[str, ...]
    dims: dict = field(default_factory=dict)
    version: int = 0

    def __post_init__(self):
        unknown = set(self.embedding_names) - set(self.arrays)
        if unknown:
            raise ShapeError(f"embedding partition names unknown arrays: {sorted(unknown)}")

    @property
    def names(self):
        return tuple(self.arrays)

    @property
    def body_names(self):
        return tuple(n for n in self.arrays if n not in self.embedding_names)

    def partition_of(self, name):
        return EMBEDDING if name in self.embedding_names else BODY

    def size(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()},
                             tuple(self.embedding_names), dict(self.dims), self.version)

    def bump(self):
        self.version += 1

    def partition_table(self):
        """Offsets of each array in the flat serialization, in declared order."""
        table, offset = [], 0
        for name, arr in self.arrays.items():
            table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "partition": self.partition_of(name)})
            offset += arr.size
        return table

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def body_bytes(self):
        return b"".join(np.ascontiguousarray(self.arrays[n]).tobytes() for n in self.body_names)


def set_trainable(params: EncoderParams, mode: str) -> dict[str, bool]:
    if mode == "all":
        return {n: True for n in params.names}
    if mode == "embedding_only":
        return {n: n in params.embedding_names for n in params.names}
    raise ValueError(f"unknown freeze mode {mode!r}")


@dataclass
class ForwardTrace:
    encoder: object
    version: int
    cache: dict

    @property
    def attention(self):
        """Attention matrices, ``(n, T, T)``; a single ``(T, T)`` matrix for unbatched input."""
        A = self.cache.get("A")
        if A is not None and self.cache.get("single"):
            return A[0]
        return A


def _check_trace(trace, encoder):
    if trace.encoder is not encoder:
        raise TraceError("trace was produced by a different encoder")
    if trace.version != encoder.params.version:
        raise TraceError(
            f"stale trace: parameters at version {encoder.params.version}, trace at {trace.version}"
        )


# --------------------------------------------------------------------------
# image encoder


def _act(name, x):
    return np.tanh(x) if name == "tanh" else x


def _act_grad(name, y):
    # derivative expressed through the activation output
    return 1.0 - y * y if name == "tanh" else np.ones_like(y)


class ImageEncoder:
    """MLP: embedding linear, two tanh hidden layers, final linear to D."""

    kind = "image"

    def __init__(self, params: EncoderParams, activation="tanh"):
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.params = params
        self.activation = activation

    @classmethod
    def init(cls, input_dim, out_dim=32, hidden=(64, 64), rng=None, activation="tanh"):
        h1, h2 = hidden
        a = {
            "w1": glorot(rng, input_dim, h1, (input_dim, h1)),
            "b1": np.zeros(h1),
            "w2": glorot(rng, h1, h2, (h1, h2)),
            "b2": np.zeros(h2),
            "w3": glorot(rng, h2, out_dim, (h2, out_dim)),
            "b3": np.zeros(out_dim),
        }
        dims = {"input_dim": input_dim, "hidden": [h1, h2], "out_dim": out_dim}
        return cls(EncoderParams(a, ("w1", "b1"), dims), activation)

    @property
    def input_dim(self):
        return self.params.arrays["w1"].shape[0]

    @property
    def out_dim(self):
        return self.params.arrays["w3"].shape[1]

    def reinit_embedding(self, input_dim, rng):
        """Fresh embedding layer for a new input width; body untouched."""
        h1 = self.params.arrays["w1"].shape[1]
        self.params.arrays["w1"] = glorot(rng, input_dim, h1, (input_dim, h1))
        self.params.arrays["b1"] = np.zeros(h1)
        self.params.dims["input_dim"] = input_dim
        self.params.bump()

    def forward(self, images):
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"image width {x.shape[-1]} != encoder input_dim {self.input_dim}")
        p = self.params.arrays
        a1 = _act(self.activation, x @ p["w1"] + p["b1"])
        a2 = _act(self.activation, a1 @ p["w2"] + p["b2"])
        out = a2 @ p["w3"] + p["b3"]
        trace = ForwardTrace(self, self.params.version, {"x": x, "a1": a1, "a2": a2, "single": single})
        return (out[0] if single else out), trace

    def backward(self, trace, upstream):
        _check_trace(trace, self)
        c = trace.cache
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if g.shape != (c["x"].shape[0], self.out_dim):
            raise ShapeError(f"upstream gradient shape {g.shape} does not match trace")
        p = self.params.arrays
        grads = {"w3": c["a2"].T @ g, "b3": g.sum(axis=0)}
        dz2 = (g @ p["w3"].T) * _act_grad(self.activation, c["a2"])
        grads["w2"] = c["a1"].T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["w2"].T) * _act_grad(self.activation, c["a1"])
        grads["w1"] = c["x"].T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        dx = dz1 @ p["w1"].T
        return {n: grads[n] for n in p}, (dx[0] if c["single"] else dx)


# --------------------------------------------------------------------------
# tabular encoder


@dataclass
class TabularLayout:
    """Feature schema, standardization statistics and the token order.

    Tokens: one per schema feature (continuous value or categorical lookup),
    then one missing-indicator token per continuous feature.
    """

    schema: TableSchema
    mean: np.ndarray  # per continuous feature
    std: np.ndarray

    @property
    def cont_idx(self):
        return np.array([j for j, k in enumerate(self.schema.kinds) if k != CATEGORICAL], dtype=np.int64)

    @property
    def cat_idx(self):
        return np.array([j for j, k in enumerate(self.schema.kinds) if k == CATEGORICAL], dtype=np.int64)

    @property
    def num_features(self):
        return len(self.schema)

    @property
    def num_tokens(self):
        return len(self.schema) + len(self.cont_idx)

    def token_names(self):
        names = list(self.schema.names)
        names += [f"{self.schema.names[j]}__missing" for j in self.cont_idx]
        return names

    @classmethod
    def fit(cls, schema, meta, missing):
        """Per-feature mean/std over observed entries of the continuous columns."""
        meta = np.atleast_2d(np.asarray(meta, dtype=np.float64))
        missing = np.atleast_2d(np.asarray(missing, dtype=bool))
        cont = [j for j, k in enumerate(schema.kinds) if k != CATEGORICAL]
        mean = np.zeros(len(cont))
        std = np.ones(len(cont))
        for i, j in enumerate(cont):
            obs = meta[~missing[:, j], j]
            if obs.size:
                mean[i] = obs.mean()
                s = obs.std()
                std[i] = s if s > 1e-12 else 1.0
        return cls(schema, mean, std)

    def to_json(self):
        return {"features": self.schema.to_json(), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(TableSchema.from_json(d["features"]), np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64))


class TabularEncoder:
    """Feature tokenizer, one single-head self-attention block, mean pool, linear to D."""

    kind = "tabular"

    def __init__(self, params: EncoderParams, layout: TabularLayout, attention=True):
        self.params = params
        self.layout = layout
        self.attention = attention

    @staticmethod
    def _embedding_arrays(layout, token_dim, rng):
        d = token_dim
        n_cont = len(layout.cont_idx)
        a = {
            "cont_w": glorot(rng, 1, d, (n_cont, d)),
            "cont_b": glorot(rng, 1, d, (n_cont, d)),
            "ind_w": glorot(rng, 1, d, (n_cont, d)),
            "ind_b": glorot(rng, 1, d, (n_cont, d)),
        }
        for j in layout.cat_idx:
            levels = layout.schema.levels[j]
            # last row is the dedicated missing category
            a[f"cat{j}"] = glorot(rng, 1, d, (levels + 1, d))
        return a

    @classmethod
    def init(cls, layout: TabularLayout, token_dim=16, out_dim=32, rng=None, attention=True):
        d = token_dim
        a = cls._embedding_arrays(layout, d, rng)
        emb = tuple(a)
        a.update({
            "wq": glorot(rng, d, d, (d, d)),
            "wk": glorot(rng, d, d, (d, d)),
            "wv": glorot(rng, d, d, (d, d)),
            "wo": glorot(rng, d, d, (d, d)),
            "out_w": glorot(rng, d, out_dim, (d, out_dim)),
            "out_b": np.zeros(out_dim),
        })
        dims = {"num_features": layout.num_features, "token_dim": d, "out_dim": out_dim}
        return cls(EncoderParams(a, emb, dims), layout, attention)

    @property
    def token_dim(self):
        return self.params.arrays["wq"].shape[0]

    @property
    def out_dim(self):
        return self.params.arrays["out_w"].shape[1]

    def reinit_embedding(self, layout: TabularLayout, rng):
        """Swap in a new feature layout with freshly initialized token embeddings."""
        old = self.params.arrays
        fresh = self._embedding_arrays(layout, self.token_dim, rng)
        arrays = dict(fresh)
        arrays.update({n: old[n] for n in self.params.body_names})
        self.params.arrays = arrays
        self.params.embedding_names = tuple(fresh)
        self.params.dims["num_features"] = layout.num_features
        self.params.bump()
        self.layout = layout

    def _tokens(self, meta, missing):
        lay = self.layout
        p = self.params.arrays
        n = meta.shape[0]
        cont, cat = lay.cont_idx, lay.cat_idx
        s = (meta[:, cont] - lay.mean) / lay.std
        m_cont = missing[:, cont]
        s = np.where(m_cont, 0.0, s)
        ind = m_cont.astype(np.float64)
        T = lay.num_tokens
        tokens = np.empty((n, T, self.token_dim))
        tokens[:, cont] = s[:, :, None] * p["cont_w"] + p["cont_b"]
        codes = {}
        for j in cat:
            levels = lay.schema.levels[j]
            raw = meta[:, j]
            code = np.where(missing[:, j], levels, raw)
            bad = ~missing[:, j] & ((raw != np.round(raw)) | (raw < 0) | (raw >= levels))
            if bad.any():
                r = int(np.flatnonzero(bad)[0])
                raise EncodingError(f"unknown category code {raw[r]!r} for feature {lay.schema.names[j]} (row {r})")
            code = code.astype(np.int64)
            codes[j] = code
            tokens[:, j] = p[f"cat{j}"][code]
        tokens[:, lay.num_features:] = ind[:, :, None] * p["ind_w"] + p["ind_b"]
        return tokens, s, ind, codes

    def forward(self, meta, missing):
        meta = np.asarray(meta, dtype=np.float64)
        missing = np.asarray(missing, dtype=bool)
        single = meta.ndim == 1
        meta, missing = np.atleast_2d(meta), np.atleast_2d(missing)
        F = self.layout.num_features
        if meta.shape[1] != F or missing.shape != meta.shape:
            raise ShapeError(f"expected {F} features with matching mask, got {meta.shape} / {missing.shape}")
        p = self.params.arrays
        tokens, s, ind, codes = self._tokens(meta, missing)
        n, T, d = tokens.shape
        v = tokens @ p["wv"]
        if self.attention:
            q = tokens @ p["wq"]
            k = tokens @ p["wk"]
            scores = q @ k.transpose(0, 2, 1) / math.sqrt(d)
            scores -= scores.max(axis=2, keepdims=True)
            A = np.exp(scores)
            A /= A.sum(axis=2, keepdims=True)
            att = A @ v
        else:
            q = k = None
            A = np.broadcast_to(np.eye(T), (n, T, T))
            att = v
        o = att @ p["wo"]
        pooled = o.mean(axis=1)
        out = pooled @ p["out_w"] + p["out_b"]
        cache = {"tokens": tokens, "s": s, "ind": ind, "codes": codes, "missing": missing,
                 "q": q, "k": k, "v": v, "A": A, "att": att, "pooled": pooled, "single": single}
        trace = ForwardTrace(self, self.params.version, cache)
        return (out[0] if single else out), trace

    def backward(self, trace, upstream):
        _check_trace(trace, self)
        c = trace.cache
        lay = self.layout
        p = self.params.arrays
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        tokens = c["tokens"]
        n, T, d = tokens.shape
        if g.shape != (n, self.out_dim):
            raise ShapeError(f"upstream gradient shape {g.shape} does not match trace")
        grads = {"out_w": c["pooled"].T @ g, "out_b": g.sum(axis=0)}
        dpooled = g @ p["out_w"].T
        do = np.broadcast_to(dpooled[:, None, :] / T, (n, T, d))
        grads["wo"] = np.einsum("ntd,nte->de", c["att"], do)
        datt = do @ p["wo"].T
        if self.attention:
            A = c["A"]
            dA = datt @ c["v"].transpose(0, 2, 1)
            dv = A.transpose(0, 2, 1) @ datt
            dscores = A * (dA - np.sum(dA * A, axis=2, keepdims=True)) / math.sqrt(d)
            dq = dscores @ c["k"]
            dk = dscores.transpose(0, 2, 1) @ c["q"]
            grads["wq"] = np.einsum("ntd,nte->de", tokens, dq)
            grads["wk"] = np.einsum("ntd,nte->de", tokens, dk)
            dtok = dq @ p["wq"].T + dk @ p["wk"].T
        else:
            dv = datt
            grads["wq"] = np.zeros_like(p["wq"])
            grads["wk"] = np.zeros_like(p["wk"])
            dtok = np.zeros_like(tokens)
        grads["wv"] = np.einsum("ntd,nte->de", tokens, dv)
        dtok = dtok + dv @ p["wv"].T

        cont, F = lay.cont_idx, lay.num_features
        dcont = dtok[:, cont]
        grads["cont_w"] = np.einsum("nj,njd->jd", c["s"], dcont)
        grads["cont_b"] = dcont.sum(axis=0)
        dind = dtok[:, F:]
        grads["ind_w"] = np.einsum("nj,njd->jd", c["ind"], dind)
        grads["ind_b"] = dind.sum(axis=0)
        for j, code in c["codes"].items():
            gt = np.zeros_like(p[f"cat{j}"])
            np.add.at(gt, code, dtok[:, j])
            grads[f"cat{j}"] = gt
        # gradient w.r.t. the raw continuous values; zero for missing and categorical entries
        dmeta = np.zeros((n, F))
        ds = np.einsum("njd,jd->nj", dcont, p["cont_w"]) / lay.std
        dmeta[:, cont] = np.where(c["missing"][:, cont], 0.0, ds)
        return {name: grads[name] for name in p}, (dmeta[0] if c["single"] else dmeta)


# --------------------------------------------------------------------------
# spec-level entry points


def image_forward(enc: ImageEncoder, image):
    return enc.forward(image)


def tabular_forward(enc: TabularEncoder, features, missing_mask):
    return enc.forward(features, missing_mask)


def encoder_backward(trace: ForwardTrace, upstream):
    """Parameter gradients (dict) and input gradient for a forward trace."""
    return trace.encoder.backward(trace, upstream)


# --------------------------------------------------------------------------
# encoder checkpoint files


def encoder_manifest(enc):
    m = {
        "format_version": CHECKPOINT_VERSION,
        "kind": enc.kind,
        "dims": enc.params.dims,
        "partition": enc.params.partition_table(),
    }
    if enc.kind == "image":
        m["activation"] = enc.activation
    else:
        m["layout"] = enc.layout.to_json()
        m["attention"] = enc.attention
    return m


def encoder_from_manifest(m, flat, offset=0):
    """Rebuild an encoder from its manifest entry and a flat float array."""
    arrays, emb = {}, []
    try:
        for entry in m["partition"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            start = offset + int(entry["offset"])
            if start + size > flat.size:
                raise CheckpointError(f"parameter data truncated at {entry['name']}")
            arrays[entry["name"]] = flat[start:start + size].reshape(entry["shape"]).copy()
            if entry["partition"] == EMBEDDING:
                emb.append(entry["name"])
        params = EncoderParams(arrays, tuple(emb), dict(m["dims"]))
        if m["kind"] == "image":
            return ImageEncoder(params, m.get("activation", "tanh"))
        if m["kind"] == "tabular":
            return TabularEncoder(params, TabularLayout.from_json(m["layout"]), m.get("attention", True))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed encoder manifest: {exc}") from None
    raise CheckpointError(f"unknown encoder kind {m.get('kind')!r}")


def save_encoder(enc, dir_path, dtype="<f8"):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    m = encoder_manifest(enc)
    m["dtype"] = dtype
    m["total"] = int(enc.params.size())
    fname = "params.f32" if dtype == "<f4" else "params.f64"
    m["params_file"] = fname
    write_floats(d / fname, enc.params.arrays.values(), dtype)
    atomic_write_text(d / "manifest.json", json.dumps(m, indent=2, sort_keys=True) + "\n")


def load_encoder(dir_path):
    d = Path(dir_path)
    try:
        m = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read encoder manifest: {exc}") from None
    if m.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported encoder format_version {m.get('format_version')!r}")
    flat = read_floats(d / m["params_file"], m["dtype"])
    if flat.size != m["total"]:
        raise CheckpointError(f"params file holds {flat.size} values, manifest declares {m['total']}")
    return encoder_from_manifest(m, flat)
