"""AdamW training loops for pre-training and embedding-only continual pre-training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoders import TabularLayout, set_trainable
from .errors import ConfigError, DegenerateVectorError, DivergenceError, ShapeError
from .iohelpers import atomic_write_text
from .model import DatasetArrays, ModelConfig, ModelState, init_model, joint_schema
from .nested_loss import LossConfig, PatientBatchTensors, flat_loss, total_loss
from .rng import make_rng
from .sampling import SamplerConfig, sample_epoch
from .synthdata import Dataset

FREEZE_MODES = ("all", "embedding_only")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    freeze_mode: str = "all"
    seed: int = 0

    def validate(self, allow_zero_epochs=False):
        if self.epochs < (0 if allow_zero_epochs else 1):
            raise ConfigError(f"epochs must be >= {0 if allow_zero_epochs else 1}, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps_opt <= 0:
            raise ConfigError("invalid optimizer hyper-parameters")
        if self.freeze_mode not in FREEZE_MODES:
            raise ConfigError(f"freeze_mode must be one of {FREEZE_MODES}")


def continual_defaults(**overrides):
    """Continual stage settings: embedding-only, 100 epochs, 64-patient batches."""
    base = TrainConfig(epochs=100, freeze_mode="embedding_only", sampler=SamplerConfig(batch_patients=64))
    return replace(base, **overrides)


def trainable_keys(state: ModelState, mode: str):
    keys = set()
    for prefix, params in state.modules():
        if prefix == "fusion":
            keys.update(f"fusion.{n}" for n in params.names)
            continue
        keys.update(f"{prefix}.{n}" for n, on in set_trainable(params, mode).items() if on)
    return keys


def adamw_update(p, g, m, v, t, cfg):
    """In-place AdamW update of ``p`` and its moments ``m``, ``v`` at step ``t`` (1-based)."""
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    p -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.eps_opt) + cfg.weight_decay * p)


def optimizer_step(state: ModelState, grads: dict, cfg: TrainConfig, trainable=None) -> ModelState:
    """One AdamW update (bias-corrected moments, decoupled weight decay), in place.

    Keys outside ``trainable`` keep both their values and their moments.
    """
    if trainable is None:
        trainable = trainable_keys(state, cfg.freeze_mode)
    state.step += 1
    for key, p in state.named_arrays():
        if key not in trainable or key not in grads:
            continue
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
        m, v = state.moments[key]
        adamw_update(p, g, m, v, state.step, cfg)
    for _, params in state.modules():
        params.bump()
    return state


def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def batch_gradients(state: ModelState, data: DatasetArrays, batch, loss_cfg: LossConfig):
    """Forward and backward for one batch; returns ``(inner, outer, total, grads)``."""
    rows, counts = [], []
    for pi, sel in batch.entries:
        rows.append(data.offsets[pi] + np.asarray(sel, dtype=np.int64))
        counts.append(len(sel))
    rows = np.concatenate(rows)
    W, tr_img = state.image.forward(data.images[rows])
    cuts = np.cumsum(counts)[:-1]
    if state.config.architecture == "flat":
        G, tr_joint = state.joint.forward(*data.joint_meta(rows))
        loss, dW, dG = flat_loss(W, G, loss_cfg.tau)
        grads = _prefixed("image", state.image.backward(tr_img, dW)[0])
        grads.update(_prefixed("joint", state.joint.backward(tr_joint, dG)[0]))
        return loss, 0.0, loss, grads

    pidx = np.array(batch.patient_indices)
    H, tr_les = state.lesion.forward(data.lesion_meta[rows], data.lesion_missing[rows])
    X, tr_pat = state.patient.forward(data.patient_meta[pidx], data.patient_missing[pidx])
    tensors = PatientBatchTensors(np.split(W, cuts), np.split(H, cuts), X)
    res = total_loss(tensors, loss_cfg, state.fusion)
    grads = _prefixed("image", state.image.backward(tr_img, np.concatenate(res.dW))[0])
    grads.update(_prefixed("lesion", state.lesion.backward(tr_les, np.concatenate(res.dH))[0]))
    grads.update(_prefixed("patient", state.patient.backward(tr_pat, res.dX)[0]))
    grads["fusion.weight"] = res.dweight
    grads["fusion.bias"] = res.dbias
    return res.inner, res.outer, res.total, grads


def _run_epochs(state, dataset, cfg: TrainConfig, trainable, log=None):
    data = DatasetArrays(dataset)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(3)
        batches = sample_epoch(dataset, cfg.sampler, epoch)
        for b, batch in enumerate(batches):
            try:
                inner, outer, total, grads = batch_gradients(state, data, batch, cfg.loss)
            except DegenerateVectorError as exc:
                # a collapsed or non-finite embedding row
                raise DivergenceError(f"degenerate embedding at epoch {epoch}, batch {b}: {exc}",
                                      epoch=epoch, batch=b) from None
            if not (math.isfinite(total) and all(np.all(np.isfinite(g)) for g in grads.values())):
                raise DivergenceError(f"non-finite loss or gradient at epoch {epoch}, batch {b}",
                                      epoch=epoch, batch=b)
            optimizer_step(state, grads, cfg, trainable)
            sums += (inner, outer, total)
        means = sums / len(batches)
        row = {"epoch": epoch, "loss_inner": float(means[0]),
               "loss_outer": float(means[1]), "loss_total": float(means[2])}
        history.append(row)
        if log is not None:
            log(row)
    return history


def pretrain(dataset: Dataset, init_seed: int, cfg: TrainConfig, log=None):
    """Train a fresh model on ``dataset``; returns ``(state, history)``.

    ``history`` holds one dict per epoch with the batch-mean inner, outer and
    total losses. The flat architecture reports its single loss as both inner
    and total and 0 as outer.
    """
    cfg.validate()
    state = init_model(dataset, cfg.model, init_seed)
    history = _run_epochs(state, dataset, cfg, trainable_keys(state, cfg.freeze_mode), log)
    return state, history


REINIT_MODES = ("always", "if_incompatible")


def continual_pretrain(state: ModelState, target: Dataset, cfg: TrainConfig, log=None, reinit="always"):
    """Adapt a trained model to ``target`` updating only embedding layers and fusion.

    With ``reinit="always"`` every embedding layer is freshly initialized from
    ``cfg.seed`` for the target; ``"if_incompatible"`` only replaces layers whose
    input layout no longer fits (different feature schema or image width) and
    fine-tunes the rest from their trained values. Standardization statistics
    are refit on the target. Returns ``(state, history)``; the input state is
    not modified.
    """
    cfg.validate(allow_zero_epochs=True)
    if reinit not in REINIT_MODES:
        raise ConfigError(f"reinit must be one of {REINIT_MODES}")
    new = state.copy()
    if cfg.epochs == 0:
        return new, []
    D = state.config.embed_dim
    for enc in new.encoders().values():
        if enc.out_dim != D:
            raise ShapeError(f"encoder output {enc.out_dim} != model embed_dim {D}")
    rng = make_rng(cfg.seed, "continual-init")
    data = DatasetArrays(target)
    s = target.schema
    if reinit == "always" or s.image_dim != new.image.input_dim:
        new.image.reinit_embedding(s.image_dim, rng)
    if new.config.architecture == "nested":
        pairs = [("lesion", TabularLayout.fit(s.lesion, data.lesion_meta, data.lesion_missing)),
                 ("patient", TabularLayout.fit(s.patient, data.patient_meta, data.patient_missing))]
    else:
        pairs = [("joint", TabularLayout.fit(joint_schema(s), *data.joint_meta()))]
    for name, layout in pairs:
        enc = getattr(new, name)
        if reinit == "always" or layout.schema != enc.layout.schema:
            enc.reinit_embedding(layout, rng)
        else:
            enc.layout = layout
            enc.params.bump()
    # a new optimization stage: fresh moments for everything that will be trained
    trainable = trainable_keys(new, cfg.freeze_mode)
    new.reset_moments(trainable)
    new.step = 0
    history = _run_epochs(new, target, cfg, trainable, log)
    return new, history


def write_history(history, path):
    lines = ["epoch,loss_inner,loss_outer,loss_total"]
    for row in history:
        lines.append(f"{row['epoch']},{row['loss_inner']!r},{row['loss_outer']!r},{row['loss_total']!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
