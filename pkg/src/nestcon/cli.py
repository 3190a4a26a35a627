"""Command-line entry point: file-based pipeline stages driven by one config.

Configuration is a YAML or JSON document with the sections listed in
``DEFAULTS``; ``--set section.key=value`` overrides it and ``--seed`` wins over
both. Every stage draws its seed as ``derive_seed(seed, tag)`` with its own tag
(see ``STAGE_TAGS``), so stages can be rerun in isolation.

Exit codes: 0 success, 2 validation error, 3 runtime error, 4 divergence.
Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    EncodingError,
    IngestError,
    LowShotError,
    NestconError,
    ShapeError,
    SplitError,
)
from .evaluation import (
    MODALITIES,
    ProbeConfig,
    build_features,
    eval_crossmodal,
    knn_classify,
    linear_probe,
    write_rankings,
    write_report,
)
from .importance import dataset_importance, write_importance
from .iohelpers import atomic_write_text, directory_digest
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .nested_loss import LossConfig
from .retrieval import build_pools, load_reference_pools, save_reference_pools, similarity_diagnostics, write_diagnostics
from .rng import derive_seed, make_rng
from .sampling import SamplerConfig
from .synthdata import GenConfig, SplitSpec, generate, load_dataset, save_dataset, split, subsample_labels
from .trainer import REINIT_MODES, TrainConfig, continual_defaults, continual_pretrain, pretrain, write_history

STAGE_TAGS = ("gen", "init", "sampler", "continual", "split", "low-shot", "diagnostics")


def _fields(cls, skip=("seed",)):
    inst = cls()
    return {f.name: copy.deepcopy(getattr(inst, f.name)) for f in fields(cls)
            if f.name not in skip and f.name not in ("sampler", "loss", "model")}


DEFAULTS = {
    "seed": 0,
    "gen": _fields(GenConfig),
    "train": _fields(TrainConfig, skip=("seed", "freeze_mode")),
    "sampler": _fields(SamplerConfig),
    "loss": _fields(LossConfig),
    "model": _fields(ModelConfig),
    "continual": {"epochs": 100, "learning_rate": 1e-4, "weight_decay": 0.01, "batch_patients": 64,
                  "reinit": "always"},
    "split": {"mode": "lesion_level", "train_fraction": 0.9},
    "probe": {**_fields(ProbeConfig), "features": list(MODALITIES), "low_shot": 1.0},
    "knn": {"k": 20},
    "retrieval": {"variant": "I2L2P", "ks": [1, 5, 10]},
    "diagnostics": {"n_neg": 10},
    "checkpoint": {"dtype": "<f8"},
}

# keys whose default is None still need a type
_OPTIONAL_INT = {("gen", "projection_seed"), ("gen", "informative_feature")}


# ---------------------------------------------------------------------------
# configuration


def _coerce(where, default, value, optional_int=False):
    if optional_int:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{where} must be an integer or null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot ("1e-3") as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        if default and isinstance(default[0], int):
            return [_coerce(f"{where}[{i}]", default[0], v) for i, v in enumerate(value)]
        return list(value)
    raise ConfigError(f"{where}: unsupported value")


def merge_config(doc, overrides=()):
    """Defaults <- document <- ``key=value`` overrides, with type and key checks."""
    cfg = copy.deepcopy(DEFAULTS)
    for section, body in (doc or {}).items():
        if section == "seed":
            cfg["seed"] = _coerce("seed", 0, body)
            continue
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        for key, value in body.items():
            _assign(cfg, f"{section}.{key}", value)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _assign(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def _assign(cfg, dotted, value):
    if dotted == "seed":
        cfg["seed"] = _coerce("seed", 0, value)
        return
    section, _, key = dotted.partition(".")
    if section not in cfg or section == "seed" or key not in cfg[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    cfg[section][key] = _coerce(dotted, DEFAULTS[section][key], value,
                                (section, key) in _OPTIONAL_INT)


def load_config(path, overrides=(), seed=None):
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
    cfg = merge_config(doc, overrides)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def stage_seed(cfg, tag):
    return derive_seed(cfg["seed"], tag)


def gen_config(cfg):
    g = dict(cfg["gen"])
    g["lesions_per_patient_range"] = tuple(g["lesions_per_patient_range"])
    return GenConfig(seed=stage_seed(cfg, "gen"), **g)


def train_config(cfg):
    model = cfg["model"]
    return TrainConfig(
        **cfg["train"],
        sampler=SamplerConfig(seed=stage_seed(cfg, "sampler"), **cfg["sampler"]),
        loss=LossConfig(**cfg["loss"]),
        model=ModelConfig(**{**model, "hidden": tuple(model["hidden"])}),
    )


def continual_config(cfg):
    c = cfg["continual"]
    base = train_config(cfg)
    return continual_defaults(
        epochs=c["epochs"], learning_rate=c["learning_rate"], weight_decay=c["weight_decay"],
        sampler=replace(base.sampler, batch_patients=c["batch_patients"]), loss=base.loss,
        model=base.model, seed=stage_seed(cfg, "continual"),
    )


def split_spec(cfg):
    return SplitSpec(cfg["split"]["mode"], cfg["split"]["train_fraction"], stage_seed(cfg, "split"))


def probe_config(cfg):
    p = {k: v for k, v in cfg["probe"].items() if k not in ("features", "low_shot")}
    return ProbeConfig(**p)


def validate_config(cfg):
    """Build every stage config once so bad values fail before any work."""
    gen_config(cfg).validate()
    train_config(cfg).validate()
    continual_config(cfg).validate(allow_zero_epochs=True)
    split_spec(cfg).validate()
    probe_config(cfg)
    if cfg["continual"]["reinit"] not in REINIT_MODES:
        raise ConfigError(f"continual.reinit must be one of {REINIT_MODES}")
    if not 0.0 < cfg["probe"]["low_shot"] <= 1.0:
        raise ConfigError("probe.low_shot must be in (0, 1]")
    if cfg["probe"]["epochs"] < 1:
        raise ConfigError("probe.epochs must be >= 1")
    if cfg["knn"]["k"] < 1 or cfg["diagnostics"]["n_neg"] < 1:
        raise ConfigError("knn.k and diagnostics.n_neg must be >= 1")
    if not cfg["retrieval"]["ks"] or min(cfg["retrieval"]["ks"]) < 1:
        raise ConfigError("retrieval.ks must be a non-empty list of positive integers")
    if cfg["retrieval"]["variant"] not in ("I2I", "I2L", "I2L2P"):
        raise ConfigError("retrieval.variant must be I2I, I2L or I2L2P")
    if cfg["checkpoint"]["dtype"] not in ("<f8", "<f4"):
        raise ConfigError("checkpoint.dtype must be '<f8' or '<f4'")


# ---------------------------------------------------------------------------
# commands


def _features(args, cfg, model):
    if args.features is not None:
        return tuple(f for f in args.features.split(",") if f)
    flags = tuple(cfg["probe"]["features"])
    if model.config.architecture == "flat":
        # flat models have no patient embedding; the configured default drops it
        flags = tuple(f for f in flags if f != "patient")
    return flags


def _base_report(args, cfg, command):
    return {"command": command, "seed": cfg["seed"], "version": __version__,
            "checkpoint_sha256": directory_digest(args.ckpt), "data_sha256": directory_digest(args.data)}


def _eval_sets(args, cfg):
    """Train/eval datasets: an explicit held-out directory, else a split of ``--data``."""
    data = load_dataset(args.data)
    if getattr(args, "eval_data", None):
        return data, load_dataset(args.eval_data), {"mode": "external", "eval_sha256": directory_digest(args.eval_data)}
    spec = split_spec(cfg)
    train, held = split(data, spec)
    return train, held, {"mode": spec.mode, "train_fraction": spec.train_fraction, "seed": spec.seed}


def _classify(args, cfg, method, pools=None):
    model = load_checkpoint(args.ckpt)
    flags = _features(args, cfg, model)
    low_shot = cfg["probe"]["low_shot"] if args.low_shot is None else args.low_shot
    if not 0.0 < low_shot <= 1.0:
        raise ConfigError("--low-shot must be in (0, 1]")
    train, held, split_info = _eval_sets(args, cfg)
    train = subsample_labels(train, low_shot, stage_seed(cfg, "low-shot"))
    variant = cfg["retrieval"]["variant"]
    # with pools both sides are image-only: their metadata is retrieved
    ftrain = build_features(model, train, flags, pools=pools, variant=variant)
    fheld = build_features(model, held, flags, pools=pools, variant=variant)
    if method == "probe":
        _, metrics = linear_probe(ftrain, fheld, probe_config(cfg))
    else:
        _, metrics = knn_classify(ftrain, fheld, cfg["knn"]["k"])
    report = _base_report(args, cfg, args.command)
    report.update({"features": list(ftrain.flags), "low_shot": low_shot, "split": split_info,
                   "num_train_labeled": int(ftrain.labeled.sum()), "num_eval": int(len(fheld.labels)),
                   "metrics": metrics.as_dict()})
    if method == "probe":
        report["probe"] = asdict(probe_config(cfg))
    else:
        report["k"] = cfg["knn"]["k"]
    if pools is not None:
        report["variant"] = variant
        report["pools_sha256"] = directory_digest(args.pools)
    write_report(Path(args.out) / "report.json", report)
    return report


def cmd_gen(args, cfg):
    ds = generate(gen_config(cfg))
    save_dataset(ds, args.out)


def _history_logger(args):
    if not args.verbose:
        return None
    return lambda row: print(json.dumps(row), file=sys.stderr)


def cmd_pretrain(args, cfg):
    data = load_dataset(args.data)
    state, history = pretrain(data, stage_seed(cfg, "init"), train_config(cfg), log=_history_logger(args))
    out = Path(args.out)
    save_checkpoint(state, out, cfg["checkpoint"]["dtype"])
    write_history(history, out / "history.csv")


def cmd_continual(args, cfg):
    state = load_checkpoint(args.ckpt)
    target = load_dataset(args.data)
    new, history = continual_pretrain(state, target, continual_config(cfg), log=_history_logger(args),
                                      reinit=cfg["continual"]["reinit"])
    out = Path(args.out)
    save_checkpoint(new, out, cfg["checkpoint"]["dtype"])
    write_history(history, out / "history.csv")


def _embedding_csv(ids, lead, M, prefix):
    head = ",".join(lead + [f"{prefix}{j}" for j in range(M.shape[1])])
    rows = [",".join([*map(str, key), *(repr(float(v)) for v in row)]) for key, row in zip(ids, M)]
    return "\n".join([head] + rows) + "\n"


def cmd_embed(args, cfg):
    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    emb = model.embed(data)
    out = Path(args.out)
    keys = [(les.lesion_id, data.patients[pi].patient_id) for pi, les in data.lesions()]
    atomic_write_text(out / "images.csv", _embedding_csv(keys, ["lesion_id", "patient_id"], emb["W"], "w"))
    if model.config.architecture == "nested":
        atomic_write_text(out / "lesions.csv", _embedding_csv(keys, ["lesion_id", "patient_id"], emb["H"], "h"))
        pids = [(p.patient_id,) for p in data.patients]
        atomic_write_text(out / "patients.csv", _embedding_csv(pids, ["patient_id"], emb["X"], "x"))
    else:
        atomic_write_text(out / "joint.csv", _embedding_csv(keys, ["lesion_id", "patient_id"], emb["G"], "g"))


def cmd_pools(args, cfg):
    model = load_checkpoint(args.ckpt)
    if model.config.architecture != "nested":
        raise ConfigError("reference pools need a nested checkpoint")
    save_reference_pools(build_pools(load_dataset(args.data), model), args.out)


def cmd_probe(args, cfg):
    _classify(args, cfg, "probe")


def cmd_knn(args, cfg):
    _classify(args, cfg, "knn")


def cmd_retrieve(args, cfg):
    if args.variant is not None:
        cfg["retrieval"]["variant"] = args.variant
    validate_config(cfg)
    _classify(args, cfg, args.method, pools=load_reference_pools(args.pools))


def cmd_diagnose(args, cfg):
    model = load_checkpoint(args.ckpt)
    if model.config.architecture != "nested":
        raise ConfigError("diagnostics compare image and lesion embeddings of a nested checkpoint")
    emb = model.embed(load_dataset(args.data))
    diag = similarity_diagnostics(emb["W"], emb["H"], make_rng(stage_seed(cfg, "diagnostics")),
                                  cfg["diagnostics"]["n_neg"])
    write_diagnostics(diag, args.out)
    report = _base_report(args, cfg, "diagnose")
    p = diag.percentiles
    report["percentiles"] = {"levels": list(p.levels), "matching": [float(v) for v in p.matching],
                             "non_matching": [float(v) for v in p.non_matching]}
    write_report(Path(args.out) / "report.json", report)


def cmd_rankeval(args, cfg):
    model = load_checkpoint(args.ckpt)
    ks = tuple(int(k) for k in args.ks.split(",")) if args.ks else tuple(cfg["retrieval"]["ks"])
    if not ks or min(ks) < 1:
        raise ConfigError("--ks must list positive integers")
    rep, ids = eval_crossmodal(model, load_dataset(args.data), args.direction, ks)
    out = Path(args.out)
    write_rankings(rep, ids, out / "rankings.csv")
    report = _base_report(args, cfg, "rankeval")
    report.update({"direction": args.direction, "metrics": rep.as_dict(), "num_queries": len(ids)})
    write_report(out / "report.json", report)


def cmd_importance(args, cfg):
    model = load_checkpoint(args.ckpt)
    rep = dataset_importance(model, load_dataset(args.data), args.encoder)
    write_importance(rep, Path(args.out) / "importance.csv")


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "continual": cmd_continual, "embed": cmd_embed,
    "pools": cmd_pools, "probe": cmd_probe, "knn": cmd_knn, "retrieve": cmd_retrieve,
    "diagnose": cmd_diagnose, "rankeval": cmd_rankeval, "importance": cmd_importance,
}


# ---------------------------------------------------------------------------
# argument parsing and error reporting


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=20 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses to stderr")

    p = _Parser(prog="nestcon", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, ckpt=False, data=True):
        sp = sub.add_parser(name, parents=[common], help=help_)
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint directory")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    add("gen", "generate a synthetic dataset", data=False)
    add("pretrain", "pre-train a model on a dataset")
    add("continual", "adapt the embedding layers of a checkpoint to a target dataset", ckpt=True)
    add("embed", "write per-lesion and per-patient embeddings", ckpt=True)
    add("pools", "build reference retrieval pools from a dataset", ckpt=True)
    for name, help_ in (("probe", "linear probe on frozen embeddings"), ("knn", "kNN on frozen embeddings")):
        sp = add(name, help_, ckpt=True)
        _eval_flags(sp)
    sp = add("retrieve", "probe with metadata retrieved from reference pools", ckpt=True)
    _eval_flags(sp)
    sp.add_argument("--pools", required=True, help="reference pool directory")
    sp.add_argument("--variant", choices=("I2I", "I2L", "I2L2P"))
    sp.add_argument("--method", choices=("probe", "knn"), default="probe")
    add("diagnose", "cosine similarity percentiles and histograms", ckpt=True)
    sp = add("rankeval", "image/metadata retrieval ranking metrics", ckpt=True)
    sp.add_argument("--direction", choices=("img2meta", "meta2img"), default="img2meta")
    sp.add_argument("--ks", help="comma separated cut-offs, e.g. 1,5,10")
    sp = add("importance", "attention feature importance of a metadata encoder", ckpt=True)
    sp.add_argument("--encoder", choices=("lesion", "patient", "joint"), default="lesion")
    return p


def _eval_flags(sp):
    sp.add_argument("--eval-data", help="held-out dataset; default splits --data")
    sp.add_argument("--features", help=f"comma separated subset of {','.join(MODALITIES)}")
    sp.add_argument("--low-shot", type=float, help="fraction of training labels kept")


VALIDATION_ERRORS = (ConfigError, IngestError, CheckpointError, SplitError, LowShotError, ShapeError,
                     EncodingError)


def exit_code(exc):
    if isinstance(exc, DivergenceError):
        return 4
    if isinstance(exc, VALIDATION_ERRORS):
        return 2
    return 3


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.set, args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg)
    else:
        COMMANDS[args.command](args, cfg)


def main(argv=None):
    try:
        run(argv)
    except NestconError as exc:
        return _fail(exc, exit_code(exc))
    except (OSError, ValueError, np.linalg.LinAlgError) as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
