"""JSON run configuration, validation, and shipped presets."""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import CONTINUOUS, ONE_HOT, ModalityRegistry, ModalitySpec, SynthConfig, TaskSpec
from .errors import ConfigError, M3Error
from .losses import LossConfig
from .predictor import MoEConfig
from .trainer import TrainConfig

SEED_ENV = "M3JEPA_SEED"


@dataclass
class EvalOptions:
    ks: list = field(default_factory=lambda: [1, 5, 10])
    mode: str = "cosine"
    matrix_cap: int = 64
    split: str = "test"


@dataclass
class Paths:
    dataset: str = "dataset.m3ds"
    checkpoint: str = "model.m3jp"
    log: str = "train.jsonl"
    output: str = "out"


@dataclass
class RunConfig:
    modalities: list
    tasks: list
    synth: SynthConfig
    moe: MoEConfig
    predictor: str
    loss: LossConfig
    train: TrainConfig
    eval: EvalOptions
    paths: Paths
    adapters: list
    doc: dict

    @property
    def registry(self):
        return ModalityRegistry(self.modalities)

    def to_doc(self):
        return copy.deepcopy(self.doc)


_MOE_KEYS = {"predictor", "N", "K", "L", "h", "r", "dropout_p"}
_TOP_KEYS = {"modalities", "tasks", "synth", "moe", "loss", "train", "eval", "paths",
             "adapters", "name"}


def _build(cls, doc, path, exclude=()):
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", path)
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", path)
    try:
        return cls(**doc)
    except M3Error as exc:
        raise ConfigError(str(exc), path) from None
    except TypeError as exc:
        raise ConfigError(str(exc), path) from None


def parse_config(doc) -> RunConfig:
    """Validate every cross-reference before any work starts."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "<root>")
    for key in ("modalities", "tasks"):
        if key not in doc:
            raise ConfigError("missing", key)

    mods = []
    for i, m in enumerate(doc["modalities"]):
        mods.append(_build(ModalitySpec, m, f"modalities[{i}]"))
        if mods[-1].kind not in (CONTINUOUS, ONE_HOT):
            raise ConfigError(f"kind must be {CONTINUOUS!r} or {ONE_HOT!r}", f"modalities[{i}].kind")
    try:
        ModalityRegistry(mods)
    except M3Error as exc:
        raise ConfigError(str(exc), "modalities") from None

    tasks = []
    for i, t in enumerate(doc["tasks"]):
        task = _build(TaskSpec, t, f"tasks[{i}]")
        for m in (*task.inputs, *task.outputs):
            if m not in {mm.id for mm in mods}:
                raise ConfigError(f"task {task.id} references unknown modality {m}",
                                  f"tasks[{i}]")
        tasks.append(task)
    if not tasks:
        raise ConfigError("at least one task required", "tasks")
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids {ids}", "tasks")

    synth = _build(SynthConfig, doc.get("synth", {}), "synth")
    one_hot = [m for m in mods if m.kind == ONE_HOT]
    for m in one_hot:
        if synth.num_classes != m.dim:
            raise ConfigError(f"one_hot modality {m.id} has dim {m.dim} but num_classes is "
                              f"{synth.num_classes}", "synth.num_classes")
    if isinstance(synth.noise_std, list) and len(synth.noise_std) != len(mods):
        raise ConfigError("per-modality noise list must match modality count", "synth.noise_std")

    moe_doc = dict(doc.get("moe", {}))
    unknown = set(moe_doc) - _MOE_KEYS
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "moe")
    kind = moe_doc.pop("predictor", "moe")
    if kind not in ("moe", "mlp", "linear"):
        raise ConfigError(f"predictor must be 'moe', 'mlp' or 'linear', got {kind!r}",
                          "moe.predictor")
    moe = _build(MoEConfig, {"M": len(mods), **moe_doc}, "moe")

    loss = _build(LossConfig, doc.get("loss", {}), "loss")
    train = _build(TrainConfig, doc.get("train", {}), "train")
    if train.task_order is not None:
        for t in train.task_order:
            if t not in ids:
                raise ConfigError(f"task order names unknown task {t}", "train.task_order")
    train_size = synth.train_end
    if train.batch_size > train_size:
        raise ConfigError(f"batch_size {train.batch_size} exceeds train split {train_size}",
                          "train.batch_size")
    ev = _build(EvalOptions, doc.get("eval", {}), "eval")
    if ev.mode not in ("cosine", "energy"):
        raise ConfigError(f"unknown retrieval mode {ev.mode!r}", "eval.mode")
    paths = _build(Paths, doc.get("paths", {}), "paths")
    adapters = list(doc.get("adapters", []))
    for m in adapters:
        if m not in {mm.id for mm in mods}:
            raise ConfigError(f"adapter for unknown modality {m}", "adapters")
    return RunConfig(mods, tasks, synth, moe, kind, loss, train, ev, paths, adapters,
                     copy.deepcopy(doc))


def set_dotted(doc, dotted, value):
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def apply_overrides(doc, overrides):
    """Apply ``{"train.steps": 100, ...}`` style overrides to a config dict."""
    doc = copy.deepcopy(doc)
    for k, v in overrides.items():
        set_dotted(doc, k, v)
    return doc


def apply_seed(doc, seed):
    doc = copy.deepcopy(doc)
    set_dotted(doc, "synth.seed", int(seed))
    set_dotted(doc, "train.seed", int(seed))
    return doc


def env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- presets


def _two_modal(noise):
    return {
        "modalities": [{"id": 1, "name": "x", "dim": 32, "kind": "continuous"},
                       {"id": 2, "name": "y", "dim": 48, "kind": "continuous"}],
        "tasks": [{"id": 1, "inputs": [1], "outputs": [2]},
                  {"id": 2, "inputs": [2], "outputs": [1]}],
        "synth": {"latent_dim": 16, "noise_std": noise, "num_samples": 5120,
                  "train_end": 4096, "val_end": 4608, "seed": 0},
        "moe": {"predictor": "moe", "N": 4, "K": 2, "h": 64, "r": 2, "dropout_p": 0.1},
        "loss": {"alpha": 0.5, "tau": 0.07, "symmetric_cl": True},
        "train": {"steps": 3000, "batch_size": 64, "lr_init": 1e-3, "lr_final": 5.5e-6,
                  "warmup_frac": 0.1, "weight_decay": 0.005, "seed": 0},
    }


def _three_modal_labels():
    doc = _two_modal(0.05)
    doc["modalities"].append({"id": 3, "name": "label", "dim": 10, "kind": "one_hot"})
    doc["tasks"].append({"id": 3, "inputs": [1], "outputs": [3]})
    doc["synth"]["num_classes"] = 10
    # the class head overfits at 4096 rows; 16384 train, 512 val, 512 test
    doc["synth"].update(num_samples=17408, train_end=16384, val_end=16896)
    return doc


def _vqa_style():
    doc = _two_modal(0.05)
    doc["modalities"].append({"id": 3, "name": "answer", "dim": 24, "kind": "continuous"})
    doc["tasks"] = [{"id": 1, "inputs": [1, 2], "outputs": [3]},
                    {"id": 2, "inputs": [3], "outputs": [1, 2]}]
    return doc


def _tiny():
    return {
        "modalities": [{"id": 1, "name": "x", "dim": 4, "kind": "continuous"},
                       {"id": 2, "name": "y", "dim": 5, "kind": "continuous"}],
        "tasks": [{"id": 1, "inputs": [1], "outputs": [2]},
                  {"id": 2, "inputs": [2], "outputs": [1]}],
        "synth": {"latent_dim": 3, "noise_std": 0.05, "num_samples": 64,
                  "train_end": 48, "val_end": 56, "seed": 0},
        "moe": {"predictor": "moe", "N": 2, "K": 1, "h": 4, "r": 2, "dropout_p": 0.1},
        "loss": {"alpha": 0.5, "tau": 0.07, "symmetric_cl": True},
        "train": {"steps": 20, "batch_size": 4, "seed": 0},
        "adapters": [1, 2],
    }


def _paper_scale():
    doc = _two_modal(0.05)
    doc["moe"] = {"predictor": "moe", "N": 12, "K": 4, "h": 2048, "r": 2, "dropout_p": 0.1}
    doc["train"]["batch_size"] = 128
    return doc


PRESETS = {
    "two-modal-clean": lambda: _two_modal(0.0),
    "two-modal-noisy": lambda: _two_modal(0.05),
    "three-modal-with-labels": _three_modal_labels,
    "vqa-style": _vqa_style,
    "tiny": _tiny,
    "paper-scale": _paper_scale,
}


def preset(name):
    try:
        doc = PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    doc["name"] = name
    return doc


def load_config_doc(source):
    """A preset name or a path to a JSON config file."""
    if source in PRESETS:
        return preset(source)
    try:
        text = Path(source).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {source}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(source)) from None
