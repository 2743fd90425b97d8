"""Alternating gradient descent over directional tasks, with Adam.

Step ``i`` trains only task ``task_order[i mod T]``. All tasks share one
parameter set and one Adam state; a parameter outside the current task's
forward graph (another task's projection, an expert no sample routed to) is
left untouched, moments and weight decay included. ``schedule="joint"``
instead sums every task's loss on one shared batch and takes one update.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .data import BatchStream, Dataset, TaskSpec
from .errors import DimensionError, FormatError, NumericError, PreconditionError, TruncatedError
from .losses import LossConfig, LossReport, evaluate_losses
from .predictor import Predictor

log = logging.getLogger(__name__)

M3JP_MAGIC = b"M3JP"
M3JP_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 3000
    lr_init: float = 1e-3
    lr_final: float = 5.5e-6
    warmup_frac: float = 0.1
    weight_decay: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    seed: int = 0
    schedule: str = "agd"
    task_order: list | None = None
    checkpoint_every: int = 0
    log_flush_every: int = 50

    def __post_init__(self):
        if self.steps < 0:
            raise PreconditionError("steps must be >= 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise PreconditionError("warmup_frac must lie in [0, 1)")
        if not self.lr_init >= self.lr_final >= 0.0:
            raise PreconditionError("need lr_init >= lr_final >= 0")
        if self.schedule not in ("agd", "joint"):
            raise PreconditionError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 2:
            raise PreconditionError("batch_size must be >= 2 for in-batch negatives")


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    updates: dict = field(default_factory=dict)
    cursors: dict = field(default_factory=dict)
    recent: dict = field(default_factory=dict)
    seed: int = 0

    def rng_state(self):
        return {"seed": self.seed, "cursors": self.cursors, "updates": self.updates,
                "recent": self.recent}


def task_for_step(i, task_order):
    if not task_order:
        raise PreconditionError("task order is empty")
    return task_order[i % len(task_order)]


def lr_at(i, cfg: TrainConfig):
    """Linear warmup from zero to ``lr_init``, then cosine decay to ``lr_final``."""
    warm = cfg.warmup_frac * cfg.steps
    if i < warm:
        return cfg.lr_init * i / warm
    span = cfg.steps - warm
    progress = 1.0 if span <= 0 else min(1.0, (i - warm) / span)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


def adam_update(params: dict, state: TrainState, lr, cfg: TrainConfig):
    """Decoupled weight decay then Adam, on parameters that received a gradient."""
    touched = []
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        touched.append(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.updates[name] = 0
        t = state.updates[name] = state.updates[name] + 1
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return touched


def _dropout_rng(seed, step):
    return np.random.default_rng([seed, step, 17])


def _check_finite(report, step, task, batch):
    if not math.isfinite(report.total):
        raise NumericError(
            f"non-finite loss at step {step}, task {task.id}; batch rows {batch.rows.tolist()}")


def _task_loss(predictor, batch, task, loss_cfg, step, rng):
    try:
        pred = predictor.forward_batch(batch.arrays, task, train_mode=True, rng=rng)
        total, report = evaluate_losses(pred.out_a, pred.out_b, batch.gather(task.outputs),
                                        loss_cfg)
    except NumericError as exc:
        raise NumericError(f"{exc} at step {step}, task {task.id}; "
                           f"batch rows {batch.rows.tolist()}") from exc
    _check_finite(report, step, task, batch)
    return total, report


def train_step(state: TrainState, predictor: Predictor, batch, task: TaskSpec,
               loss_cfg: LossConfig, cfg: TrainConfig) -> LossReport:
    """One forward/backward/update on ``task``; advances ``state.step``."""
    predictor.params.zero_grad()
    rng = _dropout_rng(cfg.seed, state.step)
    with nm.Tape():
        total, report = _task_loss(predictor, batch, task, loss_cfg, state.step, rng)
        nm.backward(total)
    adam_update(predictor.named(), state, lr_at(state.step, cfg), cfg)
    state.step += 1
    return report


def joint_step(state: TrainState, predictor: Predictor, batch, tasks, loss_cfg, cfg):
    """Sum every task's loss on one batch and take a single update."""
    predictor.params.zero_grad()
    rng = _dropout_rng(cfg.seed, state.step)
    reports = []
    with nm.Tape():
        total = None
        for task in tasks:
            t_loss, report = _task_loss(predictor, batch, task, loss_cfg, state.step, rng)
            reports.append(report)
            total = t_loss if total is None else nm.add(total, t_loss)
        nm.backward(total)
    adam_update(predictor.named(), state, lr_at(state.step, cfg), cfg)
    state.step += 1
    return reports


def convergence_gap(records, task_ids=None, window=20):
    """Gap between the two tasks' mean loss over their last ``window`` steps."""
    by_task = {}
    for r in records:
        by_task.setdefault(r["task"], []).append(r["total"])
    ids = list(task_ids) if task_ids is not None else sorted(by_task)
    if len(ids) != 2:
        raise PreconditionError(f"convergence_gap compares exactly two tasks, got {ids}")
    tails = []
    for t in ids:
        seq = by_task.get(t, [])
        if len(seq) < window:
            raise PreconditionError(f"task {t} has {len(seq)} logged steps, need {window}")
        tails.append(float(np.mean(seq[-window:])))
    return abs(tails[0] - tails[1])


class Trainer:
    """Owns the training loop, its log and its checkpoints."""

    def __init__(self, dataset: Dataset, tasks, predictor: Predictor, loss_cfg: LossConfig,
                 cfg: TrainConfig, config_doc=None, state: TrainState | None = None):
        self.dataset = dataset
        self.tasks = {t.id: t for t in tasks}
        self.order = [self.tasks[i] for i in (cfg.task_order or [t.id for t in tasks])]
        self.predictor = predictor
        self.loss_cfg = loss_cfg
        self.cfg = cfg
        self.config_doc = config_doc or {}
        self.state = state or TrainState(seed=cfg.seed)
        self.records = []
        self._streams = {}

    def _stream(self, key):
        if key not in self._streams:
            seed = self.cfg.seed * 7919 + (0 if key == "joint" else int(key))
            self._streams[key] = BatchStream(self.dataset, "train", self.cfg.batch_size, seed,
                                             cursor=self.state.cursors.get(str(key), 0))
        return self._streams[key]

    def _next_batch(self, key):
        stream = self._stream(key)
        batch = stream.next()
        self.state.cursors[str(key)] = stream.cursor
        return batch

    def step(self):
        i = self.state.step
        lr = lr_at(i, self.cfg)
        if self.cfg.schedule == "agd":
            task = task_for_step(i, self.order)
            pairs = [(task, train_step(self.state, self.predictor, self._next_batch(task.id),
                                       task, self.loss_cfg, self.cfg))]
        else:
            batch = self._next_batch("joint")
            reports = joint_step(self.state, self.predictor, batch, self.order,
                                 self.loss_cfg, self.cfg)
            pairs = list(zip(self.order, reports))
        out = []
        for task, rep in pairs:
            rec = {"step": i, "task": task.id, "l_reg": rep.l_reg, "l_cl": rep.l_cl,
                   "total": rep.total, "mi_lb": rep.mi_lower_bound, "lr": lr}
            recent = self.state.recent.setdefault(str(task.id), [])
            recent.append(rep.total)
            del recent[:-20]
            out.append(rec)
        self.records.extend(out)
        return out

    def run(self, until=None, log_path=None, checkpoint_path=None):
        """Train up to step ``until`` (default: ``cfg.steps``)."""
        until = self.cfg.steps if until is None else until
        fh = open(log_path, "a") if log_path else None
        try:
            while self.state.step < until:
                for rec in self.step():
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                if fh and self.state.step % self.cfg.log_flush_every == 0:
                    fh.flush()
                every = self.cfg.checkpoint_every
                if checkpoint_path and every and self.state.step % every == 0:
                    self.save(checkpoint_path)
        finally:
            if fh:
                fh.close()
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.records

    def save(self, path):
        save_checkpoint(self.predictor.named(), self.state, self.config_doc, path)

    def final_losses(self):
        return {tid: float(np.mean(v)) for tid, v in self.state.recent.items() if v}


def train(dataset, tasks, predictor, loss_cfg, cfg, config_doc=None, log_path=None,
          checkpoint_path=None):
    trainer = Trainer(dataset, tasks, predictor, loss_cfg, cfg, config_doc)
    trainer.run(log_path=log_path, checkpoint_path=checkpoint_path)
    return trainer


# ---------------------------------------------------------------- M3JP format


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    step: int
    rng_state: dict
    moments: dict

    def state(self):
        st = TrainState(step=self.step, seed=self.rng_state.get("seed", 0))
        st.cursors = dict(self.rng_state.get("cursors", {}))
        st.updates = dict(self.rng_state.get("updates", {}))
        st.recent = {k: list(v) for k, v in self.rng_state.get("recent", {}).items()}
        for name, arr in self.moments.items():
            kind, pname = name.split(".", 2)[1:]
            (st.m if kind == "m" else st.v)[pname] = arr.astype(np.float64)
        return st


def _write_tensor(buf, name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def save_checkpoint(params: dict, state: TrainState, config_doc, path):
    buf = io.BytesIO()
    cfg_raw = json.dumps(config_doc, sort_keys=True).encode("utf-8")
    buf.write(M3JP_MAGIC + struct.pack("<II", M3JP_VERSION, len(cfg_raw)) + cfg_raw)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _write_tensor(buf, name, p.data if isinstance(p, nm.NArray) else p)
    rng_raw = json.dumps(state.rng_state(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<QI", state.step, len(rng_raw)) + rng_raw)
    moment_names = [n for n in params if n in state.m]
    buf.write(struct.pack("<I", 2 * len(moment_names)))
    for name in moment_names:
        _write_tensor(buf, f"adam.m.{name}", state.m[name])
        _write_tensor(buf, f"adam.v.{name}", state.v[name])
    data = buf.getvalue()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"checkpoint write to {path} failed: {exc}") from exc


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"M3JP: file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self):
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
        return name, arr.astype(np.float32)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != M3JP_MAGIC:
        raise FormatError(f"{path}: not an M3JP checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version != M3JP_VERSION:
        raise FormatError(f"{path}: unsupported M3JP version {version}")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(count))
    step, rng_len = r.unpack("<QI")
    rng_state = json.loads(r.take(rng_len).decode("utf-8"))
    (mcount,) = r.unpack("<I")
    moments = dict(r.tensor() for _ in range(mcount))
    return Checkpoint(config, tensors, step, rng_state, moments)


def restore_params(params: dict, tensors: dict):
    """Copy checkpoint tensors into live parameters, widening to float64."""
    for name, p in params.items():
        if name not in tensors:
            raise DimensionError(f"tensor {name!r} missing from checkpoint")
        src = tensors[name]
        if src.shape != p.shape:
            raise DimensionError(
                f"tensor {name!r}: checkpoint shape {src.shape} vs model shape {p.shape}")
    for name, p in params.items():
        p.data = tensors[name].astype(np.float64)
        p.grad = None


def resume(checkpoint: Checkpoint, dataset, tasks, predictor, loss_cfg, cfg, config_doc=None):
    """Rebuild a :class:`Trainer` that continues from ``checkpoint``."""
    restore_params(predictor.named(), checkpoint.tensors)
    return Trainer(dataset, tasks, predictor, loss_cfg, cfg,
                   config_doc if config_doc is not None else checkpoint.config,
                   state=checkpoint.state())
