"""Multi-gate top-K mixture-of-experts predictor and an MLP baseline.

Experts live in a shared hidden space of width ``h``. Each task reaches that
space through a projection keyed by its input modality set and leaves it
through a projection keyed by its output set. Two gates share the experts:
gate 1 feeds the contrastive loss and gate 2 the regularization loss. The
gate matrices are shared by every task; only the additive modality tags and
the projections change with the task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .data import ModalityRegistry, TaskSpec, adapter_apply
from .errors import DimensionError, PreconditionError
from .numeric import NArray

GATE_CONTRASTIVE = 1
GATE_REGULARIZATION = 2


@dataclass
class MoEConfig:
    M: int
    N: int = 4
    K: int = 2
    L: int = 2
    h: int = 64
    r: int = 2
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise PreconditionError("M and N must be >= 1")
        if not 1 <= self.K <= self.M * self.N:
            raise PreconditionError(f"K={self.K} must lie in [1, M*N={self.M * self.N}]")
        if self.L != 2:
            raise PreconditionError("exactly two gates are supported (L == 2)")
        if self.h < 1 or self.r < 1:
            raise PreconditionError("h and r must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise PreconditionError("dropout_p must lie in [0, 1)")

    @property
    def num_experts(self):
        return self.M * self.N


def paper_preset(M):
    """The full-size configuration (12 experts per modality, top-4, h=2048)."""
    return MoEConfig(M=M, N=12, K=4, h=2048, r=2, dropout_p=0.1)


# ---------------------------------------------------------------- parameters


class ParamSet:
    """Named learnable arrays plus optional per-modality input adapters."""

    def __init__(self):
        self.tensors: dict[str, NArray] = {}

    def _add(self, name, data):
        self.tensors[name] = NArray(data, requires_grad=True, name=name)
        return self.tensors[name]

    def named(self):
        return self.tensors

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def add_adapters(self, registry, modality_ids):
        for m in modality_ids:
            self._add(f"adapter.{m}", np.eye(registry[m].dim))

    def adapter(self, m):
        return self.tensors.get(f"adapter.{m}")

    def encode_inputs(self, arrays, task: TaskSpec):
        """Concatenate the task's input embeddings, adapters applied."""
        parts = [adapter_apply(arrays[m], self.adapter(m)) for m in sorted(task.inputs)]
        return nm.concat(parts, axis=-1)


def _normal(rng, shape, fan_in):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


class PredictorParams(ParamSet):
    def __init__(self, cfg: MoEConfig, registry: ModalityRegistry, tasks, seed=0):
        super().__init__()
        if cfg.M != len(registry):
            raise PreconditionError(f"MoEConfig.M={cfg.M} but {len(registry)} modalities declared")
        self.cfg = cfg
        self.registry = registry
        rng = np.random.default_rng([seed, 31337])
        h, wide = cfg.h, cfg.r * cfg.h
        for idx in range(cfg.num_experts):
            self._add(f"expert.{idx}.w_in", _normal(rng, (h, wide), h))
            self._add(f"expert.{idx}.w_out", _normal(rng, (wide, h), wide))
        for gate in (GATE_CONTRASTIVE, GATE_REGULARIZATION):
            self._add(f"gate.{gate}.g", _normal(rng, (cfg.num_experts, h), h))
        for m in registry:
            self._add(f"tag.{m.id}", 0.02 * rng.standard_normal(h))
        for task in tasks:
            registry.check_task(task)
            name = f"in_proj.{task.input_sig}"
            if name not in self.tensors:
                d_in = registry.set_dim(task.inputs)
                self._add(name, _normal(rng, (d_in, h), d_in))
        for task in tasks:
            name = f"out_proj.{task.output_sig}"
            if name not in self.tensors:
                self._add(name, _normal(rng, (h, registry.set_dim(task.outputs)), h))

    def expert(self, idx):
        try:
            return self.tensors[f"expert.{idx}.w_in"], self.tensors[f"expert.{idx}.w_out"]
        except KeyError:
            raise PreconditionError(f"expert index {idx} out of range") from None

    def gate(self, gate):
        return self.tensors[f"gate.{gate}.g"]

    def tag(self, m):
        return self.tensors[f"tag.{m}"]

    def in_proj(self, task):
        try:
            return self.tensors[f"in_proj.{task.input_sig}"]
        except KeyError:
            raise PreconditionError(f"task {task.id} is not registered") from None

    def out_proj(self, task):
        try:
            return self.tensors[f"out_proj.{task.output_sig}"]
        except KeyError:
            raise PreconditionError(f"task {task.id} is not registered") from None


def moe_param_count(cfg: MoEConfig, registry, tasks):
    """Closed-form parameter count, independent of any built arrays."""
    h = cfg.h
    total = cfg.num_experts * 2 * h * cfg.r * h + 2 * cfg.num_experts * h + cfg.M * h
    total += sum(registry.set_dim(s) * h for s in {t.input_sig: t.inputs for t in tasks}.values())
    total += sum(registry.set_dim(s) * h for s in {t.output_sig: t.outputs for t in tasks}.values())
    return total


# ---------------------------------------------------------------- gating


@dataclass
class GateDecision:
    """Routing of one gate. Arrays carry a leading batch axis for batched input.

    ``mix_weights`` is the differentiable dense-shaped weight matrix: the
    renormalized top-K weights in the selected columns and zeros elsewhere.
    """

    logits: np.ndarray
    dense_weights: np.ndarray
    selected: np.ndarray
    renorm_weights: np.ndarray
    mix_weights: NArray = field(repr=False, default=None)


def route(logits, K):
    """Softmax the logits, keep the top K (ties to the lowest index), renormalize."""
    logits = nm.as_narray(logits)
    single = logits.ndim == 1
    if single:
        logits = nm.reshape(logits, (1, -1))
    E = logits.shape[1]
    if not 1 <= K <= E:
        raise PreconditionError(f"K={K} must lie in [1, {E}]")
    dense = nm.softmax(logits, axis=-1)
    selected = np.argsort(-dense.data, axis=1, kind="stable")[:, :K]
    mask = np.zeros(dense.shape)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    kept = nm.mul(dense, mask)
    mix = nm.div(kept, nm.sum_(kept, axis=1, keepdims=True))
    renorm = np.take_along_axis(mix.data, selected, axis=1)
    dec = GateDecision(logits.data, dense.data, selected, renorm, mix)
    if single:
        dec.logits, dec.dense_weights = dec.logits[0], dec.dense_weights[0]
        dec.selected, dec.renorm_weights = dec.selected[0], dec.renorm_weights[0]
    return dec


def gate_input(e_x, task, params: PredictorParams):
    u = nm.matmul(e_x, params.in_proj(task))
    for m in sorted(task.inputs):
        u = nm.add(u, params.tag(m))
    return u


def gate_forward(e_x, task: TaskSpec, gate, params: PredictorParams, cfg: MoEConfig):
    """Route the concatenated input ``e_x`` through gate ``gate`` (1 or 2)."""
    if gate not in (GATE_CONTRASTIVE, GATE_REGULARIZATION):
        raise PreconditionError(f"gate index must be 1 or 2, got {gate}")
    e_x = nm.as_narray(e_x)
    if e_x.shape[-1] != params.in_proj(task).shape[0]:
        raise DimensionError(
            f"task {task.id} expects input dim {params.in_proj(task).shape[0]}, got {e_x.shape[-1]}")
    u = gate_input(e_x, task, params)
    return route(nm.matmul(u, nm.transpose(params.gate(gate))), cfg.K)


def expert_forward(e_h, idx, params: PredictorParams, cfg: MoEConfig, train_mode=False, rng=None):
    w_in, w_out = params.expert(idx)
    hidden = nm.gelu(nm.matmul(e_h, w_in))
    if train_mode and cfg.dropout_p > 0:
        hidden = nm.dropout(hidden, cfg.dropout_p, rng)
    return nm.matmul(hidden, w_out)


@dataclass
class Prediction:
    out_a: NArray
    out_b: NArray
    decisions: tuple


def predict(e_x, task: TaskSpec, params: PredictorParams, cfg: MoEConfig,
            train_mode=False, rng=None) -> Prediction:
    """Two gate-specific predictions of the output embedding.

    ``out_a`` (gate 1) is scored by the contrastive loss and ``out_b``
    (gate 2) by the regularization loss. 1-D input gives 1-D outputs.
    """
    e_x = nm.as_narray(e_x)
    single = e_x.ndim == 1
    if single:
        e_x = nm.reshape(e_x, (1, -1))
    if e_x.shape[1] != params.in_proj(task).shape[0]:
        raise DimensionError(
            f"task {task.id} expects input dim {params.in_proj(task).shape[0]}, got {e_x.shape[1]}")
    if train_mode and cfg.dropout_p > 0 and rng is None:
        raise PreconditionError("train_mode with dropout needs an rng")
    h = nm.matmul(e_x, params.in_proj(task))
    u = h
    for m in sorted(task.inputs):
        u = nm.add(u, params.tag(m))
    decisions = tuple(route(nm.matmul(u, nm.transpose(params.gate(g))), cfg.K)
                      for g in (GATE_CONTRASTIVE, GATE_REGULARIZATION))
    used = np.unique(np.concatenate([d.selected.ravel() for d in decisions]))
    expert_out = {int(n): expert_forward(h, int(n), params, cfg, train_mode, rng) for n in used}
    cols = [int(n) for n in used]
    outs = []
    for d in decisions:
        mixed = nm.weighted_sum(d.mix_weights, cols, [expert_out[c] for c in cols])
        out = nm.matmul(mixed, params.out_proj(task))
        outs.append(nm.reshape(out, (-1,)) if single else out)
    if single:
        for d in decisions:
            d.logits, d.dense_weights = d.logits[0], d.dense_weights[0]
            d.selected, d.renorm_weights = d.selected[0], d.renorm_weights[0]
    return Prediction(outs[0], outs[1], decisions)


# ---------------------------------------------------------------- MLP baseline


class MLPParams(ParamSet):
    """Two-layer GELU network sized to a parameter budget.

    The first layer is keyed by the task's input set and the second by its
    output set, so tasks sharing a modality set share that layer.
    """

    def __init__(self, hidden, registry: ModalityRegistry, tasks, seed=0, dropout_p=0.0):
        super().__init__()
        self.hidden = hidden
        self.registry = registry
        self.dropout_p = dropout_p
        rng = np.random.default_rng([seed, 4243])
        for task in tasks:
            registry.check_task(task)
            name = f"mlp.w1.{task.input_sig}"
            if name not in self.tensors:
                d_in = registry.set_dim(task.inputs)
                self._add(name, _normal(rng, (d_in, hidden), d_in))
        for task in tasks:
            name = f"mlp.w2.{task.output_sig}"
            if name not in self.tensors:
                self._add(name, _normal(rng, (hidden, registry.set_dim(task.outputs)), hidden))

    @classmethod
    def matched(cls, target, registry, tasks, seed=0, dropout_p=0.0, tolerance=0.02):
        """Pick the hidden width whose parameter count is closest to ``target``."""
        per_unit = mlp_width_cost(registry, tasks)
        hidden = max(1, min((int(target // per_unit), int(target // per_unit) + 1),
                            key=lambda w: abs(w * per_unit - target)))
        params = cls(hidden, registry, tasks, seed, dropout_p)
        if abs(params.count() - target) > tolerance * target:
            raise PreconditionError(
                f"MLP budget mismatch: {params.count()} parameters vs target {target}")
        return params

    def w1(self, task):
        try:
            return self.tensors[f"mlp.w1.{task.input_sig}"]
        except KeyError:
            raise PreconditionError(f"task {task.id} is not registered") from None

    def w2(self, task):
        return self.tensors[f"mlp.w2.{task.output_sig}"]


def mlp_width_cost(registry, tasks):
    ins = {t.input_sig: t.inputs for t in tasks}
    outs = {t.output_sig: t.outputs for t in tasks}
    return (sum(registry.set_dim(s) for s in ins.values())
            + sum(registry.set_dim(s) for s in outs.values()))


def mlp_baseline_forward(e_x, task, params: MLPParams, train_mode=False, rng=None) -> Prediction:
    """Single MLP output routed to both loss paths."""
    e_x = nm.as_narray(e_x)
    hidden = nm.gelu(nm.matmul(e_x, params.w1(task)))
    if train_mode and params.dropout_p > 0:
        hidden = nm.dropout(hidden, params.dropout_p, rng)
    out = nm.matmul(hidden, params.w2(task))
    return Prediction(out, out, ())


class LinearParams(ParamSet):
    """One bias-free linear map per task: the convex reference model."""

    def __init__(self, registry: ModalityRegistry, tasks, seed=0):
        super().__init__()
        self.registry = registry
        rng = np.random.default_rng([seed, 5309])
        for task in tasks:
            registry.check_task(task)
            d_in = registry.set_dim(task.inputs)
            self._add(f"linear.{task.id}", _normal(rng, (d_in, registry.set_dim(task.outputs)), d_in))

    def w(self, task):
        try:
            return self.tensors[f"linear.{task.id}"]
        except KeyError:
            raise PreconditionError(f"task {task.id} is not registered") from None


def linear_forward(e_x, task, params: LinearParams) -> Prediction:
    out = nm.matmul(nm.as_narray(e_x), params.w(task))
    return Prediction(out, out, ())


# ---------------------------------------------------------------- model wrapper


class Predictor:
    """Uniform forward interface over the MoE predictor and the MLP baseline."""

    def __init__(self, params, cfg: MoEConfig | None = None):
        self.params = params
        self.cfg = cfg

    @property
    def kind(self):
        if isinstance(self.params, MLPParams):
            return "mlp"
        return "linear" if isinstance(self.params, LinearParams) else "moe"

    def named(self):
        return self.params.named()

    def forward(self, e_x, task, train_mode=False, rng=None) -> Prediction:
        if self.kind == "mlp":
            return mlp_baseline_forward(e_x, task, self.params, train_mode, rng)
        if self.kind == "linear":
            return linear_forward(e_x, task, self.params)
        return predict(e_x, task, self.params, self.cfg, train_mode, rng)

    def forward_batch(self, arrays, task, train_mode=False, rng=None) -> Prediction:
        return self.forward(self.params.encode_inputs(arrays, task), task, train_mode, rng)


def build_predictor(kind, moe_cfg: MoEConfig, registry, tasks, seed=0, adapters=()):
    """Build the MoE predictor, the MLP matched to its parameter count, or a linear map."""
    if kind == "moe":
        params = PredictorParams(moe_cfg, registry, tasks, seed)
    elif kind == "mlp":
        target = moe_param_count(moe_cfg, registry, tasks)
        params = MLPParams.matched(target, registry, tasks, seed, moe_cfg.dropout_p)
    elif kind == "linear":
        params = LinearParams(registry, tasks, seed)
    else:
        raise PreconditionError(f"unknown predictor kind {kind!r}")
    params.add_adapters(registry, adapters)
    return Predictor(params, moe_cfg)


# ---------------------------------------------------------------- diagnostics


@dataclass
class Utilization:
    counts: np.ndarray
    frequencies: np.ndarray
    mean_entropy: float
    decisions: int


def expert_utilization(decisions) -> Utilization:
    """Per-expert selection frequency (sums to K) and mean dense-gate entropy.

    Accepts single or batched :class:`GateDecision` objects; each batch row
    counts as one decision.
    """
    counts = None
    entropy_sum = 0.0
    total = 0
    for d in decisions:
        sel = np.atleast_2d(d.selected)
        dense = np.atleast_2d(d.dense_weights)
        if counts is None:
            counts = np.zeros(dense.shape[1], dtype=np.int64)
        np.add.at(counts, sel.ravel(), 1)
        p = np.where(dense > 0, dense, 1.0)
        entropy_sum += float(-(dense * np.log(p)).sum())
        total += dense.shape[0]
    if total == 0:
        raise PreconditionError("expert_utilization needs at least one decision")
    return Utilization(counts, counts / total, entropy_sum / total, total)


def total_variation(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())
