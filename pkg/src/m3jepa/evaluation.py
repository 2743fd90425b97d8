"""Retrieval and classification metrics, candidate caching, and report files.

Retrieval scores a query's gate-1 prediction against candidate target
embeddings by cosine similarity (or by pair energy in ``"energy"`` mode).
Ties count against the query: a candidate scoring exactly the same as the
true match ranks ahead of it.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import ONE_HOT, Dataset, TaskSpec
from .errors import DegenerateVectorError, PreconditionError
from .losses import energy_matrix
from .predictor import Predictor


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    direction: str = "x->y"

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]


@dataclass
class EvalReport:
    r_at: dict = field(default_factory=dict)
    classification: dict = field(default_factory=dict)
    energy_mean: float | None = None
    latency: dict = field(default_factory=dict)

    def to_json(self):
        doc = {"r_at": {str(k): v for k, v in self.r_at.items()},
               "classification": self.classification,
               "latency": self.latency,
               "energy_mean": self.energy_mean}
        return json.dumps(doc, indent=2, sort_keys=True)


def diagonal_ranks(values):
    """0-based rank of each row's diagonal entry; ties rank ahead of it."""
    values = np.asarray(values)
    diag = np.diagonal(values)[:, None]
    ahead = values >= diag
    return ahead.sum(axis=1) - 1


def recall_at_k(sim, ks=(1, 5, 10)):
    values = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise PreconditionError(f"recall needs a square index-aligned matrix, got {values.shape}")
    ranks = diagonal_ranks(values)
    out = {}
    for k in ks:
        if k > values.shape[1]:
            raise PreconditionError(f"K={k} exceeds {values.shape[1]} candidates")
        out[k] = float(np.mean(ranks < k))
    return out


def classify_metrics(pred_labels, true_labels, num_classes):
    """Accuracy plus macro precision/recall/F1 over classes seen in either list."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.size == 0 or pred.shape != true.shape:
        raise PreconditionError("need equal-length, non-empty label arrays")
    if pred.min() < 0 or true.min() < 0 or max(pred.max(), true.max()) >= num_classes:
        raise PreconditionError(f"labels must lie in [0, {num_classes})")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    predicted = conf.sum(axis=0)
    actual = conf.sum(axis=1)
    present = (predicted + actual) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    return {"accuracy": float(tp.sum() / pred.size),
            "precision": float(precision[present].mean()),
            "recall": float(recall[present].mean()),
            "f1": float(f1[present].mean())}


# ---------------------------------------------------------------- candidate index


class CandidateEncoder:
    """Candidate-side embedding of one sample; counts its forward passes."""

    def __init__(self, modality_ids):
        self.modality_ids = tuple(sorted(modality_ids))
        self.calls = 0

    def encode(self, dataset: Dataset, row):
        self.calls += 1
        vec = np.concatenate([dataset.arrays[m][row] for m in self.modality_ids])
        norm = np.sqrt(vec @ vec)
        if norm == 0.0:
            raise DegenerateVectorError(f"candidate row {row} has zero norm")
        return vec, norm

    def encode_all(self, dataset, rows):
        pairs = [self.encode(dataset, r) for r in rows]
        raw = np.stack([p[0] for p in pairs])
        norms = np.array([p[1] for p in pairs])
        return raw, norms


@dataclass(frozen=True)
class CandidateIndex:
    modality_ids: tuple
    rows: np.ndarray
    raw: np.ndarray
    norms: np.ndarray
    unit: np.ndarray

    def __len__(self):
        return len(self.rows)


def build_index(dataset: Dataset, split, modality_ids, encoder=None) -> CandidateIndex:
    """Encode every candidate of ``split`` once and freeze the result."""
    lo, hi = dataset.split_range(split)
    if hi <= lo:
        raise PreconditionError(f"split {split!r} is empty")
    encoder = encoder or CandidateEncoder(modality_ids)
    rows = np.arange(lo, hi)
    raw, norms = encoder.encode_all(dataset, rows)
    unit = raw / norms[:, None]
    for a in (rows, raw, norms, unit):
        a.setflags(write=False)
    return CandidateIndex(tuple(sorted(modality_ids)), rows, raw, norms, unit)


def _unit_rows(x):
    x = np.atleast_2d(x)
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(n == 0.0):
        raise DegenerateVectorError("zero-norm prediction")
    return x / n


def cosine_scores(pred_a, unit_candidates):
    return _unit_rows(pred_a) @ unit_candidates.T


def _check_index(task: TaskSpec, index: CandidateIndex):
    if tuple(sorted(task.outputs)) != index.modality_ids:
        raise PreconditionError(
            f"index holds modalities {index.modality_ids}, task {task.id} outputs {task.outputs}")


def rank_candidates(scores, ascending=False):
    """Candidate order for one score row; ties go to the lower id."""
    key = scores if ascending else -scores
    return np.argsort(key, kind="stable")


def retrieve(query, task: TaskSpec, predictor: Predictor, index: CandidateIndex,
             mode="cosine", alpha=0.5):
    """Rank index candidates for one query sample (dict modality id -> vector)."""
    _check_index(task, index)
    pred = predictor.forward_batch({m: np.atleast_2d(query[m]) for m in task.inputs}, task)
    if mode == "cosine":
        order = rank_candidates(cosine_scores(pred.out_a.data, index.unit)[0])
    elif mode == "energy":
        e = energy_matrix(pred.out_a.data, pred.out_b.data, index.raw, alpha)[0]
        order = rank_candidates(e, ascending=True)
    else:
        raise PreconditionError(f"unknown retrieval mode {mode!r}")
    return index.rows[order]


def predict_split(predictor, dataset, task, split):
    lo, hi = dataset.split_range(split)
    rows = np.arange(lo, hi)
    arrays = {m: dataset.arrays[m][rows] for m in task.inputs}
    return predictor.forward_batch(arrays, task)


def similarity_matrix(predictor, dataset, task, split, index=None, mode="cosine", alpha=0.5,
                      limit=None):
    """Queries of ``split`` against its own candidates; higher means better."""
    index = index or build_index(dataset, split, task.outputs)
    _check_index(task, index)
    pred = predict_split(predictor, dataset, task, split)
    a, b = pred.out_a.data, pred.out_b.data
    raw, unit = index.raw, index.unit
    if limit is not None:
        a, b, raw, unit = a[:limit], b[:limit], raw[:limit], unit[:limit]
    direction = f"{'-'.join(map(str, task.inputs))}->{'-'.join(map(str, task.outputs))}"
    if mode == "cosine":
        return SimilarityMatrix(cosine_scores(a, unit), direction)
    if mode == "energy":
        return SimilarityMatrix(-energy_matrix(a, b, raw, alpha), direction)
    raise PreconditionError(f"unknown retrieval mode {mode!r}")


def is_classification(task, dataset):
    kinds = {m.id: m.kind for m in dataset.modalities}
    return len(task.outputs) == 1 and kinds[task.outputs[0]] == ONE_HOT


def evaluate_task(predictor, dataset, task, split="test", ks=(1, 5, 10), mode="cosine",
                  alpha=0.5) -> EvalReport:
    report = EvalReport()
    pred = predict_split(predictor, dataset, task, split)
    target = dataset.gather(task.outputs, np.arange(*dataset.split_range(split)))
    a_unit = _unit_rows(pred.out_a.data)
    t_unit = _unit_rows(target)
    cos_pos = (a_unit * t_unit).sum(axis=1)
    dist_pos = ((pred.out_b.data - target) ** 2).sum(axis=1)
    report.energy_mean = float(np.mean(alpha * dist_pos + (1 - alpha) * (1 - cos_pos)))
    if is_classification(task, dataset):
        num_classes = target.shape[1]
        # candidates are the class indicator vectors: cosine argmax == coordinate argmax
        predicted = np.argmax(a_unit, axis=1)
        truth = np.argmax(target, axis=1)
        report.classification = classify_metrics(predicted, truth, num_classes)
        # retrieval over the class candidates, same conservative tie rule
        true_score = a_unit[np.arange(len(truth)), truth][:, None]
        ranks = (a_unit >= true_score).sum(axis=1) - 1
        report.r_at = {k: float(np.mean(ranks < k)) for k in ks if k <= num_classes}
    else:
        n = target.shape[0]
        sim = similarity_matrix(predictor, dataset, task, split, mode=mode, alpha=alpha)
        report.r_at = recall_at_k(sim, [k for k in ks if k <= n])
    return report


# ---------------------------------------------------------------- latency


@dataclass
class LatencyStats:
    cached_mean: float
    cached_p95: float
    full_mean: float
    full_p95: float
    cached_samples: list
    full_samples: list
    candidate_passes_cached: int
    candidate_passes_full: int

    @property
    def speedup(self):
        return self.full_mean / self.cached_mean

    def as_dict(self):
        d = asdict(self)
        d["speedup"] = self.speedup
        return d


def latency_harness(queries, task, predictor, index: CandidateIndex, dataset, repeats=3):
    """Per-query wall time of cached retrieval versus recomputing candidates.

    ``queries`` is a list of per-sample dicts. One untimed warmup pass runs
    first; each repeat contributes one mean-per-query sample.
    """
    if repeats < 3:
        raise PreconditionError("latency_harness needs repeats >= 3")
    _check_index(task, index)

    def cached(q, encoder):
        pred = predictor.forward_batch({m: np.atleast_2d(q[m]) for m in task.inputs}, task)
        return rank_candidates(cosine_scores(pred.out_a.data, index.unit)[0])

    def full(q, encoder):
        raw, norms = encoder.encode_all(dataset, index.rows)
        unit = raw / norms[:, None]
        pred = predictor.forward_batch({m: np.atleast_2d(q[m]) for m in task.inputs}, task)
        return rank_candidates(cosine_scores(pred.out_a.data, unit)[0])

    def timed(fn):
        encoder = CandidateEncoder(index.modality_ids)
        samples = []
        for q in queries[:1]:
            fn(q, encoder)
        encoder.calls = 0
        for _ in range(repeats):
            t0 = time.perf_counter()
            for q in queries:
                fn(q, encoder)
            samples.append((time.perf_counter() - t0) / len(queries))
        per_query = encoder.calls // (repeats * len(queries))
        return samples, per_query

    c_samples, c_calls = timed(cached)
    f_samples, f_calls = timed(full)
    return LatencyStats(float(np.mean(c_samples)), float(np.percentile(c_samples, 95)),
                        float(np.mean(f_samples)), float(np.percentile(f_samples, 95)),
                        c_samples, f_samples, c_calls, f_calls)


# ---------------------------------------------------------------- CSV outputs


SWEEP_FIELDS = ("alpha", "seed", "r_at_1")


def emit_sweep_csv(rows, path=None):
    """Rows are ``(alpha, seed, r_at_1)`` tuples; returns the CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for alpha, seed, r1 in rows:
        w.writerow([repr(float(alpha)), int(seed), repr(float(r1))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_sweep_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != SWEEP_FIELDS:
        raise PreconditionError(f"unexpected sweep header {header}")
    return [(float(a), int(s), float(r)) for a, s, r in reader]


def alpha_sweep(alphas, runner, seeds=(0,)):
    """Train and score one model per (alpha, seed).

    ``runner(alpha, seed)`` must train from the seed's fixed initialization
    and return mean R@1. Returns rows for :func:`emit_sweep_csv`.
    """
    alphas = list(alphas)
    if not alphas:
        raise PreconditionError("alpha sweep needs at least one alpha")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise PreconditionError(f"alpha {a} outside [0, 1]")
    return [(a, s, float(runner(a, s))) for a in alphas for s in seeds]


def sweep_means(rows):
    out = {}
    for a, _, r in rows:
        out.setdefault(a, []).append(r)
    return {a: float(np.mean(v)) for a, v in out.items()}


def diagonal_margin(values):
    values = np.asarray(values)
    n = min(values.shape)
    diag = np.diagonal(values)[:n]
    mask = ~np.eye(values.shape[0], values.shape[1], dtype=bool)
    return float(diag.mean() - values[mask].mean())


def export_similarity_matrix(predictor, dataset, task, path, split="test", cap=64):
    """Write the first ``cap`` x ``cap`` block of the similarity matrix as CSV.

    The last line is ``margin,<mean diagonal minus mean off-diagonal>``.
    """
    sim = similarity_matrix(predictor, dataset, task, split, limit=cap)
    values = sim.values.astype(np.float32)
    margin = diagonal_margin(values.astype(np.float64))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query"] + [f"c{j}" for j in range(values.shape[1])])
    for i, row in enumerate(values):
        w.writerow([i] + [repr(float(v)) for v in row])
    w.writerow(["margin", repr(margin)])
    Path(path).write_text(buf.getvalue())
    return values, margin


def load_similarity_csv(path):
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    body = [r for r in rows[1:] if r[0] != "margin"]
    margin = float(next(r[1] for r in rows if r[0] == "margin"))
    return np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float32), margin
