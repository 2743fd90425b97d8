"""End-to-end runs built from a :class:`RunConfig`: data, training, scoring.

These are the building blocks of the command-line tool and the sweep and
ablation harnesses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .config import RunConfig, apply_overrides, apply_seed, parse_config
from .data import Dataset, generate
from .evaluation import evaluate_task
from .losses import evaluate_losses
from .predictor import (MLPParams, Predictor, build_predictor, mlp_width_cost,
                        moe_param_count)
from .trainer import Trainer, convergence_gap

log = logging.getLogger(__name__)


def make_dataset(run: RunConfig) -> Dataset:
    return generate(run.synth, run.registry)


def make_predictor(run: RunConfig, kind=None):
    return build_predictor(kind or run.predictor, run.moe, run.registry, run.tasks,
                           seed=run.train.seed, adapters=run.adapters)


@dataclass
class RunResult:
    run: RunConfig
    trainer: Trainer
    reports: dict

    @property
    def predictor(self):
        return self.trainer.predictor

    def mean_r1(self):
        """R@1 averaged over tasks; a classification task ranks its class candidates."""
        vals = [r.r_at[1] for r in self.reports.values() if r.r_at]
        return float(np.mean(vals)) if vals else float("nan")

    def gap(self, window=20):
        ids = [t.id for t in self.run.tasks]
        if self.run.train.schedule != "agd" or len(ids) != 2:
            return None
        return convergence_gap(self.trainer.records, ids, window)


def evaluate_run(run: RunConfig, predictor, dataset, split=None, mode=None):
    split = split or run.eval.split
    mode = mode or run.eval.mode
    return {t.id: evaluate_task(predictor, dataset, t, split, tuple(run.eval.ks), mode,
                                run.loss.alpha)
            for t in run.tasks}


def run_experiment(run: RunConfig, dataset=None, kind=None, log_path=None,
                   checkpoint_path=None) -> RunResult:
    dataset = dataset if dataset is not None else make_dataset(run)
    predictor = make_predictor(run, kind)
    trainer = Trainer(dataset, run.tasks, predictor, run.loss, run.train, run.to_doc())
    trainer.run(log_path=log_path, checkpoint_path=checkpoint_path)
    return RunResult(run, trainer, evaluate_run(run, predictor, dataset))


def variant(doc, seed=None, **overrides):
    """Parse ``doc`` with dotted-path overrides and an optional seed."""
    if seed is not None:
        doc = apply_seed(doc, seed)
    return parse_config(apply_overrides(doc, overrides))


# ---------------------------------------------------------------- sweeps / ablations


def alpha_runner(doc):
    def runner(alpha, seed):
        res = run_experiment(variant(doc, seed, **{"loss.alpha": alpha}))
        return res.mean_r1()
    return runner


def ablate(doc, which, values=None, seeds=(0,)):
    """Paired comparison table: list of dicts, one row per variant.

    ``which`` is ``moe-vs-mlp``, ``agd-vs-joint``, ``topk`` or ``experts``.
    Every row of a table shares data and seed; only the named factor varies.
    """
    if which == "moe-vs-mlp":
        variants = [("moe", {}, "moe"), ("mlp", {}, "mlp")]
    elif which == "agd-vs-joint":
        variants = [("agd", {"train.schedule": "agd"}, None),
                    ("joint", {"train.schedule": "joint"}, None)]
    elif which == "table5":
        variants = [("moe+agd", {"train.schedule": "agd"}, "moe"),
                    ("moe+joint", {"train.schedule": "joint"}, "moe"),
                    ("mlp+agd", {"train.schedule": "agd"}, "mlp")]
    elif which in ("topk", "experts"):
        if not values:
            raise ValueError(f"ablation {which!r} needs a non-empty value list")
        key = "moe.K" if which == "topk" else "moe.N"
        variants = [(f"{key.split('.')[1]}={v}", {key: v}, None) for v in values]
    else:
        raise ValueError(f"unknown ablation {which!r}")
    rows = []
    for label, over, kind in variants:
        r1s, accs = [], []
        params = None
        for seed in seeds:
            run = variant(doc, seed, **over)
            res = run_experiment(run, kind=kind)
            r1s.append(res.mean_r1())
            params = res.predictor.params.count()
            accs += [r.classification["accuracy"] for r in res.reports.values()
                     if r.classification]
        rows.append({"variant": label, "params": params, "r_at_1": float(np.mean(r1s)),
                     "r_at_1_per_seed": r1s,
                     "accuracy": float(np.mean(accs)) if accs else None,
                     "accuracy_per_seed": accs})
    return rows


def format_table(rows):
    cols = ["variant", "params", "r_at_1", "accuracy"]
    lines = [" | ".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append(" | ".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------- gradient check


FAMILIES = ("expert", "gate.1", "gate.2", "tag", "in_proj", "out_proj", "adapter", "mlp")


def family_of(name):
    for fam in FAMILIES:
        if name.startswith(fam + "."):
            return fam
    return name


def gradcheck(run: RunConfig, eps=1e-5, tol=1e-4, batch_rows=None):
    """Reverse-mode vs central differences, per parameter family.

    Runs the MoE predictor (with every modality's adapter) and the matched
    MLP baseline on one batch per task, dropout disabled.
    """
    if run.moe.h > 8 or run.moe.N > 2:
        raise ValueError("gradcheck is restricted to tiny presets (h <= 8, N <= 2)")
    dataset = make_dataset(run)
    b = run.train.batch_size
    rows = np.arange(b) if batch_rows is None else np.asarray(batch_rows)
    arrays = {m.id: dataset.arrays[m.id][rows] for m in run.modalities}
    adapters = sorted({m.id for m in run.modalities})
    moe = build_predictor("moe", run.moe, run.registry, run.tasks, run.train.seed, adapters)
    # tiny shapes cannot hit the 2% budget; any width exercises the same rules
    width = max(1, round(moe_param_count(run.moe, run.registry, run.tasks)
                         / mlp_width_cost(run.registry, run.tasks)))
    mlp = Predictor(MLPParams(width, run.registry, run.tasks, run.train.seed))
    results = {}
    for predictor in (moe, mlp):
        def loss_value():
            total = None
            for task in run.tasks:
                pred = predictor.forward_batch(arrays, task, train_mode=False)
                target = np.concatenate([arrays[m] for m in sorted(task.outputs)], axis=1)
                t_loss, _ = evaluate_losses(pred.out_a, pred.out_b, target, run.loss)
                total = t_loss if total is None else nm.add(total, t_loss)
            return total

        predictor.params.zero_grad()
        with nm.Tape():
            nm.backward(loss_value())
        for name, p in predictor.named().items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = nm.finite_diff_grad(loss_value, p, eps)
            fam = family_of(name)
            a, n = results.setdefault(fam, ([], []))
            a.append(analytic.ravel().copy())
            n.append(numeric.ravel())
    table = []
    for fam in FAMILIES:
        if fam not in results:
            continue
        a, n = results[fam]
        err = nm.rel_error(np.concatenate(a), np.concatenate(n))
        table.append({"family": fam, "rel_error": err, "passed": err < tol})
    return {"rows": table, "dropout_disabled": True, "eps": eps, "tolerance": tol,
            "passed": all(r["passed"] for r in table)}
