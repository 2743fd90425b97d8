"""``m3jepa`` command-line tool.

Every command takes a config: a preset name or a JSON file. Dotted flags
override single fields, e.g. ``m3jepa train two-modal-noisy --train.steps=100``.
Exit codes: 0 success, 1 validation error, 2 runtime/numeric error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import evaluation as ev
from .config import apply_overrides, apply_seed, env_seed, load_config_doc, parse_config
from .data import generate, load_dataset, save_dataset
from .errors import ConfigError, FormatError, M3Error, PreconditionError
from .pipeline import ablate, alpha_runner, evaluate_run, format_table, gradcheck, make_predictor
from .trainer import Trainer, convergence_gap, load_checkpoint, restore_params, resume

log = logging.getLogger("m3jepa")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def _parse_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(extra):
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"override {tok} needs a value")
        out[key] = _parse_value(raw)
    return out


def _run_config(args, extra_overrides=None):
    doc = load_config_doc(args.config)
    overrides = dict(args.overrides)
    overrides.update(extra_overrides or {})
    doc = apply_overrides(doc, overrides)
    seed = env_seed()
    if seed is not None:
        doc = apply_seed(doc, seed)
    return parse_config(doc)


def _dataset(run, path=None):
    path = Path(path or run.paths.dataset)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run `m3jepa gen-data` first")
    return load_dataset(path)


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args):
    run = _run_config(args)
    out = args.out or run.paths.dataset
    ds = generate(run.synth, run.registry)
    _ensure_parent(out)
    save_dataset(ds, out)
    print(f"wrote {out}: {ds.num_samples} samples "
          f"(train {ds.split_size('train')}, val {ds.split_size('val')}, "
          f"test {ds.split_size('test')})")
    for m in ds.modalities:
        print(f"  modality {m.id} {m.name}: dim {m.dim} ({m.kind})")
    return EXIT_OK


def _load_model(run, checkpoint_path):
    ckpt = load_checkpoint(checkpoint_path)
    predictor = make_predictor(run)
    restore_params(predictor.named(), ckpt.tensors)
    return predictor, ckpt


def cmd_train(args):
    extra = {"train.schedule": args.schedule} if args.schedule else {}
    run = _run_config(args, extra)
    ds = _dataset(run, args.dataset)
    ckpt_path = args.checkpoint or run.paths.checkpoint
    log_path = args.log or run.paths.log
    _ensure_parent(ckpt_path)
    _ensure_parent(log_path)
    predictor = make_predictor(run)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        trainer = resume(ckpt, ds, run.tasks, predictor, run.loss, run.train, run.to_doc())
        print(f"resuming at step {trainer.state.step}")
    else:
        Path(log_path).write_text("")
        trainer = Trainer(ds, run.tasks, predictor, run.loss, run.train, run.to_doc())
    trainer.run(log_path=log_path, checkpoint_path=ckpt_path)
    print(f"trained to step {trainer.state.step} ({run.train.schedule}); checkpoint {ckpt_path}")
    for tid, loss in sorted(trainer.final_losses().items()):
        print(f"  task {tid}: final loss {loss:.6f}")
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line]
    ids = [t.id for t in run.tasks]
    if run.train.schedule == "agd" and len(ids) == 2:
        try:
            print(f"  convergence_gap: {convergence_gap(records, ids):.6f}")
        except PreconditionError as exc:
            print(f"  convergence_gap: n/a ({exc})")
    return EXIT_OK


def cmd_eval(args):
    extra = {"eval.mode": args.mode} if args.mode else {}
    run = _run_config(args, extra)
    ds = _dataset(run, args.dataset)
    predictor, _ = _load_model(run, args.checkpoint or run.paths.checkpoint)
    reports = evaluate_run(run, predictor, ds)
    doc = {str(tid): json.loads(r.to_json()) for tid, r in reports.items()}
    if args.latency:
        task = next(t for t in run.tasks if not ev.is_classification(t, ds))
        index = ev.build_index(ds, run.eval.split, task.outputs)
        lo, hi = ds.split_range(run.eval.split)
        queries = [{m: ds.arrays[m][i] for m in task.inputs} for i in range(lo, min(hi, lo + 32))]
        stats = ev.latency_harness(queries, task, predictor, index, ds, repeats=3)
        doc[str(task.id)]["latency"] = stats.as_dict()
    out = args.out or str(Path(run.paths.output) / "eval_report.json")
    _ensure_parent(out)
    Path(out).write_text(json.dumps(doc, indent=2, sort_keys=True))
    for tid, r in sorted(reports.items()):
        parts = [f"R@{k}={v:.4f}" for k, v in r.r_at.items()]
        parts += [f"{k}={v:.4f}" for k, v in r.classification.items()]
        print(f"task {tid} ({run.eval.mode}): " + ", ".join(parts))
    if args.sim_csv:
        task = next(t for t in run.tasks if not ev.is_classification(t, ds))
        _, margin = ev.export_similarity_matrix(predictor, ds, task, args.sim_csv,
                                                run.eval.split, run.eval.matrix_cap)
        print(f"similarity matrix -> {args.sim_csv} (margin {margin:.4f})")
    print(f"report -> {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    run = _run_config(args)
    result = gradcheck(run)
    print(f"{'family':<10} {'rel_error':>12}  status   (dropout disabled: "
          f"{result['dropout_disabled']})")
    for row in result["rows"]:
        print(f"{row['family']:<10} {row['rel_error']:>12.3e}  "
              f"{'PASS' if row['passed'] else 'FAIL'}")
    return EXIT_OK if result["passed"] else EXIT_RUNTIME


def _int_list(raw):
    return [int(v) for v in raw.split(",") if v]


def cmd_sweep_alpha(args):
    run = _run_config(args)
    alphas = [float(a) for a in args.alphas.split(",")]
    seeds = _int_list(args.seeds) if args.seeds else [run.train.seed]
    rows = ev.alpha_sweep(alphas, alpha_runner(run.to_doc()), seeds)
    out = args.out or str(Path(run.paths.output) / "alpha_sweep.csv")
    _ensure_parent(out)
    ev.emit_sweep_csv(rows, out)
    for a, r in ev.sweep_means(rows).items():
        print(f"alpha={a:<5} mean R@1={r:.4f}")
    print(f"csv -> {out}")
    return EXIT_OK


def cmd_ablate(args):
    run = _run_config(args)
    which, _, raw = args.which.partition(":")
    values = _int_list(raw.strip("[]")) if raw else None
    seeds = _int_list(args.seeds) if args.seeds else [run.train.seed]
    rows = ablate(run.to_doc(), which, values, seeds)
    print(format_table(rows))
    if args.out:
        _ensure_parent(args.out)
        Path(args.out).write_text(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_export_sim(args):
    run = _run_config(args)
    ds = _dataset(run, args.dataset)
    predictor, _ = _load_model(run, args.checkpoint or run.paths.checkpoint)
    tasks = {t.id: t for t in run.tasks}
    task = tasks[args.task] if args.task is not None else run.tasks[0]
    out = args.out or str(Path(run.paths.output) / f"similarity_task{task.id}.csv")
    _ensure_parent(out)
    _, margin = ev.export_similarity_matrix(predictor, ds, task, out, run.eval.split,
                                            args.cap or run.eval.matrix_cap)
    print(f"similarity matrix -> {out} (diagonal margin {margin:.4f})")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="m3jepa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="preset name or JSON config path")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate and save a synthetic dataset")
    sp.add_argument("--out")
    sp = add("train", cmd_train, "train a predictor")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--log")
    sp.add_argument("--resume", metavar="CHECKPOINT")
    sp.add_argument("--schedule", choices=["agd", "joint"])
    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--mode", choices=["cosine", "energy"])
    sp.add_argument("--out")
    sp.add_argument("--sim-csv")
    sp.add_argument("--latency", action="store_true")
    add("gradcheck", cmd_gradcheck, "finite-difference gradient check (tiny presets)")
    sp = add("sweep-alpha", cmd_sweep_alpha, "train one model per loss weight")
    sp.add_argument("--alphas", default="0,0.5,1")
    sp.add_argument("--seeds")
    sp.add_argument("--out")
    sp = add("ablate", cmd_ablate, "paired ablation table")
    sp.add_argument("which", help="moe-vs-mlp | agd-vs-joint | table5 | topk:2,4,6 | experts:2,8,12")
    sp.add_argument("--seeds")
    sp.add_argument("--out")
    sp = add("export-sim", cmd_export_sim, "write a similarity matrix CSV")
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--task", type=int)
    sp.add_argument("--cap", type=int)
    sp.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.overrides = parse_overrides(extra)
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (M3Error, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
