import json
import math

import numpy as np
import pytest

from m3jepa.config import preset
from m3jepa.errors import DimensionError, FormatError, NumericError, PreconditionError, TruncatedError
from m3jepa.numeric import NArray
from m3jepa.pipeline import make_dataset, make_predictor, variant
from m3jepa.trainer import (Trainer, TrainConfig, TrainState, adam_update, convergence_gap,
                            load_checkpoint, lr_at, restore_params, resume, save_checkpoint,
                            task_for_step)


def tiny(**overrides):
    return variant(preset("tiny"), None, **overrides)


def make_trainer(run, state=None):
    return Trainer(make_dataset(run), run.tasks, make_predictor(run), run.loss, run.train,
                   run.to_doc(), state)


# ---------------------------------------------------------------- schedule


def test_task_for_step():
    assert task_for_step(5, ["a", "b"]) == "b"
    assert [task_for_step(i, [7]) for i in range(3)] == [7, 7, 7]
    assert [task_for_step(i, [0, 1, 2]) for i in range(6)] == [0, 1, 2, 0, 1, 2]
    with pytest.raises(PreconditionError):
        task_for_step(0, [])


def test_lr_schedule_points():
    cfg = TrainConfig(steps=1000, lr_init=1e-3, lr_final=1e-5, warmup_frac=0.1)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(5e-4, abs=1e-15)
    assert abs(lr_at(100, cfg) - 1e-3) < 1e-15
    assert abs(lr_at(1000, cfg) - 1e-5) < 1e-15
    assert abs(lr_at(550, cfg) - (1e-3 + 1e-5) / 2) < 1e-15


def test_lr_continuous_at_junction():
    cfg = TrainConfig(steps=1000, lr_init=1e-3, lr_final=1e-5, warmup_frac=0.1)
    left, right = lr_at(100 - 1e-9, cfg), lr_at(100, cfg)
    assert abs(left - right) < 1e-12


def test_train_config_validation():
    for kw in ({"warmup_frac": 1.0}, {"lr_init": 1e-5, "lr_final": 1e-3}, {"schedule": "x"},
               {"batch_size": 1}, {"steps": -1}):
        with pytest.raises(PreconditionError):
            TrainConfig(**kw)


# ---------------------------------------------------------------- Adam


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta *= 1 - lr * wd
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


@pytest.mark.parametrize("wd", [0.0, 0.005])
def test_adam_matches_scalar_oracle_on_quadratic(wd):
    cfg = TrainConfig(weight_decay=wd)
    p = NArray([2.0], requires_grad=True)
    state = TrainState()
    # loss (p - 0.5)^2, gradient 2 (p - 0.5) recomputed at each step
    got, grads = [], []
    for _ in range(3):
        p.grad = 2.0 * (p.data - 0.5)
        grads.append(float(p.grad[0]))
        adam_update({"p": p}, state, 0.1, cfg)
        got.append(float(p.data[0]))
    want = scalar_adam(2.0, grads, 0.1, wd=wd)
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)
    assert state.updates["p"] == 3


def test_zero_gradient_without_decay_leaves_params():
    cfg = TrainConfig(weight_decay=0.0)
    p = NArray(np.arange(4.0), requires_grad=True)
    p.grad = np.zeros(4)
    adam_update({"p": p}, TrainState(), 1e-3, cfg)
    np.testing.assert_array_equal(p.data, np.arange(4.0))


def test_params_without_gradient_are_skipped():
    p, q = NArray([1.0], requires_grad=True), NArray([1.0], requires_grad=True)
    p.grad = np.array([1.0])
    state = TrainState()
    touched = adam_update({"p": p, "q": q}, state, 1e-3, TrainConfig())
    assert touched == ["p"] and "q" not in state.m and q.data[0] == 1.0


def test_agd_step_touches_only_its_task():
    run = tiny(**{"train.warmup_frac": 0.0})
    tr = make_trainer(run)
    params = tr.predictor.named()
    before = {n: p.data.copy() for n, p in params.items()}
    tr.step()  # step 0 trains task 1: x -> y
    task = run.tasks[0]
    changed = {n for n in params if not np.array_equal(params[n].data, before[n])}
    assert f"in_proj.{task.input_sig}" in changed
    other_in = f"in_proj.{run.tasks[1].input_sig}"
    assert other_in not in changed and other_in not in tr.state.m
    assert "adapter.2" not in changed
    # K=1: each gate routes every row to one expert; experts nobody picked stay put
    for n in changed:
        assert params[n].grad is not None
    assert changed == set(tr.state.m)


def test_joint_step_logs_every_task():
    run = tiny(**{"train.schedule": "joint"})
    recs = make_trainer(run).step()
    assert [r["task"] for r in recs] == [1, 2]
    assert all(math.isfinite(r["total"]) for r in recs)


def test_non_finite_loss_aborts_with_rows():
    run = tiny()
    tr = make_trainer(run)
    tr.predictor.named()["in_proj.1"].data[:] = np.nan
    with pytest.raises(NumericError, match="batch rows"):
        tr.step()


def test_loss_decreases_on_noise_free_data():
    run = variant(preset("two-modal-clean"), 0, **{"train.steps": 50})
    tr = make_trainer(run)
    tr.run()
    for tid in (1, 2):
        seq = [r["total"] for r in tr.records if r["task"] == tid]
        assert np.mean(seq[-5:]) < np.mean(seq[:5])


# ---------------------------------------------------------------- runs and checkpoints


def test_zero_steps_writes_initial_checkpoint(tmp_path):
    run = tiny(**{"train.steps": 0})
    tr = make_trainer(run)
    tr.run(checkpoint_path=tmp_path / "c.m3jp")
    ck = load_checkpoint(tmp_path / "c.m3jp")
    assert ck.step == 0 and ck.moments == {}
    for name, p in tr.predictor.named().items():
        np.testing.assert_array_equal(ck.tensors[name], p.data.astype(np.float32))


def test_identical_runs_give_identical_checkpoints(tmp_path):
    for name in ("a", "b"):
        make_trainer(tiny()).run(checkpoint_path=tmp_path / f"{name}.m3jp")
    assert (tmp_path / "a.m3jp").read_bytes() == (tmp_path / "b.m3jp").read_bytes()


def test_checkpoint_round_trip(tmp_path):
    tr = make_trainer(tiny())
    tr.run(checkpoint_path=tmp_path / "a.m3jp")
    ck = load_checkpoint(tmp_path / "a.m3jp")
    assert ck.step == 20 and ck.config == tr.config_doc
    state = ck.state()
    assert state.updates == tr.state.updates and state.cursors == tr.state.cursors
    for name in tr.state.m:
        np.testing.assert_array_equal(state.m[name], tr.state.m[name].astype(np.float32))
    restored = make_predictor(tiny())
    restore_params(restored.named(), ck.tensors)
    save_checkpoint(restored.named(), state, ck.config, tmp_path / "b.m3jp")
    assert (tmp_path / "a.m3jp").read_bytes() == (tmp_path / "b.m3jp").read_bytes()


def test_checkpoint_into_mismatched_model(tmp_path):
    make_trainer(tiny()).run(checkpoint_path=tmp_path / "a.m3jp")
    ck = load_checkpoint(tmp_path / "a.m3jp")
    wider = make_predictor(tiny(**{"moe.h": 6}))
    with pytest.raises(DimensionError, match="expert.0.w_in"):
        restore_params(wider.named(), ck.tensors)
    more = make_predictor(tiny(**{"moe.N": 3}))
    with pytest.raises(DimensionError, match="missing"):
        restore_params(more.named(), ck.tensors)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "a.m3jp"
    make_trainer(tiny()).run(checkpoint_path=path)
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedError):
        load_checkpoint(path)


def test_resume_continues_the_trajectory(tmp_path):
    run = tiny()
    full = make_trainer(run)
    full.run()
    half = make_trainer(tiny())
    half.run(until=10, checkpoint_path=tmp_path / "h.m3jp")
    ck = load_checkpoint(tmp_path / "h.m3jp")
    rest = resume(ck, make_dataset(run), run.tasks, make_predictor(run), run.loss, run.train)
    rest.run()
    assert rest.state.step == 20
    tail_full = [r["total"] for r in full.records[10:]]
    tail_resumed = [r["total"] for r in rest.records]
    # parameters were rounded to f32 at the split, nothing else differs
    np.testing.assert_allclose(tail_resumed, tail_full, rtol=1e-4)


def test_log_lines_are_json(tmp_path):
    log = tmp_path / "log.jsonl"
    make_trainer(tiny()).run(log_path=log)
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(lines) == 20
    assert set(lines[0]) == {"step", "task", "l_reg", "l_cl", "total", "mi_lb", "lr"}


# ---------------------------------------------------------------- convergence gap


def test_convergence_gap_examples():
    same = [{"task": t, "total": 1.0} for _ in range(20) for t in (1, 2)]
    assert convergence_gap(same) == 0.0
    diff = [{"task": 1, "total": 1.0}] * 20 + [{"task": 2, "total": 1.5}] * 20
    assert convergence_gap(diff) == 0.5
    with pytest.raises(PreconditionError):
        convergence_gap(diff[:30])
    with pytest.raises(PreconditionError):
        convergence_gap(same + [{"task": 3, "total": 0.0}])


# ---------------------------------------------------------------- convex case


def test_convex_agd_is_monotone():
    run = variant(preset("two-modal-noisy"), 0, **{
        "moe.predictor": "linear", "loss.alpha": 1.0, "train.steps": 200,
        "train.lr_init": 1e-3, "train.lr_final": 1e-3, "train.warmup_frac": 0.0,
        "train.batch_size": 128, "synth.num_samples": 256, "synth.train_end": 128,
        "synth.val_end": 192})
    tr = make_trainer(run)
    tr.run()
    for tid in (1, 2):
        seq = np.array([r["total"] for r in tr.records if r["task"] == tid])
        assert np.all(np.diff(seq) <= 1e-9)
