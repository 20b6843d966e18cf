import csv
from pathlib import Path

import numpy as np
import pytest

from markov_unlearn import model as M
from markov_unlearn import objectives as O
from markov_unlearn import optim
from markov_unlearn import runner as R
from markov_unlearn.evaluation import EvalReport


def test_pretrain_is_deterministic_and_cached(tiny_cfg):
    a, ha = R.pretrain(tiny_cfg, use_cache=False)
    b, hb = R.pretrain(tiny_cfg, use_cache=False)
    assert a.digest() == b.digest() and ha == hb
    c, hc = R.pretrain(tiny_cfg)
    d, hd = R.pretrain(tiny_cfg)
    assert c.digest() == a.digest() == d.digest() and hd == ha
    assert len(list(Path(tiny_cfg.run.cache_dir).glob("original-*"))) == 1


def test_retrain_uses_retain_only(tiny_cfg):
    data = R.retrain_data(tiny_cfg)
    assert {s.source for s in data} == {"Retain"} and all(s.split == "train" for s in data)
    alt = tiny_cfg.replace(data={"retrain_on": "forget"})
    assert {s.source for s in R.retrain_data(alt)} == {"Forget1", "Forget2"}


def test_unlearn_reports_and_npo_unit_weights(tiny_cfg):
    start, _ = R.pretrain(tiny_cfg)
    cfg = tiny_cfg.replace(unlearn={"method": "NPO", "beta": 0.2})
    traj = R.unlearn(cfg, start)
    assert [r.iteration for r in traj.reports] == [0, 1, 2, 3, 4]
    w0 = traj.reports[0].weights
    assert w0.mean == 1.0 and w0.std == 0.0 and w0.n == 16
    assert len(traj.losses) == 4
    assert start.digest() != traj.params.digest()


def test_unlearn_only_sees_train_samples(tiny_cfg, monkeypatch):
    seen = []
    real = O.total_objective

    def spy(forget_batch, retain_batch, *args):
        seen.extend(forget_batch)
        seen.extend(retain_batch or [])
        return real(forget_batch, retain_batch, *args)

    monkeypatch.setattr(R, "total_objective", spy)
    start, _ = R.pretrain(tiny_cfg)
    R.unlearn(tiny_cfg.replace(unlearn={"method": "GradDiff", "lam": 1.0, "iterations": 6}), start)
    assert seen and all(s.split == "train" for s in seen)
    assert {s.source for s in seen} == {"Retain", "Forget1", "Forget2"}


def test_pass_batches_cover_each_pass():
    n, bs = 10, 4
    idx = [i for k in range(5) for i in R._pass_batch(n, bs, k, 0, "t")]
    assert sorted(idx[:10]) == list(range(10))
    assert sorted(idx[10:20]) == list(range(10))
    assert idx[:10] != idx[10:20]


def test_resume_is_bit_identical(tiny_cfg, tmp_path):
    start, _ = R.pretrain(tiny_cfg)
    cfg = tiny_cfg.replace(unlearn={"method": "NPO", "beta": 0.5})
    full = R.unlearn(cfg, start)
    half = R.unlearn(cfg, start, stop_at=2, checkpoint_dir=tmp_path / "ck")
    assert half.iteration == 2
    loaded = R.load_trajectory_state(tmp_path / "ck" / "unlearn-it2.ckpt")
    rest = R.unlearn(cfg, start, resume=loaded)
    assert rest.params.digest() == full.params.digest()
    assert [r.to_dict() for r in rest.reports] == [r.to_dict() for r in full.reports]
    assert rest.losses == full.losses


def test_numerical_failure_keeps_trajectory(tiny_cfg, monkeypatch):
    start, _ = R.pretrain(tiny_cfg)
    real = O.total_objective

    def nan_after_two(forget_batch, retain_batch, params, ref, config):
        out, g = real(forget_batch, retain_batch, params, ref, config)
        if nan_after_two.calls >= 2:
            out.total = float("nan")
        nan_after_two.calls += 1
        return out, g

    nan_after_two.calls = 0
    monkeypatch.setattr(R, "total_objective", nan_after_two)
    with pytest.raises(R.NumericalFailure) as exc:
        R.unlearn(tiny_cfg, start)
    assert exc.value.trajectory.iteration == 2
    assert len(exc.value.trajectory.reports) == 3


def test_pretrain_divergence_keeps_last_good_checkpoint(tiny_cfg, monkeypatch):
    real = optim.adamw_step
    calls = {"n": 0}

    def flaky(params, grads, state, lr=None):
        calls["n"] += 1
        if calls["n"] == 2:
            raise optim.NonFiniteGradient("wte")
        return real(params, grads, state, lr)

    monkeypatch.setattr(R, "adamw_step", flaky)
    with pytest.raises(R.NumericalFailure, match="wte"):
        R.pretrain(tiny_cfg)
    failed = list(Path(tiny_cfg.run.cache_dir).glob("*.failed.ckpt"))
    assert len(failed) == 1
    params, _, _ = M.load_checkpoint(failed[0])
    assert np.all(np.isfinite(params["wte"].data))


def test_relearn_shortest_subset_is_forget2(tiny_cfg):
    sub = R.relearn_subset(tiny_cfg)
    assert len(sub) == 10  # ceil(0.2 * 48)
    assert {s.source for s in sub} == {"Forget2"} and {s.length for s in sub} == {5}
    rnd = R.relearn_subset(tiny_cfg.replace(relearn={"mode": "random"}))
    assert len(rnd) == 10 and rnd.samples != sub.samples


def test_relearn_reports_fractional_epochs(tiny_cfg):
    start, _ = R.pretrain(tiny_cfg)
    reps = R.relearn(tiny_cfg, start, "SimNPO")
    epochs = [r.extra["epoch"] for r in reps]
    assert epochs[0] == 0.0 and epochs[-1] == pytest.approx(1.0)
    assert epochs == sorted(epochs) and len(reps) == 4  # 10 samples / batch 4 -> 3 steps


def test_recovery_helpers():
    def rep(i, f2, epoch):
        return EvalReport(i, "x", 0.0, 0.0, f2, extra={"epoch": epoch})

    reps = [rep(0, 2.0, 0.0), rep(1, 1.8, 0.5), rep(2, 1.2, 1.0), rep(3, 1.0, 1.5)]
    assert R.epochs_to_recover(reps, original_level=0.2) == 1.5  # target 1.1
    assert R.epochs_to_recover(reps, original_level=0.2, fraction=0.3) == 1.0  # target 1.46
    assert R.epochs_to_recover(reps, original_level=0.2, fraction=0.99) is None
    assert R.first_reaching(reps[::-1], "forget2_kl", 1.5).iteration == 1


def test_csv_and_jsonl(tmp_path):
    reps = [EvalReport(0, "NPO", 0.1, 0.2, 0.3), EvalReport(1, "NPO", 0.25, 0.5, 1 / 3)]
    rows = R.csv_rows("r", 7, reps)
    assert len(rows) == 1 and rows[0][5] == repr(1 / 3) and rows[0][-1] == "7"
    R.write_csv(tmp_path / "a.csv", rows, comment="note")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "# note" and lines[1].split(",") == R.CSV_COLUMNS
    R.write_csv(tmp_path / "a.csv", rows, append=True)
    body = [r for r in csv.reader(l for l in (tmp_path / "a.csv").read_text().splitlines() if not l.startswith("#"))]
    assert len(body) == 3
    R.write_jsonl(tmp_path / "a.jsonl", reps, "r")
    assert len((tmp_path / "a.jsonl").read_text().splitlines()) == 2


def test_sweep_rows_and_best(tiny_cfg):
    cfg = tiny_cfg.replace(sweep={"methods": ["NPO", "SimNPO"], "beta_by_method": {"NPO": 0.2},
                                  "gammas": [0.0, 1.0], "seeds": [0, 1]},
                           unlearn={"iterations": 2})
    cells = R.sweep_cells(cfg)
    assert len(cells) == 2 * 2 * 2
    rows, summary, best, _ = R.sweep(cfg, threads=1)
    assert len(rows) == len(cells) * 2 and len(summary) == len(cells)
    assert {r[0] for r in rows} == {c.run.name for c in cells}
    for method, row in best.items():
        eligible = [s for s in summary if s["method"] == method and s["eligible"]]
        assert row["score"] == max(s["score"] for s in eligible)
    # a grid of one cell is a plain unlearn run
    one = tiny_cfg.replace(unlearn={"iterations": 2})
    rows1, _, _, _ = R.sweep(one)
    start, _ = R.pretrain(one)
    assert rows1 == R.csv_rows(R.sweep_cells(one)[0].run.name, 0, R.unlearn(one, start).reports)
