"""Pretraining, retraining, unlearning, relearning and sweeps.

Every random choice is drawn from a ``substream(seed, tag)``; the tags used
here are ``init/<kind>``, ``<kind>/epoch<e>`` for training batches,
``unlearn/order/<pass>`` and ``unlearn/retain/<pass>`` for unlearning batches
and ``relearn/...`` for relearning. Adding a new consumer never shifts an
existing stream.

Pretrained and retrained models are cached under ``run.cache_dir`` keyed by a
digest of the data/model/pretrain sections and the seed.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .chains import (SOURCES, Benchmark, DataConfig, SequenceDataset, build_benchmark,
                     canonical_spec, ceil_fraction, substream)
from .config import ExperimentConfig, TrainConfig, section_digest, to_text
from .evaluation import EvalReport, tradeoff_point
from .objectives import forget_weights, total_objective
from .optim import NonFiniteGradient, OptimState, adamw_step, get_schedule

log = logging.getLogger("markov_unlearn")

CSV_COLUMNS = ["run_id", "method", "iteration", "retain_kl", "forget1_kl", "forget2_kl",
               "weight_mean", "weight_p10", "weight_p90", "pearson_r", "seed"]

SCALARIZATION = ("best cell per method = argmax over cells of min(forget1_kl, forget2_kl) "
                 "at the final iteration, subject to final retain_kl <= retain_cap")


class NumericalFailure(FloatingPointError):
    """Training produced a non-finite loss or gradient; carries what was done so far."""

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


def derive_seed(seed: int, tag: str) -> int:
    h = hashlib.blake2b(f"{seed}/{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


# data -----------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _benchmark_cached(data_json: str, seed: int) -> Benchmark:
    return build_benchmark(DataConfig(**json.loads(data_json)), seed)


def benchmark(cfg: ExperimentConfig) -> Benchmark:
    return _benchmark_cached(json.dumps(dataclasses.asdict(cfg.data), sort_keys=True), cfg.run.seed)


def chain_specs(cfg: ExperimentConfig) -> dict:
    return {name: canonical_spec(name, cfg.data.epsilon, cfg.model.n_states) for name in SOURCES}


def test_sets(bm: Benchmark) -> dict[str, SequenceDataset]:
    return {name: bm.full.where(source=name, split="test") for name in SOURCES}


def evaluate(cfg: ExperimentConfig, params: M.ModelParams, iteration: int = 0, method: str = "",
             **diag) -> EvalReport:
    bm = benchmark(cfg)
    return tradeoff_point(params, test_sets(bm), chain_specs(cfg), iteration=iteration,
                          method=method, **diag, **cfg.kl_kwargs())


# cross-entropy training ------------------------------------------------------------

def token_ce_step(params: M.ModelParams, batch, state: OptimState, lr: float) -> float:
    """One AdamW step on cross-entropy averaged over all tokens of the batch."""
    params.zero_grad()
    with T.Tape() as tape:
        tok, mask = M.token_logprobs(params, batch)
        loss = T.scale(T.sum(T.mul(tok, mask)), -1.0 / float(mask.sum()))
    T.backward(tape, loss)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalFailure(f"non-finite training loss {value}")
    try:
        adamw_step(params.arrays(), params.grads(), state, lr=lr)
    except NonFiniteGradient as e:
        raise NumericalFailure(str(e)) from e
    return value


def train_ce(params: M.ModelParams, data: SequenceDataset, tc: TrainConfig, seed: int, tag: str,
             on_step=None) -> list[float]:
    """Minibatch AdamW over ``data`` for ``tc.epochs`` epochs; returns per-epoch mean loss.

    Raises :class:`NumericalFailure` on divergence, leaving ``params`` at the
    last finite update.
    """
    n = len(data)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    schedule = get_schedule(tc.schedule)
    state = OptimState(lr=tc.lr, weight_decay=tc.weight_decay)
    history = []
    step = 0
    for epoch in range(tc.epochs):
        perm = substream(seed, f"{tag}/epoch{epoch}").permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            batch = [data.samples[i] for i in perm[b * tc.batch_size:(b + 1) * tc.batch_size]]
            lr = schedule(step, total, tc.lr, tc.warmup_steps)
            losses.append(token_ce_step(params, batch, state, lr))
            step += 1
            if on_step is not None:
                on_step(step, steps_per_epoch, params)
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d loss %.5f", tag, epoch + 1, tc.epochs, history[-1])
    return history


def _cache_path(cfg: ExperimentConfig, kind: str) -> Path:
    digest = section_digest(cfg, "data", "model", "pretrain", extra=f"{kind}/{cfg.run.seed}")
    return Path(cfg.run.cache_dir) / f"{kind}-seed{cfg.run.seed}-{digest}.ckpt"


def _train_model(cfg: ExperimentConfig, kind: str, data: SequenceDataset, use_cache: bool):
    path = _cache_path(cfg, kind)
    if use_cache and path.exists():
        params, _, extra = M.load_checkpoint(path)
        log.info("loaded cached %s model from %s", kind, path)
        return params, extra.get("history", [])
    params = M.init(cfg.model, derive_seed(cfg.run.seed, f"init/{kind}"))
    try:
        history = train_ce(params, data, cfg.pretrain, cfg.run.seed, kind)
    except NumericalFailure:
        # params still hold the last finite update
        M.save_checkpoint(path.with_suffix(".failed.ckpt"), params, extra={"kind": kind})
        raise
    if use_cache:
        M.save_checkpoint(path, params, extra={"kind": kind, "history": history,
                                               "config": to_text(cfg)})
    return params, history


def pretrain(cfg: ExperimentConfig, use_cache: bool = True):
    """Original model on the pretraining set; returns (params, per-epoch loss)."""
    return _train_model(cfg, "original", benchmark(cfg).pretrain, use_cache)


def retrain_data(cfg: ExperimentConfig) -> SequenceDataset:
    bm = benchmark(cfg)
    if cfg.data.retrain_on == "forget":
        return bm.forget.train()
    return bm.retain.train()


def retrain(cfg: ExperimentConfig, use_cache: bool = True):
    """Gold-standard model trained without the forget set (see ``data.retrain_on``)."""
    return _train_model(cfg, "retrain", retrain_data(cfg), use_cache)


# unlearning -----------------------------------------------------------------------

@dataclass
class Trajectory:
    method: str
    seed: int
    reports: list[EvalReport] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    params: M.ModelParams | None = None
    state: OptimState | None = None
    iteration: int = 0


def _pass_batch(n: int, batch_size: int, k: int, seed: int, tag: str) -> list[int]:
    """Indices of batch ``k``; each pass over ``n`` items is reshuffled."""
    out = []
    perms: dict[int, np.ndarray] = {}
    for pos in range(k * batch_size, (k + 1) * batch_size):
        p, r = divmod(pos, n)
        if p not in perms:
            perms[p] = substream(seed, f"{tag}/{p}").permutation(n)
        out.append(int(perms[p][r]))
    return out


def _diagnostics(cfg, params, diag, diag_ref):
    if not diag:
        return {}
    u = cfg.unlearn
    lengths = np.array([s.length for s in diag], dtype=np.float64)
    logp = M.sequence_logprob_values(params, diag)
    w = forget_weights(u.method, logp, lengths, diag_ref, u.beta, u.gamma)
    return {"weights": w, "lengths": lengths, "sources": [s.source for s in diag]}


def unlearn(cfg: ExperimentConfig, start: M.ModelParams, *, resume: Trajectory | None = None,
            stop_at: int | None = None, checkpoint_dir: str | Path | None = None,
            on_report=None) -> Trajectory:
    """Run ``unlearn.iterations`` AdamW steps of the configured objective.

    ``start`` is the original model and also the NPO reference. Pass a
    ``resume`` trajectory (e.g. from :func:`load_trajectory_state`) to continue
    from its iteration; ``stop_at`` ends early, which is how checkpoints are
    taken mid-run. ``on_report(traj, report)`` is called after every
    evaluation, e.g. to snapshot parameters at a point of interest.
    """
    u = cfg.unlearn
    seed = cfg.run.seed
    bm = benchmark(cfg)
    forget = bm.forget.train()
    retain = bm.retain.train()
    for s in forget.samples:
        assert s.split == "train", "unlearning must never see test samples"
    ref = start if u.method == "NPO" else None
    diag = forget.samples[:u.diag_samples]
    diag_ref = M.sequence_logprob_values(start, diag) if (u.method == "NPO" and diag) else None

    if resume is None:
        traj = Trajectory(u.method, seed, params=start.copy(),
                          state=OptimState(lr=u.lr, weight_decay=u.weight_decay))
        traj.reports.append(evaluate(cfg, traj.params, 0, u.method,
                                     **_diagnostics(cfg, traj.params, diag, diag_ref)))
        if on_report is not None:
            on_report(traj, traj.reports[0])
    else:
        traj = resume
    end = u.iterations if stop_at is None else min(stop_at, u.iterations)
    while traj.iteration < end:
        k = traj.iteration
        batch = [forget.samples[i] for i in _pass_batch(len(forget), u.batch_size, k, seed, "unlearn/order")]
        assert all(s.split == "train" for s in batch)
        rbatch = None
        if u.lam > 0:
            rbatch = [retain.samples[i] for i in _pass_batch(len(retain), u.batch_size, k, seed, "unlearn/retain")]
        breakdown, grads = total_objective(batch, rbatch, traj.params, ref, u)
        if not math.isfinite(breakdown.total):
            raise NumericalFailure(f"non-finite unlearning loss at iteration {k + 1}", traj)
        try:
            adamw_step(traj.params.arrays(), grads, traj.state)
        except NonFiniteGradient as e:
            raise NumericalFailure(str(e), traj) from e
        traj.iteration += 1
        traj.losses.append(breakdown.total)
        if traj.iteration % u.eval_every == 0 or traj.iteration == u.iterations:
            rep = evaluate(cfg, traj.params, traj.iteration, u.method,
                           **_diagnostics(cfg, traj.params, diag, diag_ref))
            rep.extra["loss"] = breakdown.total
            rep.extra["forget_loss"] = breakdown.forget
            traj.reports.append(rep)
            if on_report is not None:
                on_report(traj, rep)
            log.info("%s it %d loss %.4f retain %.4f f1 %.4f f2 %.4f", u.method, traj.iteration,
                     breakdown.total, rep.retain_kl, rep.forget1_kl, rep.forget2_kl)
    if checkpoint_dir is not None:
        save_trajectory_state(Path(checkpoint_dir) / f"unlearn-it{traj.iteration}.ckpt", traj)
    return traj


def save_trajectory_state(path: str | Path, traj: Trajectory) -> None:
    extra = {"method": traj.method, "seed": traj.seed, "iteration": traj.iteration,
             "optim": traj.state.hyper(), "losses": traj.losses,
             "reports": [r.to_dict() for r in traj.reports]}
    M.save_checkpoint(path, traj.params, extra_arrays=traj.state.to_arrays(), extra=extra)


def load_trajectory_state(path: str | Path) -> Trajectory:
    params, arrays, extra = M.load_checkpoint(path)
    state = OptimState.from_arrays(extra["optim"], arrays)
    traj = Trajectory(extra["method"], extra["seed"], params=params, state=state,
                      iteration=extra["iteration"], losses=list(extra["losses"]))
    traj.reports = [_report_from_dict(d) for d in extra["reports"]]
    return traj


def _report_from_dict(d: dict) -> EvalReport:
    from .evaluation import WeightSummary
    w = WeightSummary(**d["weights"]) if d.get("weights") else None
    by = {k: WeightSummary(**v) for k, v in (d.get("weights_by_source") or {}).items()}
    return EvalReport(d["iteration"], d["method"], d["retain_kl"], d["forget1_kl"], d["forget2_kl"],
                      w, by, d.get("pearson_r"), d.get("extra", {}))


# relearning ------------------------------------------------------------------------

def relearn_subset(cfg: ExperimentConfig) -> SequenceDataset:
    """Shortest (stable order) or random subset of the forget train split."""
    forget = benchmark(cfg).forget.train()
    k = ceil_fraction(cfg.relearn.fraction, len(forget))
    if cfg.relearn.mode == "shortest":
        order = sorted(range(len(forget)), key=lambda i: forget.samples[i].length)
    else:
        order = list(substream(cfg.run.seed, "relearn/subset").permutation(len(forget)))
    return SequenceDataset([forget.samples[i] for i in order[:k]], forget.seed, dict(forget.meta))


def relearn(cfg: ExperimentConfig, params: M.ModelParams, method: str = "") -> list[EvalReport]:
    """Cross-entropy fine-tuning of an unlearned model on a forget subset.

    Reports carry ``extra['epoch']`` as a fractional epoch count.
    """
    rc = cfg.relearn
    subset = relearn_subset(cfg)
    params = params.copy()
    tag = f"relearn/{method}" if method else "relearn"
    reports = [evaluate(cfg, params, 0, method)]
    reports[0].extra["epoch"] = 0.0

    def on_step(step, steps_per_epoch, p):
        cadence = rc.eval_every_steps or steps_per_epoch
        if step % cadence == 0 or step == steps_per_epoch * rc.epochs:
            rep = evaluate(cfg, p, step, method)
            rep.extra["epoch"] = step / steps_per_epoch
            reports.append(rep)

    tc = TrainConfig(epochs=rc.epochs, batch_size=rc.batch_size, lr=rc.lr,
                     weight_decay=rc.weight_decay)
    train_ce(params, subset, tc, cfg.run.seed, tag, on_step=on_step)
    return reports


def epochs_to_recover(reports: list[EvalReport], original_level: float, key: str = "forget2_kl",
                      fraction: float = 0.5) -> float | None:
    """First (fractional) epoch at which the gap to ``original_level`` has shrunk by ``fraction``."""
    start = getattr(reports[0], key)
    target = original_level + (1.0 - fraction) * (start - original_level)
    for r in reports:
        if getattr(r, key) <= target:
            return float(r.extra.get("epoch", r.iteration))
    return None


def first_reaching(reports: list[EvalReport], key: str, threshold: float) -> EvalReport | None:
    for r in reports:
        if getattr(r, key) >= threshold:
            return r
    return None


# output -----------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_rows(run_id: str, seed: int, reports: list[EvalReport], skip_initial: bool = True) -> list[list[str]]:
    rows = []
    for r in reports:
        if skip_initial and r.iteration == 0:
            continue
        w = r.weights
        rows.append([run_id, r.method, str(r.iteration), _fmt(r.retain_kl), _fmt(r.forget1_kl),
                     _fmt(r.forget2_kl), _fmt(w.mean if w else None), _fmt(w.p10 if w else None),
                     _fmt(w.p90 if w else None), _fmt(r.pearson_r), str(seed)])
    return rows


def write_csv(path: str | Path, rows: list[list[str]], header=CSV_COLUMNS, append: bool = False,
              comment: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if fresh:
        if comment:
            buf.write(f"# {comment}\n")
        w.writerow(header)
    w.writerows(rows)
    with open(path, "w" if fresh else "a", newline="") as fh:
        fh.write(buf.getvalue())


def write_jsonl(path: str | Path, reports: list[EvalReport], run_id: str, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for r in reports:
            d = r.to_dict()
            d["run_id"] = run_id
            fh.write(json.dumps(d, sort_keys=True) + "\n")


def prepare_run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.run.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(to_text(cfg))
    return out


# sweep ------------------------------------------------------------------------------

def sweep_cells(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    s, u = cfg.sweep, cfg.unlearn
    cells = []
    for method in s.methods:
        betas = [s.beta_by_method[method]] if method in s.beta_by_method else (s.betas or [u.beta])
        for beta in betas:
            for gamma in s.gammas or [u.gamma]:
                for lam in s.lambdas or [u.lam]:
                    for seed in s.seeds or [cfg.run.seed]:
                        run_id = f"{method}-b{beta:g}-g{gamma:g}-l{lam:g}-s{seed}"
                        cells.append(cfg.replace(
                            run={"seed": seed, "name": run_id},
                            unlearn={"method": method, "beta": beta, "gamma": gamma, "lam": lam}))
    return cells


def _run_cell(cell: ExperimentConfig, blas_threads: int | None = None):
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=blas_threads):
        start, _ = pretrain(cell)
        traj = unlearn(cell, start)
    return cell.run.name, cell.run.seed, traj.reports


def sweep(cfg: ExperimentConfig, threads: int = 1):
    """One unlearning run per grid cell; returns (rows, summary rows, best per method)."""
    cells = sweep_cells(cfg)
    # pretrain each seed once, serially, so parallel cells only read the cache
    for seed in sorted({c.run.seed for c in cells}):
        pretrain(cfg.replace(run={"seed": seed}))
    if threads > 1 and len(cells) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_cell, cells, [1] * len(cells)))
    else:
        results = [_run_cell(c) for c in cells]
    rows, summary = [], []
    for cell, (run_id, seed, reports) in zip(cells, results):
        rows += csv_rows(run_id, seed, reports)
        last = reports[-1]
        u = cell.unlearn
        summary.append({"run_id": run_id, "method": u.method, "beta": u.beta, "gamma": u.gamma,
                        "lambda": u.lam, "seed": seed, "retain_kl": last.retain_kl,
                        "forget1_kl": last.forget1_kl, "forget2_kl": last.forget2_kl,
                        "score": min(last.forget1_kl, last.forget2_kl),
                        "eligible": last.retain_kl <= cfg.sweep.retain_cap})
    best = {}
    for row in summary:
        if not row["eligible"]:
            continue
        cur = best.get(row["method"])
        if cur is None or row["score"] > cur["score"]:
            best[row["method"]] = row
    for row in summary:
        row["best"] = best.get(row["method"]) is row
    return rows, summary, best, results
