"""KL-to-chain metrics, Min-K% scores and gradient-weight diagnostics.

KL direction is KL(true || model) by default: every position of every test
sequence contributes ``sum_j p_j (log p_j - log q_j)`` where ``p`` is the true
next-state row (the initial distribution at position 0) and ``q`` the model
prediction clamped at ``1e-12``. Values are pooled over all positions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .chains import ChainSpec, SequenceDataset, SequenceSample, transition_counts

PROB_FLOOR = 1e-12


def true_rows(spec: ChainSpec, states: np.ndarray) -> np.ndarray:
    """(N, L, n) true next-state distributions for 1-based ``states`` of shape (N, L)."""
    n, L = states.shape
    rows = np.empty((n, L, spec.n_states))
    rows[:, 0] = spec.initial
    if L > 1:
        rows[:, 1:] = spec.transition[states[:, :-1] - 1]
    return rows


def kl_rows(p: np.ndarray, logq: np.ndarray, direction: str = "true_model") -> np.ndarray:
    """Row-wise KL between true rows ``p`` and model log-probabilities ``logq``."""
    logq = np.maximum(logq, math.log(PROB_FLOOR))
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    if direction == "true_model":
        terms = np.where(pos, p * (logp - logq), 0.0)
    elif direction == "model_true":
        q = np.exp(logq)
        terms = q * (logq - np.where(pos, np.maximum(logp, math.log(PROB_FLOOR)), math.log(PROB_FLOOR)))
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return terms.sum(axis=-1)


def _stack(samples) -> np.ndarray:
    return np.array([s.states if isinstance(s, SequenceSample) else s for s in samples], dtype=np.int64)


def _groups_by_length(samples):
    groups: dict[int, list] = {}
    for s in samples:
        groups.setdefault(len(s.states), []).append(s)
    return groups


def kl_against_chain(params: M.ModelParams, dataset, spec: ChainSpec, *,
                     direction: str = "true_model", include_initial: bool = True,
                     pooling: str = "positions", batch_size: int = 256) -> float:
    """Mean KL between the chain's true next-state rows and the model's predictions."""
    samples = list(dataset)
    if not samples:
        raise ValueError("kl_against_chain: empty dataset")
    if pooling not in ("positions", "sequences"):
        raise ValueError(f"unknown pooling {pooling!r}")
    total, count = 0.0, 0
    per_seq: list[float] = []
    for _, group in sorted(_groups_by_length(samples).items()):
        states = _stack(group)
        for i in range(0, len(group), batch_size):
            st = states[i:i + batch_size]
            tokens, _, _ = M.encode(st.tolist())
            with T.no_grad():
                logq = M.forward(params, tokens).data.astype(np.float64)
            kl = kl_rows(true_rows(spec, st), logq, direction)
            if not include_initial:
                kl = kl[:, 1:]
            total += float(kl.sum(dtype=np.float64))
            count += kl.size
            per_seq.extend(kl.mean(axis=1).tolist())
    if pooling == "sequences":
        return float(np.mean(per_seq))
    return total / count


class BigramOracle:
    """Count-based Markov-chain estimate fitted on state sequences.

    Used as an independent yardstick for what a context-free predictor achieves
    on the same data. ``alpha`` is additive smoothing.
    """

    def __init__(self, samples, n_states: int = 10, alpha: float = 0.0):
        by_len = _groups_by_length(samples)
        counts = np.zeros((n_states, n_states))
        first = np.zeros(n_states)
        for group in by_len.values():
            st = _stack(group)
            counts += transition_counts(st, n_states)
            first += np.bincount(st[:, 0] - 1, minlength=n_states)
        counts += alpha
        first += alpha
        rows = counts.sum(axis=1, keepdims=True)
        self.transition = np.where(rows > 0, counts / np.where(rows > 0, rows, 1), 1.0 / n_states)
        self.initial = first / first.sum()

    def log_predictions(self, states: np.ndarray) -> np.ndarray:
        n, L = states.shape
        q = np.empty((n, L, self.initial.shape[0]))
        q[:, 0] = self.initial
        if L > 1:
            q[:, 1:] = self.transition[states[:, :-1] - 1]
        with np.errstate(divide="ignore"):
            return np.log(q)

    def kl_against_chain(self, dataset, spec: ChainSpec, direction: str = "true_model") -> float:
        total, count = 0.0, 0
        for _, group in sorted(_groups_by_length(list(dataset)).items()):
            st = _stack(group)
            kl = kl_rows(true_rows(spec, st), self.log_predictions(st), direction)
            total += float(kl.sum(dtype=np.float64))
            count += kl.size
        return total / count


def min_k_score(params: M.ModelParams, sample, k_percent: float) -> float:
    """Mean of the ceil(k% * L) lowest per-token log-probabilities."""
    if not 0 < k_percent <= 100:
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    states = sample.states if isinstance(sample, SequenceSample) else tuple(sample)
    with T.no_grad():
        tok, _ = M.token_logprobs(params, [states])
    lp = np.sort(tok.data[0, :len(states)].astype(np.float64))
    k = max(1, math.ceil(k_percent / 100.0 * len(states) - 1e-9))
    return float(lp[:k].mean())


def weight_length_correlation(weights, lengths) -> float | None:
    """Pearson r between per-sample weights and lengths; None when undefined."""
    w = np.asarray(weights, dtype=np.float64)
    n = np.asarray(lengths, dtype=np.float64)
    if w.shape != n.shape or w.size < 2:
        raise ValueError("weights and lengths must be equal-size arrays with >= 2 entries")
    wc, nc = w - w.mean(), n - n.mean()
    denom = math.sqrt(float((wc * wc).sum()) * float((nc * nc).sum()))
    if denom == 0.0:
        return None
    return float(np.clip((wc * nc).sum() / denom, -1.0, 1.0))


@dataclass
class WeightSummary:
    mean: float
    std: float
    p10: float
    p50: float
    p90: float
    n: int

    @classmethod
    def of(cls, w: np.ndarray) -> "WeightSummary":
        w = np.asarray(w, dtype=np.float64)
        if w.size == 0:
            return cls(float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), 0)
        q = np.quantile(w, [0.1, 0.5, 0.9])
        return cls(float(w.mean()), float(w.std()), float(q[0]), float(q[1]), float(q[2]), int(w.size))


@dataclass
class EvalReport:
    iteration: int
    method: str
    retain_kl: float
    forget1_kl: float
    forget2_kl: float
    weights: WeightSummary | None = None
    weights_by_source: dict[str, WeightSummary] = field(default_factory=dict)
    pearson_r: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def tradeoff_point(params: M.ModelParams, tests: dict[str, SequenceDataset],
                   specs: dict[str, ChainSpec], *, iteration: int = 0, method: str = "",
                   weights: np.ndarray | None = None, lengths: np.ndarray | None = None,
                   sources: list[str] | None = None, **kl_kwargs) -> EvalReport:
    """Retain KL and per-source forget KL, packaged with weight diagnostics."""
    kl = {name: kl_against_chain(params, tests[name], specs[name], **kl_kwargs)
          for name in ("Retain", "Forget1", "Forget2")}
    report = EvalReport(iteration, method, kl["Retain"], kl["Forget1"], kl["Forget2"])
    if weights is not None and len(weights):
        report.weights = WeightSummary.of(weights)
        if sources is not None:
            src = np.asarray(sources)
            report.weights_by_source = {s: WeightSummary.of(weights[src == s]) for s in sorted(set(sources))}
        if lengths is not None and len(weights) >= 2:
            report.pearson_r = weight_length_correlation(np.abs(weights), lengths)
    return report
