import math

import numpy as np
import pytest

from markov_unlearn import model as M
from markov_unlearn import tensor as T
from markov_unlearn.chains import DataConfig, SequenceSample, build_benchmark, canonical_spec
from markov_unlearn.evaluation import (BigramOracle, EvalReport, WeightSummary, kl_against_chain,
                                       kl_rows, min_k_score, tradeoff_point, true_rows,
                                       weight_length_correlation)

TINY = M.ModelConfig(layers=1, heads=2, d_model=8, max_len=24, init_std=0.3)
SPEC = canonical_spec("Retain", 0.2)


def uniform_model():
    p = M.init(TINY, 0)
    p["head"].data[:] = 0.0
    return p


def test_uniform_model_against_designated_row():
    p = SPEC.transition[0]
    assert float(kl_rows(p[None], np.full((1, 10), math.log(0.1)))[0]) == pytest.approx(0.534111, abs=1e-6)
    # same value through the model path: initial row and designated rows are identical
    ds = [SequenceSample((1, 2, 3, 1, 2), "Retain")]
    assert kl_against_chain(uniform_model(), ds, SPEC) == pytest.approx(0.534111, abs=1e-6)


def test_exact_predictions_give_zero():
    states = np.array([[1, 5, 2, 9]])
    rows = true_rows(SPEC, states)
    assert np.abs(kl_rows(rows, np.log(rows))).max() < 1e-12


def test_reverse_direction_and_bad_direction():
    p = SPEC.transition[0][None]
    q = np.full((1, 10), math.log(0.1))
    expected = float(np.sum(0.1 * (math.log(0.1) - np.log(p))))
    assert float(kl_rows(p, q, "model_true")[0]) == pytest.approx(expected)
    with pytest.raises(ValueError):
        kl_rows(p, q, "sideways")


def test_zero_probability_is_clamped_finite():
    p = np.zeros((1, 10))
    p[0, 0] = 1.0
    q = np.full((1, 10), -np.inf)
    q[0, 1] = 0.0
    assert float(kl_rows(p, q)[0]) == pytest.approx(-math.log(1e-12))


def slow_kl(params, samples, spec):
    total, count = 0.0, 0
    for s in samples:
        for t in range(len(s.states)):
            prefix = [0] + list(s.states[:t])
            with T.no_grad():
                q = np.exp(M.forward(params, np.array([prefix])).data[0, -1].astype(np.float64))
            row = spec.initial if t == 0 else spec.transition[s.states[t - 1] - 1]
            total += float(np.sum(row * (np.log(row) - np.log(np.maximum(q, 1e-12)))))
            count += 1
    return total / count


def test_matches_slow_per_position_oracle():
    bm = build_benchmark(DataConfig(n_retain=10, n_forget1=10, n_forget2=10), seed=1)
    p = M.init(TINY, 4)
    ds = bm.full.where(source="Forget2").samples + bm.full.where(source="Retain").samples[:3]
    spec = canonical_spec("Forget2", 0.2)
    assert kl_against_chain(p, ds, spec, batch_size=4) == pytest.approx(slow_kl(p, ds, spec), abs=1e-6)


def test_duplication_invariance_and_determinism():
    ds = [SequenceSample((1, 2, 3, 4), "Retain"), SequenceSample((7, 1, 1, 2), "Retain")]
    p = M.init(TINY, 2)
    a = kl_against_chain(p, ds, SPEC)
    assert kl_against_chain(p, ds + ds, SPEC) == pytest.approx(a, abs=1e-12)
    assert kl_against_chain(p, ds, SPEC) == a


def test_pooling_and_initial_flags():
    ds = [SequenceSample((1, 2), "Retain"), SequenceSample((1, 2, 3, 4, 5, 6), "Retain")]
    p = M.init(TINY, 2)
    pooled = kl_against_chain(p, ds, SPEC)
    per_seq = kl_against_chain(p, ds, SPEC, pooling="sequences")
    no_init = kl_against_chain(p, ds, SPEC, include_initial=False)
    assert len({pooled, per_seq, no_init}) == 3
    with pytest.raises(ValueError):
        kl_against_chain(p, [], SPEC)


def test_bigram_oracle_recovers_chain():
    bm = build_benchmark(DataConfig(n_retain=4000, n_forget1=10, n_forget2=10), seed=0)
    retain = bm.retain.train()
    oracle = BigramOracle(retain.samples)
    assert np.abs(oracle.transition - SPEC.transition).max() < 0.03
    assert oracle.kl_against_chain(bm.retain.test(), SPEC) < 0.01


def test_min_k_scores():
    p = M.init(TINY, 1)
    s = SequenceSample((3, 1, 4, 1, 5), "x")
    with T.no_grad():
        tok, _ = M.token_logprobs(p, [s.states])
    lp = tok.data[0].astype(np.float64)
    assert min_k_score(p, s, 100) == pytest.approx(lp.mean(), abs=1e-6)
    assert min_k_score(p, s, 20) == pytest.approx(lp.min(), abs=1e-6)
    for k in (10, 40, 60, 90):
        assert min_k_score(p, s, 100) >= min_k_score(p, s, k) - 1e-9
    assert min_k_score(uniform_model(), s, 40) == pytest.approx(math.log(0.1), abs=1e-6)
    with pytest.raises(ValueError):
        min_k_score(p, s, 0)


def test_weight_length_correlation():
    n = np.array([5.0, 20.0, 5.0, 20.0, 12.0])
    assert weight_length_correlation(3 * n + 1, n) == pytest.approx(1.0)
    assert weight_length_correlation(-n, n) == pytest.approx(-1.0)
    assert weight_length_correlation(np.ones(5), n) is None
    with pytest.raises(ValueError):
        weight_length_correlation([1.0], [1.0])


def test_weight_summary_and_report():
    w = WeightSummary.of(np.arange(11.0))
    assert (w.mean, w.p10, w.p50, w.p90, w.n) == (5.0, 1.0, 5.0, 9.0, 11)
    assert WeightSummary.of(np.zeros(0)).n == 0
    rep = EvalReport(3, "NPO", 0.1, 0.2, 0.3)
    assert rep.to_dict()["forget2_kl"] == 0.3


def test_tradeoff_point_diagnostics():
    bm = build_benchmark(DataConfig(n_retain=20, n_forget1=20, n_forget2=20), seed=0)
    tests = {n: bm.full.where(source=n, split="test") for n in ("Retain", "Forget1", "Forget2")}
    specs = {n: canonical_spec(n, 0.2) for n in tests}
    lengths = np.array([5.0, 20.0, 5.0, 20.0])
    weights = 1.0 / lengths
    rep = tradeoff_point(M.init(TINY, 0), tests, specs, iteration=2, method="SimNPO",
                         weights=weights, lengths=lengths,
                         sources=["Forget2", "Forget1", "Forget2", "Forget1"])
    assert rep.iteration == 2 and rep.pearson_r == pytest.approx(-1.0)
    assert rep.weights_by_source["Forget2"].mean == pytest.approx(0.2)
    assert min(rep.retain_kl, rep.forget1_kl, rep.forget2_kl) > 0
