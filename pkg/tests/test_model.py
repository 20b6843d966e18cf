import math

import numpy as np
import pytest

from markov_unlearn import model as M
from markov_unlearn import tensor as T
from markov_unlearn.chains import DataConfig, build_benchmark

TINY = M.ModelConfig(layers=2, heads=2, d_model=16, max_len=12)


def logprobs(params, tokens):
    with T.no_grad():
        return M.forward(params, np.asarray(tokens)).data


@pytest.fixture(scope="module")
def params():
    return M.init(TINY, seed=3)


def test_param_count_is_function_of_config():
    d, n_in, n_out, L = 16, 11, 10, 12
    per_layer = 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d
    expected = n_in * d + L * d + 2 * per_layer + 2 * d + d * n_out
    assert M.param_count(TINY) == expected
    assert sum(t.size for _, t in M.init(TINY, 0).items()) == expected


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(d_model=10, heads=4)


def test_init_is_deterministic():
    a, b, c = M.init(TINY, 1), M.init(TINY, 1), M.init(TINY, 2)
    assert a.digest() == b.digest()
    assert max(np.abs(a[k].data - c[k].data).max() for k in a.tensors) > 0


def test_init_scheme():
    p = M.init(M.ModelConfig(), 0)
    assert np.all(p["h0.ln1.w"].data == 1) and np.all(p["h0.attn.bq"].data == 0)
    assert abs(p["wte"].data.std() - 0.02) < 0.002
    assert p["head"].shape == (128, 10)


def test_rows_are_distributions(params):
    lp = logprobs(params, [[0, 3, 4, 5], [0, 9, 1, 1]])
    assert lp.shape == (2, 4, 10)
    np.testing.assert_allclose(np.exp(lp.astype(np.float64)).sum(axis=-1), 1.0, atol=1e-6)


def test_causality_exact(params):
    rng = np.random.default_rng(0)
    base = np.concatenate([[0], rng.integers(1, 11, size=9)])[None]
    ref = logprobs(params, base)
    for t in range(1, 10):
        pert = base.copy()
        pert[0, t] = pert[0, t] % 10 + 1
        out = logprobs(params, pert)
        np.testing.assert_array_equal(out[0, :t], ref[0, :t])
        assert not np.array_equal(out[0, t:], ref[0, t:])


def test_batch_permutation_equivariance(params):
    rng = np.random.default_rng(1)
    tokens = np.concatenate([np.zeros((5, 1), int), rng.integers(1, 11, size=(5, 7))], axis=1)
    perm = rng.permutation(5)
    np.testing.assert_allclose(logprobs(params, tokens)[perm], logprobs(params, tokens[perm]), atol=1e-6)


def test_length_limit(params):
    with pytest.raises(ValueError):
        M.forward(params, np.zeros((1, TINY.max_len + 1), int))


def test_encode():
    tokens, targets, mask = M.encode([(3, 4, 5), (7,)])
    np.testing.assert_array_equal(tokens, [[0, 3, 4], [0, 0, 0]])
    np.testing.assert_array_equal(targets[0], [2, 3, 4])
    np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])


def test_sequence_logprob_matches_slow_recomputation(params):
    samples = [(3, 4, 5, 6, 1), (9, 9), (2, 7, 7, 8)]
    fast = M.sequence_logprob_values(params, samples)
    for s, val in zip(samples, fast):
        slow = 0.0
        for t in range(len(s)):
            prefix = [0] + list(s[:t])
            slow += float(logprobs(params, [prefix])[0, -1, s[t] - 1])
        assert val == pytest.approx(slow, abs=1e-5)


def test_sequence_logprob_additivity_and_monotonicity(params):
    a, b = (1, 2, 3), (4, 5, 6, 7)
    joint = M.sequence_logprob_values(params, [a, b])
    np.testing.assert_allclose(joint, [M.sequence_logprob_values(params, [a])[0],
                                       M.sequence_logprob_values(params, [b])[0]], atol=1e-5)
    longer = M.sequence_logprob_values(params, [a + (9,)])[0]
    assert longer <= joint[0] + 1e-6


def test_uniform_output_gives_length_times_ln_tenth():
    p = M.init(TINY, 0)
    p["head"].data[:] = 0.0
    val = M.sequence_logprob_values(p, [(1, 2, 3, 4, 5)])[0]
    assert val == pytest.approx(5 * math.log(0.1), abs=1e-5)


def test_fresh_model_is_near_uniform_and_loss_near_ln10():
    bm = build_benchmark(DataConfig(n_retain=300, n_forget1=150, n_forget2=150), seed=0)
    p = M.init(M.ModelConfig(), seed=0)
    tokens, targets, mask = M.encode(bm.pretrain.samples[:256])
    lp = logprobs(p, tokens).astype(np.float64)
    tv = 0.5 * np.abs(np.exp(lp) - 0.1).sum(axis=-1)
    assert tv.max() <= 0.15
    tok = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = -(tok * mask).sum() / mask.sum()
    assert loss == pytest.approx(math.log(10), abs=0.15)


def test_checkpoint_round_trip(tmp_path, params):
    extra = {"adam_m/x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    M.save_checkpoint(tmp_path / "a.ckpt", params, extra_arrays=extra, extra={"note": "hi"})
    loaded, arrays, meta = M.load_checkpoint(tmp_path / "a.ckpt")
    assert loaded.config == params.config
    assert loaded.digest() == params.digest()
    np.testing.assert_array_equal(arrays["adam_m/x"], extra["adam_m/x"])
    assert meta == {"note": "hi"}
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == M.MAGIC


def test_checkpoint_detects_corruption(tmp_path, params):
    M.save_checkpoint(tmp_path / "a.ckpt", params)
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "a.ckpt").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        M.load_checkpoint(tmp_path / "a.ckpt")


def test_float64_checkpoint_is_exact(tmp_path):
    p = M.init(M.ModelConfig(layers=1, heads=1, d_model=4, dtype="float64"), 0)
    M.save_checkpoint(tmp_path / "b.ckpt", p)
    q, _, _ = M.load_checkpoint(tmp_path / "b.ckpt")
    assert q.digest() == p.digest() and q["wte"].dtype == np.float64
