"""Built-in invariant suite behind ``markov-unlearn verify``.

Each check returns ``(name, passed, detail)``. The same helpers are imported
by the test suite so the CLI and pytest exercise identical code.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import model as M
from . import objectives as O
from . import tensor as T
from .chains import SOURCES, canonical_spec, sample_states, substream, transition_counts


def ridders(central, h: float, shrink: float = 1.4, ntab: int = 10) -> float:
    """Ridders' extrapolation of central differences ``central(step)``.

    Builds a Neville table over steps ``h, h/shrink, ...`` and returns the
    entry with the smallest estimated error, stopping once roundoff makes
    the table diverge.
    """
    c2 = shrink * shrink
    a = [[0.0] * ntab for _ in range(ntab)]
    a[0][0] = central(h)
    best, err = a[0][0], math.inf
    for i in range(1, ntab):
        h /= shrink
        a[0][i] = central(h)
        fac = c2
        for j in range(1, i + 1):
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1)
            fac *= c2
            e = max(abs(a[j][i] - a[j - 1][i]), abs(a[j][i] - a[j - 1][i - 1]))
            if e <= err:
                err, best = e, a[j][i]
        if abs(a[i][i] - a[i - 1][i - 1]) >= 2 * err:
            break
    return best


def gradcheck_model(seed: int, h: float = 3e-4, n_probe: int = 6) -> float:
    """Worst relative error between autodiff and central differences for one random tiny model.

    The model runs in float64 with a larger init scale so gradients are not
    vanishingly small; the scalar under test is a random weighted sum of
    per-token log-probabilities; numerical derivatives use :func:`ridders`.
    """
    rng = substream(seed, "verify/gradcheck")
    heads = int(rng.integers(1, 3))
    cfg = M.ModelConfig(layers=int(rng.integers(1, 3)), heads=heads,
                        d_model=heads * int(rng.integers(2, 5)), n_states=10, max_len=6,
                        init_std=0.5, dtype="float64")
    params = M.init(cfg, int(rng.integers(0, 2**31)))
    lengths = rng.integers(1, cfg.max_len, size=int(rng.integers(1, 4)))
    samples = [tuple(int(s) for s in rng.integers(1, 11, size=n)) for n in lengths]
    coef = rng.normal(size=(len(samples), cfg.max_len))

    def loss_value() -> float:
        with T.no_grad():
            tok, mask = M.token_logprobs(params, samples)
        return float((tok.data * mask * coef[:, :tok.shape[1]]).sum())

    params.zero_grad()
    with T.Tape() as tape:
        tok, mask = M.token_logprobs(params, samples)
        loss = T.sum(T.mul(tok, mask * coef[:, :tok.shape[1]]))
    T.backward(tape, loss)
    grads = params.grads()

    worst = 0.0
    names = list(params.tensors)
    for name in rng.choice(names, size=min(n_probe, len(names)), replace=False):
        arr = params[name].data
        idx = tuple(int(rng.integers(0, d)) for d in arr.shape)
        old = arr[idx]

        def central(step: float) -> float:
            arr[idx] = old + step
            up = loss_value()
            arr[idx] = old - step
            down = loss_value()
            arr[idx] = old
            return (up - down) / (2 * step)

        numeric = ridders(central, h)
        analytic = float(grads[name][idx])
        denom = max(abs(numeric), abs(analytic))
        if denom < 1e-7:
            continue  # both effectively zero (e.g. a masked-out path)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def check_gradients(n_configs: int = 100) -> tuple[str, bool, str]:
    t0 = time.time()
    errs = [gradcheck_model(s) for s in range(n_configs)]
    worst = max(errs)
    return ("autodiff vs finite differences", worst <= 1e-4,
            f"{n_configs} configs, max rel err {worst:.2e}, {time.time() - t0:.1f}s")


def weight_identity_errors(method: str, n: int = 1000, seed: int = 0) -> float:
    """Max |d(forget loss)/d(log pi) - closed-form weight| over ``n`` random tuples."""
    rng = substream(seed, f"verify/identity/{method}")
    logp = -rng.uniform(0.0, 60.0, size=n)
    ref = logp + rng.normal(0.0, 5.0, size=n)
    lengths = rng.integers(1, 41, size=n).astype(np.float64)
    beta = rng.uniform(0.05, 10.0, size=n)
    gamma = rng.uniform(0.0, 3.0, size=n)
    worst = 0.0
    for i in range(n):
        x = T.Tensor(np.array([logp[i]]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.sum(O.forget_losses(method, x, lengths[i:i + 1], ref[i:i + 1],
                                         beta=beta[i], gamma=gamma[i]))
        T.backward(tape, loss)
        w = O.forget_weights(method, logp[i:i + 1], lengths[i:i + 1], ref[i:i + 1],
                             beta=beta[i], gamma=gamma[i])
        worst = max(worst, abs(float(x.grad[0]) - float(w[0])))
    return worst


def check_weight_identities(n: int = 1000) -> list[tuple[str, bool, str]]:
    out = []
    for method in ("GA", "WGradDiff", "NPO", "SimNPO"):
        err = weight_identity_errors(method, n)
        out.append((f"weight identity {method}", err <= 1e-6, f"{n} tuples, max abs err {err:.2e}"))
    return out


# (description, computed, expected)
def closed_form_values() -> list[tuple[str, float, float]]:
    lp5 = 5 * math.log(0.1)
    return [
        ("npo_loss(delta=0, beta=0.1)", float(O.npo_loss([0.0], [0.0], 0.1).data[0]), 13.862944),
        ("npo_loss(delta=-5, beta=0.2)", float(O.npo_loss([-5.0], [0.0], 0.2).data[0]), 3.132617),
        ("simnpo_loss(5 ln 0.1, L=5, beta=4)", float(O.simnpo_loss([lp5], [5], 4.0).data[0]), 4.99975e-5),
        ("npo_weight(delta=-5, beta=0.2)", float(O.npo_weight(-5.0, 0.0, 0.2)), 0.537883),
        ("simnpo_weight(5 ln 0.1, L=5, beta=4)", float(O.simnpo_weight(lp5, 5, 4.0)), 3.99940e-5),
    ]


def check_closed_forms() -> list[tuple[str, bool, str]]:
    return [(name, abs(got - want) <= 1e-6, f"{got:.9g} vs {want:.9g}")
            for name, got, want in closed_form_values()]


def check_limits(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = substream(seed, "verify/limits")
    logp = -rng.uniform(0.0, 60.0, size=1000)
    lengths = rng.integers(1, 41, size=1000)
    gamma = rng.uniform(0.0, 3.0, size=1000)
    w_ref = O.npo_weight(logp, logp, 0.2)
    dev_ref = float(np.abs(w_ref - 1.0).max())
    bound = float((O.simnpo_weight(logp, lengths, 4.0, gamma) * lengths).max())
    # first-order deviations are beta*|delta|/2 and beta*|logp|/(2|y|^2), so the
    # 1e-6 match at beta=1e-6 is checked where those stay below 0.95e-6
    delta = rng.uniform(-1.9, 1.9, size=1000)
    npo_lim = float(np.abs(O.npo_weight(delta, 0.0, 1e-6) - 1.0).max())
    lp_lim = -rng.uniform(0.0, 1.9, size=1000) * lengths.astype(np.float64) ** 2
    sim_lim = float(np.abs(O.simnpo_weight(lp_lim, lengths, 1e-6) - 1.0 / lengths).max())
    return [
        ("NPO weight at theta=ref is 1", dev_ref == 0.0, f"max |w-1| = {dev_ref:.1e}"),
        ("SimNPO weight * |y| < 2", bound < 2.0, f"max {bound:.12g}"),
        ("NPO weight -> 1 at beta=1e-6", npo_lim <= 1e-6, f"max dev {npo_lim:.1e}"),
        ("SimNPO weight -> 1/|y| at beta=1e-6", sim_lim <= 1e-6, f"max dev {sim_lim:.1e}"),
    ]


def generator_statistics(seed: int = 0, n_transitions: int = 50_000, epsilon: float = 0.2):
    """Per-source (max row L1 error, chi-square p-value) from ``n_transitions`` draws per row.

    Each row is exercised through the real sampler by starting every
    sequence in that state and taking one step.
    """
    from scipy.stats import chi2

    from .chains import ChainSpec

    out = {}
    for name in SOURCES:
        spec = canonical_spec(name, epsilon)
        n = spec.n_states
        counts = np.zeros((n, n))
        for r in range(n):
            start = ChainSpec(name, np.eye(n)[r], spec.transition)
            states = sample_states(start, n_transitions, 2, substream(seed, f"verify/gen/{name}/{r}"))
            counts += transition_counts(states, n)
        emp = counts / counts.sum(axis=1, keepdims=True)
        l1 = float(np.abs(emp - spec.transition).sum(axis=1).max())
        expected = n_transitions * spec.transition
        stat = float(((counts - expected) ** 2 / expected).sum())
        out[name] = (l1, float(chi2.sf(stat, n * (n - 1))))
    return out


def check_generator() -> list[tuple[str, bool, str]]:
    out = []
    for name, (l1, p) in generator_statistics().items():
        out.append((f"generator rows {name}", l1 <= 0.02 and p > 0.001, f"L1 {l1:.4f}, chi2 p {p:.3f}"))
    return out


def check_numerics(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = substream(seed, "verify/numerics")
    x = rng.normal(0, 30, size=(64, 10))
    shift = rng.normal(0, 1e3, size=(64, 1))
    a = T.log_softmax(T.Tensor(x)).data
    b = T.log_softmax(T.Tensor(x + shift)).data
    shift_err = float(np.abs(a - b).max())
    z = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    sp = T.softplus(T.Tensor(z)).data
    sp_ok = bool(np.all(np.isfinite(sp)) and np.all(sp >= np.maximum(z, 0)) and
                 np.all(sp <= np.maximum(z, 0) + math.log(2) + 1e-12))
    return [
        ("log_softmax shift invariance", shift_err <= 1e-9, f"max err {shift_err:.1e}"),
        ("softplus finite and bounded", sp_ok, f"softplus({z.tolist()}) = {sp.tolist()}"),
    ]


def run_all(quick: bool = False) -> list[tuple[str, bool, str]]:
    results = [check_gradients(20 if quick else 100)]
    results += check_weight_identities(200 if quick else 1000)
    results += check_closed_forms()
    results += check_limits()
    results += check_generator()
    results += check_numerics()
    return results
