"""Forget/retain losses for GA, GradDiff, weighted GradDiff, NPO and SimNPO.

Everything takes sequence log-probabilities ``log pi(y)`` and stays in log
space: probability ratios raised to ``beta`` are rewritten as sigmoids and
``-log sigmoid(z)`` is always ``softplus(-z)``.

The per-sample gradient weight of a forget loss is its derivative with
respect to ``log pi_theta(y)``. For NPO that is ``2 sigmoid(beta * delta)``
with ``delta = log pi_theta - log pi_ref``; for SimNPO it is
``(2/|y|) sigmoid(beta * log pi_theta / |y| + gamma)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor

METHODS = ("GA", "GradDiff", "WGradDiff", "NPO", "SimNPO")


@dataclass
class UnlearnConfig:
    method: str = "SimNPO"
    beta: float = 4.0
    gamma: float = 0.0
    lam: float = 0.0
    iterations: int = 50
    batch_size: int = 4
    lr: float = 5e-4
    weight_decay: float = 0.01
    eval_every: int = 1
    diag_samples: int = 256

    def validate(self) -> list[str]:
        errs = []
        if self.method not in METHODS:
            errs.append(f"unlearn.method: {self.method!r} not in {METHODS}")
        if self.method in ("NPO", "SimNPO") and not self.beta > 0:
            errs.append(f"unlearn.beta: must be > 0 for {self.method}, got {self.beta}")
        if self.gamma < 0:
            errs.append(f"unlearn.gamma: must be >= 0, got {self.gamma}")
        if self.lam < 0:
            errs.append(f"unlearn.lambda: must be >= 0, got {self.lam}")
        if self.method == "GradDiff" and self.lam == 0:
            errs.append("unlearn.lambda: GradDiff needs lambda > 0 (use GA otherwise)")
        for name in ("iterations", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                errs.append(f"unlearn.{name}: must be >= 1")
        if self.diag_samples < 0:
            errs.append("unlearn.diag_samples: must be >= 0")
        return errs


@dataclass
class LossBreakdown:
    forget: float
    retain: float
    total: float
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _check_beta(beta: float) -> None:
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")


def _t(x) -> Tensor:
    return T.as_tensor(x)


def retain_loss(logp, length) -> Tensor:
    """Per-token negative log-likelihood, ``-log pi(y) / |y|``."""
    return T.mul(T.scale(_t(logp), -1.0), 1.0 / np.asarray(length, dtype=np.float64))


def ga_loss(logp) -> Tensor:
    """Minimising ``log pi(y)`` pushes the forget sequence down (gradient ascent)."""
    return T.scale(_t(logp), 1.0)


def wgraddiff_loss(logp, length) -> Tensor:
    """GA scaled by ``1/|y|``: the ``beta -> 0`` limit of the SimNPO gradient."""
    return T.mul(_t(logp), 1.0 / np.asarray(length, dtype=np.float64))


def npo_loss(logp_theta, logp_ref, beta: float) -> Tensor:
    """``(2/beta) softplus(beta * (log pi_theta - log pi_ref))``, always >= 0."""
    _check_beta(beta)
    delta = T.sub(_t(logp_theta), np.asarray(logp_ref, dtype=_t(logp_theta).dtype))
    return T.scale(T.softplus(T.scale(delta, beta)), 2.0 / beta)


def simnpo_loss(logp_theta, length, beta: float, gamma: float = 0.0) -> Tensor:
    """``(2/beta) softplus(beta * log pi_theta / |y| + gamma)``; no reference model."""
    _check_beta(beta)
    lp = _t(logp_theta)
    z = T.add(T.mul(lp, beta / np.asarray(length, dtype=np.float64)), gamma)
    return T.scale(T.softplus(z), 2.0 / beta)


def _sigmoid(z):
    return np.asarray(T.sigmoid(T.as_tensor(np.asarray(z, dtype=np.float64))).data)


def npo_weight(logp_theta, logp_ref, beta: float):
    """``2 pi_theta^b / (pi_theta^b + pi_ref^b)`` evaluated as ``2 sigmoid(b * delta)``."""
    _check_beta(beta)
    delta = np.asarray(logp_theta, dtype=np.float64) - np.asarray(logp_ref, dtype=np.float64)
    return 2.0 * _sigmoid(beta * delta)


def simnpo_weight(logp_theta, length, beta: float, gamma: float = 0.0):
    """``(2/|y|) sigmoid(beta * log pi_theta / |y| + gamma)``; strictly below ``2/|y|``."""
    _check_beta(beta)
    length = np.asarray(length, dtype=np.float64)
    z = beta * np.asarray(logp_theta, dtype=np.float64) / length + gamma
    return 2.0 / length * _sigmoid(z)


def forget_losses(method: str, logp_theta, lengths, logp_ref=None,
                  beta: float = 1.0, gamma: float = 0.0) -> Tensor:
    """Per-sample forget loss vector for ``method``."""
    if method in ("GA", "GradDiff"):
        return ga_loss(logp_theta)
    if method == "WGradDiff":
        return wgraddiff_loss(logp_theta, lengths)
    if method == "NPO":
        if logp_ref is None:
            raise ValueError("NPO needs reference log-probabilities")
        return npo_loss(logp_theta, logp_ref, beta)
    if method == "SimNPO":
        return simnpo_loss(logp_theta, lengths, beta, gamma)
    raise ValueError(f"unknown method {method!r}")


def forget_weights(method: str, logp_theta, lengths, logp_ref=None,
                   beta: float = 1.0, gamma: float = 0.0) -> np.ndarray:
    """Closed-form d(forget loss)/d(log pi_theta) per sample."""
    logp_theta = np.asarray(logp_theta, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    if method in ("GA", "GradDiff"):
        return np.ones_like(logp_theta)
    if method == "WGradDiff":
        return 1.0 / lengths * np.ones_like(logp_theta)
    if method == "NPO":
        if logp_ref is None:
            raise ValueError("NPO needs reference log-probabilities")
        return npo_weight(logp_theta, logp_ref, beta)
    if method == "SimNPO":
        return simnpo_weight(logp_theta, lengths, beta, gamma)
    raise ValueError(f"unknown method {method!r}")


def total_objective(forget_batch, retain_batch, params: M.ModelParams,
                    ref_params: M.ModelParams | None, config: UnlearnConfig):
    """Mean forget loss + lambda * mean retain loss, with gradients.

    Clears and fills ``params`` gradients. Returns ``(LossBreakdown, grads)``.
    """
    if config.method == "NPO" and ref_params is None:
        raise ValueError("NPO requires ref_params")
    if config.lam > 0 and not retain_batch:
        raise ValueError("lambda > 0 requires a retain batch")
    lengths = np.array([s.length for s in forget_batch], dtype=np.float64)
    logp_ref = None
    if config.method == "NPO":
        logp_ref = M.sequence_logprob_values(ref_params, forget_batch)

    params.zero_grad()
    with T.Tape() as tape:
        logp = M.sequence_logprob(params, forget_batch)
        # float64 from here on; the reduction to the loss is cheap
        logp64 = T.mul(logp, np.float64(1.0))
        f = T.mean(forget_losses(config.method, logp64, lengths, logp_ref, config.beta, config.gamma))
        total = f
        r_val = 0.0
        if config.lam > 0:
            r_lengths = np.array([s.length for s in retain_batch], dtype=np.float64)
            r = T.mean(retain_loss(T.mul(M.sequence_logprob(params, retain_batch), np.float64(1.0)),
                                   r_lengths))
            r_val = r.item()
            total = T.add(f, T.scale(r, config.lam))
    T.backward(tape, total)
    weights = forget_weights(config.method, logp.data, lengths, logp_ref, config.beta, config.gamma)
    out = LossBreakdown(forget=f.item(), retain=r_val, total=total.item(), weights=weights)
    return out, params.grads()
