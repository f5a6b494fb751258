"""Tabular sender-receiver games: reconstruction objective and ELBO form.

A source x ~ p(x) is encoded by a stochastic sender S(m|x), decoded by a
receiver R(x|m).  The reconstruction objective is E[log R(x|m)]; the ELBO
variant adds a prior-alignment term and a sender entropy bonus, each scaled
by beta.  Everything is parametrized by unnormalized logits (row-wise
log-softmax applied internally), so the analytic gradients below are with
respect to logits and every row of a gradient sums to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .probcore import ContractError, log_normalize, logsumexp


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _tables(log_px, sender_logits, receiver_logits, prior_logits=None):
    log_px = log_normalize(np.asarray(log_px, dtype=float))
    log_s = log_softmax(sender_logits, axis=1)
    log_r = log_softmax(receiver_logits, axis=1)
    x_size, m_size = log_s.shape
    if log_px.shape != (x_size,) or log_r.shape != (m_size, x_size):
        raise ContractError("sender (X,M), receiver (M,X), source (X,)")
    if prior_logits is None:
        return log_px, log_s, log_r, None
    log_pi = log_normalize(np.asarray(prior_logits, dtype=float))
    if log_pi.shape != (m_size,):
        raise ContractError("prior must have one entry per message")
    return log_px, log_s, log_r, log_pi


def _xlogy_sum(weights: np.ndarray, logs: np.ndarray) -> float:
    """sum w * logs with the 0 * (-inf) = 0 convention on zero-weight cells."""
    with np.errstate(invalid="ignore"):
        terms = np.where(weights > 0.0, weights * logs, 0.0)
    return float(terms.sum())


def source_entropy(log_px: np.ndarray) -> float:
    log_px = log_normalize(np.asarray(log_px, dtype=float))
    return -_xlogy_sum(np.exp(log_px), log_px)


def mutual_information(log_px, sender_logits) -> float:
    """I(X; M) under the joint p(x) S(m|x)."""
    log_px = log_normalize(np.asarray(log_px, dtype=float))
    log_s = log_softmax(sender_logits, axis=1)
    w = np.exp(log_px[:, None] + log_s)
    log_marg = np.array([logsumexp(log_px + log_s[:, m])
                         for m in range(log_s.shape[1])])
    return _xlogy_sum(w, log_s - log_marg[None, :])


def posterior_receiver(log_px, sender_logits) -> np.ndarray:
    """Bayes decoder log p(x|m) induced by the source and sender, (M, X)."""
    log_px = log_normalize(np.asarray(log_px, dtype=float))
    log_s = log_softmax(sender_logits, axis=1)
    log_w = log_px[:, None] + log_s
    log_marg = np.array([logsumexp(log_w[:, m]) for m in range(log_s.shape[1])])
    return (log_w - log_marg[None, :]).T


def sender_marginal(log_px, sender_logits) -> np.ndarray:
    """Log marginal over messages, sum_x p(x) S(m|x)."""
    log_px = log_normalize(np.asarray(log_px, dtype=float))
    log_s = log_softmax(sender_logits, axis=1)
    return np.array([logsumexp(log_px + log_s[:, m])
                     for m in range(log_s.shape[1])])


def reconstruction_objective(log_px, sender_logits, receiver_logits) -> float:
    """E_{p(x) S(m|x)}[log R(x|m)], the listener's reconstruction score."""
    log_px, log_s, log_r, _ = _tables(log_px, sender_logits, receiver_logits)
    w = np.exp(log_px[:, None] + log_s)
    return _xlogy_sum(w, log_r.T)


@dataclass(frozen=True)
class ElboReport:
    """Decomposed objective; total and total_kl_form agree algebraically."""

    total: float
    communication: float
    surprisal_term: float  # E[log prior(m)]
    entropy_term: float    # E_x[H(S(.|x))]
    total_kl_form: float   # communication - beta * E_x[KL(S(.|x) || prior)]


def elbo_objective(log_px, sender_logits, receiver_logits, prior_logits,
                   beta: float = 1.0) -> ElboReport:
    """Reconstruction plus beta * (prior alignment + sender entropy).

    Computed in two groupings: term-by-term, and with the last two terms
    folded into a KL against the prior.  Both are reported; they must agree
    to numerical precision, which the verification suite asserts.
    """
    log_px, log_s, log_r, log_pi = _tables(log_px, sender_logits,
                                           receiver_logits, prior_logits)
    px = np.exp(log_px)
    s = np.exp(log_s)
    w = px[:, None] * s
    communication = _xlogy_sum(w, log_r.T)
    surprisal = _xlogy_sum(w, log_pi[None, :])
    entropy = -_xlogy_sum(w, log_s)
    with np.errstate(invalid="ignore"):
        kl_cells = np.where(s > 0.0, s * (log_s - log_pi[None, :]), 0.0)
    total_kl = communication - beta * float(px @ kl_cells.sum(axis=1))
    return ElboReport(total=communication + beta * (surprisal + entropy),
                      communication=communication,
                      surprisal_term=surprisal,
                      entropy_term=entropy,
                      total_kl_form=total_kl)


def model_log_evidence(log_px, receiver_logits, prior_logits) -> float:
    """E_x[log sum_m prior(m) R(x|m)]: what the beta=1 objective bounds."""
    log_px = log_normalize(np.asarray(log_px, dtype=float))
    log_r = log_softmax(receiver_logits, axis=1)
    log_pi = log_normalize(np.asarray(prior_logits, dtype=float))
    per_x = np.array([logsumexp(log_pi + log_r[:, x])
                      for x in range(log_r.shape[1])])
    return _xlogy_sum(np.exp(log_px), per_x)


def objective_gradients(log_px, sender_logits, receiver_logits,
                        prior_logits=None, beta: float = 0.0):
    """Analytic logit gradients of the objective.

    beta=0 reproduces the plain reconstruction objective (prior gradient is
    then zero).  Returns (sender_grad, receiver_grad, prior_grad, value).
    The sender gradient uses the full per-pair score c including the
    -beta*log S term, whose direct derivative cancels under softmax rows.
    """
    log_px, log_s, log_r, log_pi = _tables(log_px, sender_logits,
                                           receiver_logits, prior_logits)
    if beta != 0.0 and log_pi is None:
        raise ContractError("beta != 0 needs a prior")
    px = np.exp(log_px)
    s = np.exp(log_s)
    r = np.exp(log_r)
    w = px[:, None] * s
    c = log_r.T.copy()
    if log_pi is not None:
        c += beta * (log_pi[None, :] - log_s)
    # infinities here only arise when the objective itself is non-finite,
    # which callers detect through `value` before using the gradients
    with np.errstate(invalid="ignore"):
        cbar = (s * c).sum(axis=1)
        sender_grad = px[:, None] * s * (c - cbar[:, None])
    receiver_grad = w.T - r * w.sum(axis=0)[:, None]
    if log_pi is None:
        prior_grad = None
        value = _xlogy_sum(w, log_r.T)
    else:
        prior_grad = beta * (w.sum(axis=0) - np.exp(log_pi))
        value = elbo_objective(log_px, sender_logits, receiver_logits,
                               log_pi, beta).total
    return sender_grad, receiver_grad, prior_grad, value


@dataclass
class OptimizeResult:
    sender_logits: np.ndarray
    receiver_logits: np.ndarray
    prior_logits: np.ndarray | None
    history: np.ndarray  # objective value per iteration, before the step


def optimize(log_px, sender_logits, receiver_logits, prior_logits=None,
             beta: float = 0.0, lr: float = 1.0, n_iters: int = 1000,
             train=("sender", "receiver", "prior")) -> OptimizeResult:
    """Plain gradient ascent on logits.  Aborts on a non-finite objective."""
    sender_logits = np.array(sender_logits, dtype=float)
    receiver_logits = np.array(receiver_logits, dtype=float)
    if prior_logits is not None:
        prior_logits = np.array(prior_logits, dtype=float)
    history = np.empty(n_iters)
    for it in range(n_iters):
        gs, gr, gp, value = objective_gradients(log_px, sender_logits,
                                                receiver_logits, prior_logits,
                                                beta)
        if not np.isfinite(value):
            raise ContractError("objective became non-finite at iteration %d"
                                % it)
        history[it] = value
        if "sender" in train:
            sender_logits += lr * gs
        if "receiver" in train:
            receiver_logits += lr * gr
        if "prior" in train and gp is not None:
            prior_logits += lr * gp
    return OptimizeResult(sender_logits, receiver_logits, prior_logits,
                          history)


def random_instance(rng, x_size: int, m_size: int, scale: float = 1.0,
                    uniform_source: bool = False) -> dict:
    """Random logits (and a random source) for verification batteries."""
    if uniform_source:
        log_px = np.zeros(x_size)
    else:
        log_px = np.log(rng.dirichlet(np.full(x_size, 3.0)))
    return {"log_px": log_normalize(log_px),
            "sender_logits": scale * rng.normal(size=(x_size, m_size)),
            "receiver_logits": scale * rng.normal(size=(m_size, x_size)),
            "prior_logits": scale * rng.normal(size=m_size)}
