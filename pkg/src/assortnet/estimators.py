"""Benchmark estimators: MNL maximum likelihood (with and without features)
and expectation-maximization for the Markov-chain choice model."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from assortnet.classical import AbsorptionError, MccmModel, MnlModel
from assortnet.core import ChoiceArrays, ChoiceDataset, ChoiceObservation

log = logging.getLogger(__name__)

UTILITY_CLAMP = 30.0
_CHUNK = 8192


@dataclass(frozen=True)
class MleOptions:
    grad_tol: float = 1e-6
    max_iter: int = 500


# --- MNL -------------------------------------------------------------------------

def _masked_log_softmax(logits: np.ndarray, offered: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.where(offered > 0, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    tot = e.sum(axis=1, keepdims=True)
    return z - np.log(tot), e / tot


def mnl_loglik(u: np.ndarray, arr: ChoiceArrays) -> float:
    """Mean log-likelihood of the observed choices under utilities ``u``."""
    logp, _ = _masked_log_softmax(np.broadcast_to(u, arr.offered.shape), arr.offered)
    return float(logp[np.arange(arr.m), arr.choices].mean())


def _ascend(objective, x0: np.ndarray, project, options: MleOptions):
    """Projected gradient ascent with backtracking (Armijo) line search."""
    x = project(x0)
    f, g = objective(x)
    step = 1.0
    for it in range(options.max_iter):
        gnorm = np.linalg.norm(g)
        if gnorm < options.grad_tol:
            return x, it, gnorm
        step = min(step * 2.0, 1e6)
        while True:
            cand = project(x + step * g)
            fc, gc = objective(cand)
            if fc >= f + 1e-4 * g @ (cand - x) or step < 1e-14:
                break
            step *= 0.5
        x, f, g = cand, fc, gc
    return x, options.max_iter, np.linalg.norm(g)


def fit_mnl_mle(dataset: ChoiceDataset, options: MleOptions = MleOptions()) -> MnlModel:
    """Maximum-likelihood MNL utilities with the last product pinned at 0."""
    arr = dataset.arrays
    n = dataset.n
    offered_any = arr.offered.any(axis=0)
    chosen = np.bincount(arr.choices, minlength=n)
    free = offered_any.copy()
    free[n - 1] = False
    if not offered_any.all():
        warnings.warn(f"products {np.flatnonzero(~offered_any).tolist()} never offered; utility pinned to 0")
    never = np.flatnonzero(offered_any & (chosen == 0))
    start = np.zeros(n)
    if len(never):
        warnings.warn(f"products {never.tolist()} never chosen; utility clamped at -{UTILITY_CLAMP}")
        # the likelihood increases without bound as these utilities fall, so
        # they sit at the clamp and the rest are fitted around them
        fixed = never[never != n - 1]
        start[fixed] = -UTILITY_CLAMP
        free[fixed] = False

    counts = chosen / arr.m
    offered = arr.offered

    def objective(u):
        # utilities are clamped to +-30, so exp cannot overflow after the shift
        e = np.exp(u - u.max())
        denom = offered @ e
        ll = np.mean(np.log(e[arr.choices]) - np.log(denom))
        grad = counts - e * (offered.T @ (1.0 / denom)) / arr.m
        return float(ll), np.where(free, grad, 0.0)

    def project(u):
        return np.where(free, np.clip(u, -UTILITY_CLAMP, UTILITY_CLAMP), start)

    u, iters, gnorm = _ascend(objective, start, project, options)
    log.debug("mnl mle: %d iterations, |grad|=%.2e", iters, gnorm)
    return MnlModel(u)


def feature_design(arr: ChoiceArrays) -> np.ndarray:
    """Per-product regressors z_i = (g, f_i), shape (m, n, d' + d)."""
    parts = []
    if arr.customer is not None:
        parts.append(np.broadcast_to(arr.customer[:, None, :], (arr.m, arr.offered.shape[1], arr.customer.shape[1])))
    prod = arr.product_block(slice(None))
    if prod is not None:
        parts.append(prod)
    if not parts:
        raise ValueError("feature-based MNL needs customer or product features")
    return np.concatenate(parts, axis=2) if len(parts) > 1 else np.asarray(parts[0])


def fit_mnl_f_mle(dataset: ChoiceDataset, options: MleOptions = MleOptions()) -> np.ndarray:
    """Coefficients beta of the linear-in-features MNL, u_i = z_i . beta."""
    arr = dataset.arrays
    Z = feature_design(arr)
    rows = np.arange(arr.m)
    # directions constant within every assortment cannot be identified
    mask = arr.offered[:, :, None] > 0
    cnt = arr.offered.sum(axis=1)[:, None]
    centered = np.where(mask, Z - (np.where(mask, Z, 0).sum(axis=1) / cnt)[:, None, :], 0.0)
    flat = centered.reshape(-1, Z.shape[2])
    rank = np.linalg.matrix_rank(flat.T @ flat)
    if rank < Z.shape[2]:
        warnings.warn(
            f"feature design has rank {rank} < {Z.shape[2]}; returning the minimum-norm solution"
        )
    zc = Z[rows, arr.choices].mean(axis=0)

    def objective(beta):
        logits = Z @ beta
        logp, p = _masked_log_softmax(logits, arr.offered)
        grad = zc - np.einsum("mn,mnd->d", p, Z) / arr.m
        return float(logp[rows, arr.choices].mean()), grad

    beta, iters, gnorm = _ascend(objective, np.zeros(Z.shape[2]), lambda b: b, options)
    log.debug("mnl(f) mle: %d iterations, |grad|=%.2e", iters, gnorm)
    return beta


def mnl_f_probs(beta: np.ndarray, arr: ChoiceArrays) -> np.ndarray:
    _, p = _masked_log_softmax(feature_design(arr) @ beta, arr.offered)
    return p


# --- MCCM expectation-maximization -------------------------------------------------

@dataclass
class EmState:
    current: MccmModel
    iteration: int
    log_likelihood: float
    mean_param_change: float
    trace: list[tuple[int, float, float]] = field(default_factory=list)


def em_expectation(model: MccmModel, observation: ChoiceObservation) -> tuple[np.ndarray, np.ndarray]:
    """Posterior arrival responsibilities and expected transition counts.

    Given the observed purchase ``i`` under assortment S, ``q[j]`` is the
    probability the customer arrived at ``j`` and ``t[j, k]`` the expected
    number of ``j -> k`` moves before absorption.
    """
    offered = observation.assortment.to_bits()[None, :]
    q, t, p = _estep_block(model, offered, np.array([observation.choice]))
    if p[0] <= 0:
        raise ValueError(f"observed choice {observation.choice} has zero probability under the model")
    return q[0], t


def _estep_block(model: MccmModel, offered: np.ndarray, choices: np.ndarray):
    """Sufficient statistics for a block of observations.

    Only the transient (non-offered) states need a linear solve, so rows
    are grouped by their number of transient states T and each group
    solves T x T systems.  Returns per-row q (k, n), the summed transition
    counts (n, n) and the choice probabilities p (k,).
    """
    lam, rho = model.arrival, model.transition
    k, n = offered.shape
    a = np.zeros((k, n))
    a[np.arange(k), choices] = 1.0
    w = np.zeros((k, n))
    # stable argsort puts the transient states (offered == 0) first, ascending
    order = np.argsort(offered, axis=1, kind="stable")
    sizes = n - offered.sum(axis=1).astype(np.int64)
    for size in np.unique(sizes):
        if size == 0:
            continue
        rows = np.flatnonzero(sizes == size)
        T = order[rows, :size]
        M = np.eye(size)[None] - rho[T[:, :, None], T[:, None, :]]
        try:
            # a_T[j] = P(absorbed at the choice | start at transient j)
            a_T = np.linalg.solve(M, rho[T, choices[rows, None]][..., None])[..., 0]
            # w_T[j] = expected visits to transient j
            w_T = np.linalg.solve(np.swapaxes(M, 1, 2), lam[T][..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise AbsorptionError("assortment unreachable from some transient state") from exc
        a[rows[:, None], T] = a_T
        w[rows[:, None], T] = w_T
    p = a @ lam
    safe = np.where(p > 0, p, 1.0)
    q = lam[None, :] * a / safe[:, None]
    t = rho * ((w / safe[:, None]).T @ a)
    return q, t, p


def em_step(model: MccmModel, arr: ChoiceArrays) -> tuple[np.ndarray, np.ndarray, float]:
    """Summed E-step statistics over a dataset and its total log-likelihood."""
    n = model.n
    q_sum = np.zeros(n)
    t_sum = np.zeros((n, n))
    ll = 0.0
    for lo in range(0, arr.m, _CHUNK):
        q, t, p = _estep_block(model, arr.offered[lo : lo + _CHUNK], arr.choices[lo : lo + _CHUNK])
        if np.any(p <= 0):
            bad = lo + int(np.flatnonzero(p <= 0)[0])
            raise ValueError(f"observation {bad} has zero probability under the current model")
        q_sum += q.sum(axis=0)
        t_sum += t
        ll += float(np.log(p).sum())
    return q_sum, t_sum, ll


def _mean_param_change(old: MccmModel, new: MccmModel) -> float:
    """Mean absolute change over all n + n^2 entries of (lambda, rho).

    Every entry is a probability inside a unit-mass distribution, so this is
    the change relative to that unit mass.  Elementwise ratios are not used:
    entries converging to 0 shrink by a near-constant factor per iteration
    and their ratio never settles.
    """
    a = np.concatenate([old.arrival, old.transition.ravel()])
    b = np.concatenate([new.arrival, new.transition.ravel()])
    return float(np.mean(np.abs(b - a)))


def fit_mccm_em(
    dataset: ChoiceDataset,
    init_seed: int = 0,
    tolerance: float = 1e-4,
    max_iter: int = 500,
    trace_path: str | Path | None = None,
) -> EmState:
    """EM for the Markov-chain choice model from a uniform-random start."""
    arr = dataset.arrays
    n = dataset.n
    rng = np.random.default_rng(init_seed)
    lam = rng.random(n)
    rho = rng.random((n, n))
    model = MccmModel(lam / lam.sum(), rho / rho.sum(axis=1, keepdims=True))
    state = EmState(model, 0, -np.inf, np.inf)
    for it in range(1, max_iter + 1):
        q_sum, t_sum, ll = em_step(model, arr)
        # ll belongs to the parameters produced by M-step it - 1
        state.log_likelihood = ll
        state.trace.append((it - 1, ll, state.mean_param_change if it > 1 else float("nan")))
        if it > 1 and state.mean_param_change < tolerance:
            break
        lam_new = q_sum / q_sum.sum()
        rows = t_sum.sum(axis=1)
        empty = rows <= 0
        if np.any(empty):
            log.warning("EM: transition rows %s unobserved; kept at previous values", np.flatnonzero(empty).tolist())
        rho_new = np.where(empty[:, None], model.transition, t_sum / np.where(empty, 1.0, rows)[:, None])
        new = MccmModel(lam_new, rho_new)
        state.mean_param_change = _mean_param_change(model, new)
        state.current, state.iteration = new, it
        model = new
    else:
        state.log_likelihood = em_step(model, arr)[2]
        state.trace.append((max_iter, state.log_likelihood, state.mean_param_change))
    if trace_path is not None:
        write_em_trace(state, trace_path)
    return state


def write_em_trace(state: EmState, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_likelihood", "mean_change"])
        for row in state.trace:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
