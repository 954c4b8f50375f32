"""Exact choice probabilities and sampling for MNL, Markov-chain and
nonparametric (preference-list) choice models.

Each engine has a single-assortment entry point (``mnl_probs``,
``mccm_probs``, ``np_probs``) and a batched one, :func:`choice_probs`,
that works on an ``(m, n)`` 0/1 offer matrix.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
import scipy.linalg

from assortnet.core import Assortment, ChoiceDataset

FORMAT_VERSION = 1
PIVOT_TOL = 1e-12
PATH_STEP_CAP = 10**6
_CHUNK = 8192


class AbsorptionError(ValueError):
    """Raised when an assortment cannot be reached from some transient state."""


class PathCapError(RuntimeError):
    """Raised when a Markov-chain sample path never enters the assortment."""


@dataclass(frozen=True)
class MnlModel:
    mean_utilities: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.mean_utilities, dtype=float)
        if u.ndim != 1 or not np.all(np.isfinite(u)):
            raise ValueError("MNL utilities must be a finite 1-d vector")
        object.__setattr__(self, "mean_utilities", u)

    @property
    def n(self) -> int:
        return len(self.mean_utilities)


@dataclass(frozen=True)
class MccmModel:
    arrival: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.arrival, dtype=float)
        rho = np.asarray(self.transition, dtype=float)
        n = len(lam)
        if rho.shape != (n, n):
            raise ValueError(f"transition matrix shape {rho.shape} != ({n}, {n})")
        if np.any(lam < 0) or np.any(rho < 0):
            raise ValueError("MCCM parameters must be non-negative")
        if abs(lam.sum() - 1.0) > 1e-9:
            raise ValueError(f"arrival probabilities sum to {lam.sum()}")
        rows = rho.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-9):
            raise ValueError(f"transition rows {np.flatnonzero(np.abs(rows - 1) > 1e-9).tolist()} not stochastic")
        object.__setattr__(self, "arrival", lam)
        object.__setattr__(self, "transition", rho)

    @property
    def n(self) -> int:
        return len(self.arrival)

    @cached_property
    def _cum_arrival(self) -> np.ndarray:
        return np.cumsum(self.arrival)

    @cached_property
    def _cum_transition(self) -> np.ndarray:
        return np.cumsum(self.transition, axis=1)


@dataclass(frozen=True)
class NpModel:
    permutations: np.ndarray  # (K, n); row k lists products from most to least preferred
    weights: np.ndarray

    def __post_init__(self):
        perms = np.atleast_2d(np.asarray(self.permutations, dtype=np.int64))
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(perms):
            raise ValueError("one weight per permutation required")
        n = perms.shape[1]
        for row in perms:
            if not np.array_equal(np.sort(row), np.arange(n)):
                raise ValueError(f"{row.tolist()} is not a permutation of 0..{n - 1}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("permutation weights must form a probability vector")
        object.__setattr__(self, "permutations", perms)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.permutations.shape[1]

    @cached_property
    def ranks(self) -> np.ndarray:
        """``ranks[k, i]`` is the position of product ``i`` in list ``k``."""
        r = np.empty_like(self.permutations)
        rows = np.arange(len(r))[:, None]
        r[rows, self.permutations] = np.arange(self.n)[None, :]
        return r


ClassicalModel = Union[MnlModel, MccmModel, NpModel]


# --- probabilities -----------------------------------------------------------

def mnl_probs(model: MnlModel, assortment: Assortment) -> np.ndarray:
    idx = list(assortment.members)
    u = model.mean_utilities[idx]
    e = np.exp(u - u.max())
    p = np.zeros(model.n)
    p[idx] = e / e.sum()
    return p


def mccm_probs(model: MccmModel, assortment: Assortment) -> np.ndarray:
    """Absorption probabilities of the chain started from ``arrival``.

    With transient set T (products not offered), Q = rho[T, T] and
    R = rho[T, S], the absorbing mass is ``lam_S + lam_T (I - Q)^-1 R``.
    """
    S = list(assortment.members)
    T = list(assortment.complement())
    lam, rho = model.arrival, model.transition
    p = np.zeros(model.n)
    p[S] = lam[S]
    if T:
        with warnings.catch_warnings():
            # a singular pivot is reported below as AbsorptionError
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(np.eye(len(T)) - rho[np.ix_(T, T)], check_finite=False)
        if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
            raise AbsorptionError("assortment unreachable from some transient state")
        B = scipy.linalg.lu_solve((lu, piv), rho[np.ix_(T, S)], check_finite=False)
        p[S] += lam[T] @ B
    return p


def np_probs(model: NpModel, assortment: Assortment) -> np.ndarray:
    S = np.array(assortment.members)
    # earliest offered product in every stored preference list
    top = S[np.argmin(model.ranks[:, S], axis=1)]
    p = np.zeros(model.n)
    np.add.at(p, top, model.weights)
    return p


def probs(model: ClassicalModel, assortment: Assortment) -> np.ndarray:
    if isinstance(model, MnlModel):
        return mnl_probs(model, assortment)
    if isinstance(model, MccmModel):
        return mccm_probs(model, assortment)
    if isinstance(model, NpModel):
        return np_probs(model, assortment)
    raise TypeError(f"not a classical choice model: {type(model).__name__}")


def choice_probs(model: ClassicalModel, offered: np.ndarray) -> np.ndarray:
    """Choice probabilities for every row of an ``(m, n)`` offer matrix."""
    offered = np.asarray(offered, dtype=float)
    if isinstance(model, MnlModel):
        logits = np.where(offered > 0, model.mean_utilities[None, :], -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)
    if isinstance(model, NpModel):
        out = np.zeros_like(offered)
        rows = np.arange(len(offered))
        big = model.n + 1
        for rank, w in zip(model.ranks, model.weights):
            top = np.argmin(np.where(offered > 0, rank[None, :], big), axis=1)
            out[rows, top] += w
        return out
    if isinstance(model, MccmModel):
        return _mccm_batch(model, offered)
    raise TypeError(f"not a classical choice model: {type(model).__name__}")


def absorbing_system(rho: np.ndarray, offered: np.ndarray) -> np.ndarray:
    """Stack of ``I - diag(1 - s) rho`` matrices, one per offer row ``s``."""
    n = rho.shape[0]
    transient = 1.0 - offered
    return np.eye(n)[None, :, :] - transient[:, :, None] * rho[None, :, :]


def _mccm_batch(model: MccmModel, offered: np.ndarray) -> np.ndarray:
    # lam^T A^-1 restricted to offered states is the absorption distribution
    out = np.empty_like(offered)
    lam = model.arrival
    for lo in range(0, len(offered), _CHUNK):
        s = offered[lo : lo + _CHUNK]
        A = absorbing_system(model.transition, s)
        rhs = np.broadcast_to(lam[None, :, None], (len(s), model.n, 1))
        try:
            w = np.linalg.solve(np.swapaxes(A, 1, 2), rhs)[..., 0]
        except np.linalg.LinAlgError as exc:
            raise AbsorptionError("assortment unreachable from some transient state") from exc
        out[lo : lo + _CHUNK] = np.clip(w * s, 0.0, None)
    return out


# --- sampling ----------------------------------------------------------------

def _draw(cum: np.ndarray, rng: np.random.Generator) -> int:
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(cum) - 1)


def mccm_sample_path(
    model: MccmModel, assortment: Assortment, rng: np.random.Generator
) -> tuple[int, int]:
    """Walk the chain from an arrival draw until it enters the assortment.

    Returns the absorbing product and the number of transitions taken.
    """
    offered = np.zeros(model.n, dtype=bool)
    offered[list(assortment.members)] = True
    state = _draw(model._cum_arrival, rng)
    cum = model._cum_transition
    steps = 0
    while not offered[state]:
        if steps >= PATH_STEP_CAP:
            raise PathCapError(f"no absorption after {PATH_STEP_CAP} steps; degenerate model")
        state = _draw(cum[state], rng)
        steps += 1
    return state, steps


def sample_choice(model: ClassicalModel, assortment: Assortment, rng: np.random.Generator) -> int:
    if isinstance(model, MccmModel):
        return mccm_sample_path(model, assortment, rng)[0]
    return _draw(np.cumsum(probs(model, assortment)), rng)


def sample_choices(model: ClassicalModel, offered: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per offer row, consuming the rng in row order."""
    out = np.empty(len(offered), dtype=np.int64)
    if isinstance(model, MccmModel):
        for k, row in enumerate(offered):
            out[k] = mccm_sample_path(model, Assortment.from_bits(row), rng)[0]
        return out
    cum = np.cumsum(choice_probs(model, offered), axis=1)
    u = rng.random(len(offered)) * cum[:, -1]
    out[:] = (cum <= u[:, None]).sum(axis=1)
    # guard against round-off landing on an unoffered tail entry
    bad = offered[np.arange(len(out)), np.minimum(out, offered.shape[1] - 1)] == 0
    if np.any(bad) or np.any(out >= offered.shape[1]):
        for k in np.flatnonzero(bad | (out >= offered.shape[1])):
            out[k] = np.flatnonzero(offered[k])[-1]
    return out


def oracle_ce(model: ClassicalModel, data: ChoiceDataset) -> float:
    """Mean negative log-likelihood of ``data`` under the true model."""
    arr = data.arrays
    p = choice_probs(model, arr.offered)[np.arange(arr.m), arr.choices]
    zero = np.flatnonzero(p <= 0)
    if len(zero):
        raise ValueError(f"observation {zero[0]} has zero probability under the model")
    return float(-np.mean(np.log(p)))


# --- serialization -----------------------------------------------------------

def model_to_dict(model: ClassicalModel) -> dict:
    if isinstance(model, MnlModel):
        body = {"kind": "mnl", "mean_utilities": model.mean_utilities.tolist()}
    elif isinstance(model, MccmModel):
        body = {"kind": "mccm", "arrival": model.arrival.tolist(), "transition": model.transition.tolist()}
    elif isinstance(model, NpModel):
        body = {"kind": "np", "permutations": model.permutations.tolist(), "weights": model.weights.tolist()}
    else:
        raise TypeError(f"not a classical choice model: {type(model).__name__}")
    body["format_version"] = FORMAT_VERSION
    return body


def model_from_dict(body: dict) -> ClassicalModel:
    if body.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {body.get('format_version')!r}")
    kind = body.get("kind")
    if kind == "mnl":
        return MnlModel(np.array(body["mean_utilities"], dtype=float))
    if kind == "mccm":
        return MccmModel(np.array(body["arrival"], dtype=float), np.array(body["transition"], dtype=float))
    if kind == "np":
        return NpModel(np.array(body["permutations"]), np.array(body["weights"], dtype=float))
    raise ValueError(f"unknown model kind {kind!r}")


def save_classical(model: ClassicalModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_classical(path: str | Path) -> ClassicalModel:
    return model_from_dict(json.loads(Path(path).read_text()))
