"""Synthetic ground-truth models, assortment distributions and datasets.

Every generator is a pure function of its configuration and the
``numpy.random.Generator`` it is handed.  Trial generators are derived
with :func:`trial_rng` so that each (experiment seed, trial) cell can be
re-run on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from assortnet.classical import (
    ClassicalModel,
    MccmModel,
    MnlModel,
    NpModel,
    sample_choices,
)
from assortnet.core import Assortment, ChoiceDataset, ProductUniverse


def trial_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class MccmGenConfig:
    n: int
    sigma: float
    c_num: int

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.c_num < 1 or self.n % self.c_num:
            raise ValueError(f"cluster count {self.c_num} must divide n={self.n}")


@dataclass(frozen=True)
class AssortmentDistribution:
    kind: Literal["D1", "D2", "D3", "D4"]
    n: int
    include_no_purchase: bool = False
    no_purchase_index: int | None = None

    def __post_init__(self):
        if self.kind not in ("D1", "D2", "D3", "D4"):
            raise ValueError(f"unknown assortment distribution {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.kind == "D3" and self.n < 2:
            raise ValueError("D3 needs at least two products")
        if self.include_no_purchase and self.no_purchase_index is None:
            raise ValueError("include_no_purchase requires a no_purchase_index")


@dataclass(frozen=True)
class FeatureModelConfig:
    n: int
    d: int
    kind: Literal["mnl", "mccm"]
    # "features" -> lambda = softmax(z beta); "plain" -> softmax of iid N(0, 1)
    arrival: Literal["features", "plain"] = "features"

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if self.kind not in ("mnl", "mccm"):
            raise ValueError(f"unknown feature model kind {self.kind!r}")


@dataclass(frozen=True)
class FeatureModel:
    """A feature-based ground truth: its parameters, the product feature
    table and the classical model they induce."""

    config: FeatureModelConfig
    features: np.ndarray  # (n, d)
    beta: np.ndarray
    A: np.ndarray | None
    model: ClassicalModel = field(compare=False)


# --- ground-truth models -------------------------------------------------------

def gen_mnl(n: int, rng: np.random.Generator) -> MnlModel:
    return MnlModel(rng.standard_normal(n))


def gen_mccm_clustered(config: MccmGenConfig, rng: np.random.Generator) -> MccmModel:
    n, sigma = config.n, config.sigma
    lam = softmax(rng.normal(0.0, sigma, size=n))
    block = np.arange(n) // (n // config.c_num)
    mean = np.where(block[:, None] == block[None, :], 2.0 * sigma, 0.0)
    nu = rng.normal(mean, sigma)
    return MccmModel(lam, softmax(nu, axis=1))


def gen_mccm_plain(n: int, rng: np.random.Generator) -> MccmModel:
    lam = softmax(rng.standard_normal(n))
    return MccmModel(lam, softmax(rng.standard_normal((n, n)), axis=1))


def gen_np(n: int, n_perm: int, rng: np.random.Generator) -> NpModel:
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    perms = np.stack([rng.permutation(n) for _ in range(n_perm)])
    w = rng.random(n_perm)
    return NpModel(perms, w / w.sum())


def gen_feature_models(config: FeatureModelConfig, rng: np.random.Generator) -> FeatureModel:
    n, d = config.n, config.d
    z = rng.standard_normal((n, d))
    beta = rng.standard_normal(d)
    if config.kind == "mnl":
        return FeatureModel(config, z, beta, None, MnlModel(z @ beta))
    A = rng.standard_normal((n, d))
    if config.arrival == "plain":
        lam = softmax(rng.standard_normal(n))
    else:
        lam = softmax(z @ beta)
    # row i of rho: softmax over j of A_j . z_i
    rho = softmax(z @ A.T, axis=1)
    return FeatureModel(config, z, beta, A, MccmModel(lam, rho))


# --- assortments ---------------------------------------------------------------

def _uniform_subset(pool: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(pool, size=size, replace=False)


def gen_assortments(dist: AssortmentDistribution, m: int, rng: np.random.Generator) -> list[Assortment]:
    return [Assortment.from_bits(row) for row in gen_offer_matrix(dist, m, rng)]


def gen_offer_matrix(dist: AssortmentDistribution, m: int, rng: np.random.Generator) -> np.ndarray:
    """Same draws as :func:`gen_assortments`, as an ``(m, n)`` 0/1 matrix."""
    if m < 1:
        raise ValueError("m must be positive")
    n = dist.n
    out = np.zeros((m, n))
    everything = np.arange(n)
    half = n // 2
    low, high = np.arange(half), np.arange(half, n)
    third = n // 3
    for k in range(m):
        if dist.kind == "D1":
            members = _uniform_subset(everything, int(rng.integers(1, n + 1)), rng)
        elif dist.kind == "D2":
            mask = rng.random(n) < 0.5
            while not mask.any():
                mask = rng.random(n) < 0.5
            members = np.flatnonzero(mask)
        elif dist.kind == "D3":
            pool = high if rng.random() < 0.5 else low
            members = _uniform_subset(pool, int(rng.integers(1, len(pool) + 1)), rng)
        else:
            size = max(1, third + int(rng.integers(0, 2)))
            members = _uniform_subset(everything, min(size, n), rng)
        out[k, members] = 1.0
    if dist.include_no_purchase:
        out[:, dist.no_purchase_index] = 1.0
    return out


# --- datasets --------------------------------------------------------------------

def sample_dataset(
    model: ClassicalModel | FeatureModel,
    assortments: Sequence[Assortment] | np.ndarray,
    rng: np.random.Generator,
    no_purchase_index: int | None = None,
) -> ChoiceDataset:
    """Draw one choice per assortment from ``model``.

    Feature-based models attach their product feature table to the result.
    """
    table = None
    if isinstance(model, FeatureModel):
        table = model.features
        model = model.model
    if isinstance(assortments, np.ndarray):
        offered = assortments
    else:
        offered = np.stack([a.to_bits() for a in assortments])
    if offered.shape[1] != model.n:
        raise ValueError(f"assortments are over {offered.shape[1]} products, model over {model.n}")
    choices = sample_choices(model, offered, rng)
    return ChoiceDataset.from_arrays(
        ProductUniverse(model.n, no_purchase_index), offered, choices, product=table
    )


def shrink_mccm(model: MccmModel, keep: int | Sequence[int], sink: int) -> MccmModel:
    """Fold every non-kept product into ``sink``.

    ``keep`` is either a count (the leading ``keep`` indices are retained)
    or an explicit index list; the result is indexed in retained order.
    Arrival mass and transition columns of removed products go to the sink;
    removed rows are dropped.
    """
    n = model.n
    kept = list(range(keep)) if isinstance(keep, (int, np.integer)) else [int(i) for i in keep]
    if len(set(kept)) != len(kept) or any(not 0 <= i < n for i in kept):
        raise ValueError(f"invalid keep set {kept}")
    if sink not in kept:
        raise ValueError(f"sink {sink} must be among the kept products")
    removed = [i for i in range(n) if i not in set(kept)]
    s = kept.index(sink)
    lam = model.arrival[kept].copy()
    lam[s] += model.arrival[removed].sum()
    rho = model.transition[np.ix_(kept, kept)].copy()
    rho[:, s] += model.transition[np.ix_(kept, removed)].sum(axis=1)
    return MccmModel(lam, rho)
