"""Domain types shared by every module: products, assortments, datasets.

Product indices are 0-based everywhere.  The no-purchase option, when a
universe has one, is an ordinary product index flagged on the
:class:`ProductUniverse`; nothing downstream special-cases it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PROB_TOL = 1e-9


@dataclass(frozen=True)
class ProductUniverse:
    n: int
    no_purchase_index: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"universe needs at least one product, got n={self.n}")
        if self.no_purchase_index is not None and not 0 <= self.no_purchase_index < self.n:
            raise ValueError(
                f"no_purchase_index {self.no_purchase_index} outside [0, {self.n})"
            )


@dataclass(frozen=True)
class Assortment:
    """A non-empty set of offered product indices out of a universe of ``n``.

    ``members`` is kept sorted so two assortments with the same products
    compare and hash equal.
    """

    members: tuple[int, ...]
    n: int

    def __post_init__(self):
        members = tuple(int(i) for i in self.members)
        if not members:
            raise ValueError("assortment must be non-empty")
        if len(set(members)) != len(members):
            raise ValueError(f"duplicate products in assortment {members}")
        bad = [i for i in members if not 0 <= i < self.n]
        if bad:
            raise ValueError(f"products {bad} outside [0, {self.n})")
        object.__setattr__(self, "members", tuple(sorted(members)))

    @classmethod
    def from_bits(cls, bits: Sequence[int] | np.ndarray) -> "Assortment":
        bits = np.asarray(bits)
        return cls(tuple(np.flatnonzero(bits).tolist()), len(bits))

    def to_bits(self) -> np.ndarray:
        bits = np.zeros(self.n, dtype=np.float64)
        bits[list(self.members)] = 1.0
        return bits

    def complement(self) -> tuple[int, ...]:
        inside = set(self.members)
        return tuple(i for i in range(self.n) if i not in inside)

    def __contains__(self, item: object) -> bool:
        return item in self.members

    def __iter__(self) -> Iterator[int]:
        return iter(self.members)

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ChoiceObservation:
    choice: int
    assortment: Assortment
    customer_features: np.ndarray | None = None
    # per-observation (dynamic) product features, shape (n, d)
    product_features: np.ndarray | None = None


@dataclass(frozen=True)
class ChoiceArrays:
    """Dense view of a dataset used by every numerical routine.

    ``product`` is either ``None``, a static ``(n, d)`` table, or a
    per-observation ``(m, n, d)`` stack.
    """

    offered: np.ndarray  # (m, n) float 0/1
    choices: np.ndarray  # (m,) int
    customer: np.ndarray | None  # (m, d')
    product: np.ndarray | None

    @property
    def m(self) -> int:
        return len(self.choices)

    def product_block(self, idx: np.ndarray | slice) -> np.ndarray | None:
        """Product features for the selected rows, broadcast to (k, n, d)."""
        if self.product is None:
            return None
        if self.product.ndim == 3:
            return self.product[idx]
        k = len(self.choices[idx])
        return np.broadcast_to(self.product, (k,) + self.product.shape)


@dataclass(frozen=True)
class ChoiceDataset:
    universe: ProductUniverse
    observations: tuple[ChoiceObservation, ...] = ()
    product_features: np.ndarray | None = None
    no_purchase_always_offered: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))

    @property
    def n(self) -> int:
        return self.universe.n

    def __len__(self) -> int:
        return len(self.observations)

    @cached_property
    def arrays(self) -> ChoiceArrays:
        m, n = len(self.observations), self.n
        offered = np.zeros((m, n))
        choices = np.empty(m, dtype=np.int64)
        for k, obs in enumerate(self.observations):
            offered[k, list(obs.assortment.members)] = 1.0
            choices[k] = obs.choice
        customer = None
        if m and self.observations[0].customer_features is not None:
            customer = np.stack([np.asarray(o.customer_features, float) for o in self.observations])
        product = None
        if m and self.observations[0].product_features is not None:
            product = np.stack([np.asarray(o.product_features, float) for o in self.observations])
        elif self.product_features is not None:
            product = np.asarray(self.product_features, float)
        return ChoiceArrays(offered, choices, customer, product)

    @classmethod
    def from_arrays(
        cls,
        universe: ProductUniverse,
        offered: np.ndarray,
        choices: Sequence[int],
        customer: np.ndarray | None = None,
        product: np.ndarray | None = None,
        **kwargs,
    ) -> "ChoiceDataset":
        """Build a dataset from dense arrays; 3-d ``product`` means dynamic features."""
        offered = np.asarray(offered)
        dynamic = product is not None and np.ndim(product) == 3
        obs = []
        for k in range(len(choices)):
            obs.append(
                ChoiceObservation(
                    int(choices[k]),
                    Assortment.from_bits(offered[k]),
                    None if customer is None else np.asarray(customer[k], float),
                    np.asarray(product[k], float) if dynamic else None,
                )
            )
        static = None if product is None or dynamic else np.asarray(product, float)
        return cls(universe, tuple(obs), static, **kwargs)

    def subset(self, indices: Iterable[int]) -> "ChoiceDataset":
        obs = tuple(self.observations[i] for i in indices)
        return ChoiceDataset(
            self.universe, obs, self.product_features, self.no_purchase_always_offered, dict(self.meta)
        )


def is_prob_vector(p: np.ndarray, assortment: Assortment, tol: float = PROB_TOL) -> bool:
    p = np.asarray(p, dtype=float)
    if p.shape != (assortment.n,) or np.any(p < 0):
        return False
    off = list(assortment.complement())
    if off and np.any(p[off] != 0.0):
        return False
    return abs(p.sum() - 1.0) <= tol


def validate_dataset(dataset: ChoiceDataset) -> list[str]:
    """Return one description per violated dataset invariant (empty if valid)."""
    problems = []
    n = dataset.n
    npi = dataset.universe.no_purchase_index
    cust_len = None
    prod_table = dataset.product_features
    if prod_table is not None and np.ndim(prod_table) != 2:
        problems.append("product feature table must be 2-d (n, d)")
        prod_table = None
    if prod_table is not None and len(prod_table) != n:
        problems.append(f"product feature table has {len(prod_table)} rows, expected {n}")
    dyn_shape = None
    for k, obs in enumerate(dataset.observations):
        a = obs.assortment
        if a.n != n:
            problems.append(f"observation {k}: assortment universe size {a.n} != {n}")
        if obs.choice not in a:
            problems.append(f"observation {k}: choice {obs.choice} not in assortment {a.members}")
        if dataset.no_purchase_always_offered and npi is not None and npi not in a:
            problems.append(f"observation {k}: no-purchase product {npi} not offered")
        if obs.customer_features is not None:
            length = len(obs.customer_features)
            if cust_len is None:
                cust_len = length
            elif length != cust_len:
                problems.append(
                    f"observation {k}: customer feature length {length} != {cust_len}"
                )
        elif cust_len is not None:
            problems.append(f"observation {k}: missing customer features")
        if obs.product_features is not None:
            shape = np.shape(obs.product_features)
            if len(shape) != 2 or shape[0] != n:
                problems.append(f"observation {k}: product features shape {shape} not (n, d)")
            elif dyn_shape is None:
                dyn_shape = shape
            elif shape != dyn_shape:
                problems.append(f"observation {k}: product features shape {shape} != {dyn_shape}")
    return problems


def split_dataset(
    dataset: ChoiceDataset, sizes: tuple[int, int, int], seed: int
) -> tuple[ChoiceDataset, ChoiceDataset, ChoiceDataset]:
    """Seeded disjoint train/val/test split; depends only on (seed, sizes, m)."""
    m = len(dataset)
    need = sum(sizes)
    if any(s < 0 for s in sizes):
        raise ValueError(f"negative split size in {sizes}")
    if need > m:
        raise ValueError(f"split needs {need} observations but dataset has {m} (short by {need - m})")
    order = np.random.default_rng(seed).permutation(m)
    a, b, c = sizes
    return (
        dataset.subset(order[:a]),
        dataset.subset(order[a : a + b]),
        dataset.subset(order[a + b : a + b + c]),
    )


def concat_datasets(datasets: Sequence[ChoiceDataset]) -> ChoiceDataset:
    first = datasets[0]
    obs = tuple(o for ds in datasets for o in ds.observations)
    return ChoiceDataset(
        first.universe, obs, first.product_features, first.no_purchase_always_offered, dict(first.meta)
    )


# --- file format -----------------------------------------------------------

def _floats(x) -> list:
    return np.asarray(x, dtype=float).tolist()


def save_dataset(dataset: ChoiceDataset, path: str | Path) -> Path:
    """Write observations as JSON lines plus a ``products.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for obs in dataset.observations:
            row = {"choice": int(obs.choice), "assortment": list(obs.assortment.members)}
            if obs.customer_features is not None:
                row["customer_features"] = _floats(obs.customer_features)
            if obs.product_features is not None:
                row["product_features"] = _floats(obs.product_features)
            fh.write(json.dumps(row) + "\n")
    side = {"n": dataset.n}
    if dataset.universe.no_purchase_index is not None:
        side["no_purchase_index"] = dataset.universe.no_purchase_index
    if dataset.no_purchase_always_offered:
        side["no_purchase_always_offered"] = True
    if dataset.product_features is not None:
        side["features"] = {str(i): _floats(f) for i, f in enumerate(dataset.product_features)}
    (path.parent / "products.json").write_text(json.dumps(side, indent=1) + "\n")
    return path


def load_dataset(path: str | Path) -> ChoiceDataset:
    path = Path(path)
    side = json.loads((path.parent / "products.json").read_text())
    n = int(side["n"])
    universe = ProductUniverse(n, side.get("no_purchase_index"))
    table = None
    if "features" in side:
        feats = side["features"]
        table = np.array([feats[str(i)] for i in range(n)], dtype=float)
    obs = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                cf = row.get("customer_features")
                pf = row.get("product_features")
                obs.append(
                    ChoiceObservation(
                        int(row["choice"]),
                        Assortment(tuple(row["assortment"]), n),
                        None if cf is None else np.array(cf, dtype=float),
                        None if pf is None else np.array(pf, dtype=float),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad observation ({exc})") from exc
    return ChoiceDataset(universe, tuple(obs), table, bool(side.get("no_purchase_always_offered", False)))
