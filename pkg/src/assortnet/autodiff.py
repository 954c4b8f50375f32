"""A small reverse-mode differentiation engine for the choice networks.

The engine knows exactly the primitives the networks are made of: affine
maps (applied along the last axis, so the same op doubles as a shared
per-product encoder), rectifiers, residual addition, concatenation,
elementwise products, axis expansion / reshapes, batched inner products
and a masked-softmax output.  A :class:`LayerGraph` is an ordered list of
named nodes; every node reads graph inputs or earlier nodes by name.

All arrays carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def _sum_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo numpy broadcasting by summing ``grad`` down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Op:
    params: tuple[Param, ...] = ()

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, dy, xs, y):
        raise NotImplementedError


class Affine(Op):
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.W = Param(f"{name}.W", rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        self.b = Param(f"{name}.b", np.zeros(out_dim)) if bias else None
        self.params = (self.W, self.b) if bias else (self.W,)
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.W.name}: input width {x.shape[-1]} != {self.in_dim}")
        y = x @ self.W.value
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, dy, xs, y):
        (x,) = xs
        self.W.grad += x.reshape(-1, self.in_dim).T @ dy.reshape(-1, self.out_dim)
        if self.b is not None:
            self.b.grad += dy.reshape(-1, self.out_dim).sum(axis=0)
        return (dy @ self.W.value.T,)


class Relu(Op):
    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, dy, xs, y):
        return (dy * (xs[0] > 0),)


class Add(Op):
    def forward(self, a, b):
        return a + b

    def backward(self, dy, xs, y):
        return (_sum_to(dy, xs[0].shape), _sum_to(dy, xs[1].shape))


class Mul(Op):
    def forward(self, a, b):
        return a * b

    def backward(self, dy, xs, y):
        a, b = xs
        return (_sum_to(dy * b, a.shape), _sum_to(dy * a, b.shape))


class Concat(Op):
    def forward(self, *xs):
        return np.concatenate(xs, axis=-1)

    def backward(self, dy, xs, y):
        cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return tuple(np.split(dy, cuts, axis=-1))


class Expand(Op):
    """(B, k) -> (B, n, k): repeat a per-observation vector for every product."""

    def __init__(self, n: int):
        self.n = n

    def forward(self, x):
        return np.broadcast_to(x[:, None, :], (x.shape[0], self.n, x.shape[1]))

    def backward(self, dy, xs, y):
        return (dy.sum(axis=1),)


class Reshape(Op):
    """Reshape the non-batch axes."""

    def __init__(self, *tail: int):
        self.tail = tail

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.tail)

    def backward(self, dy, xs, y):
        return (dy.reshape(xs[0].shape),)


class Inner(Op):
    """Inner product over the last axis: (B, n, h) with (B, h) or (B, n, h) -> (B, n)."""

    def forward(self, a, b):
        if b.ndim == a.ndim - 1:
            b = b[:, None, :]
        return (a * b).sum(axis=-1)

    def backward(self, dy, xs, y):
        a, b = xs
        bb = b[:, None, :] if b.ndim == a.ndim - 1 else b
        da = dy[..., None] * bb
        db = dy[..., None] * a
        if b.ndim == a.ndim - 1:
            db = db.sum(axis=1)
        return (da, db)


class MaskedSoftmax(Op):
    """Probabilities over offered products; off-assortment logits act as -inf."""

    def forward(self, logits, offered):
        z = np.where(offered > 0, logits, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def backward(self, dy, xs, y):
        # only used through the fused CE gradient in LayerGraph.backward
        inner = (dy * y).sum(axis=-1, keepdims=True)
        return (y * (dy - inner), None)


@dataclass
class Node:
    name: str
    op: Op
    inputs: tuple[str, ...]


@dataclass
class Cache:
    values: dict[str, np.ndarray]
    choices: np.ndarray | None = None

    @property
    def probs(self) -> np.ndarray:
        return self.values["__out__"]


@dataclass
class LayerGraph:
    """Ordered node list plus the names of the graph inputs it reads.

    ``output`` names the masked-softmax node; ``logits`` and
    ``utilities`` (optional) name the pre-gate scores and the latent
    utility vector used by the layer-effect analysis.
    """

    inputs: tuple[str, ...]
    nodes: list[Node]
    output: str
    logits: str
    utilities: str | None = None
    arch: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set(self.inputs)
        outs = [nd for nd in self.nodes if isinstance(nd.op, MaskedSoftmax)]
        if len(outs) != 1 or outs[0].name != self.output:
            raise ValueError("graph needs exactly one masked-softmax output node")
        for nd in self.nodes:
            missing = [i for i in nd.inputs if i not in seen]
            if missing:
                raise ValueError(f"node {nd.name} reads undefined {missing}")
            if nd.name in seen:
                raise ValueError(f"duplicate node name {nd.name}")
            seen.add(nd.name)

    @property
    def params(self) -> list[Param]:
        out = []
        for nd in self.nodes:
            out.extend(nd.op.params)
        return out

    def param_dict(self) -> dict[str, Param]:
        return {p.name: p for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0

    def forward(self, inputs: dict[str, np.ndarray], debug: bool = False) -> tuple[np.ndarray, Cache]:
        vals = {}
        for key in self.inputs:
            if key not in inputs:
                raise ValueError(f"missing graph input {key!r}")
            vals[key] = np.asarray(inputs[key], dtype=np.float64)
        for nd in self.nodes:
            y = nd.op.forward(*(vals[i] for i in nd.inputs))
            if debug and not np.all(np.isfinite(y)):
                raise FloatingPointError(f"non-finite activation at node {nd.name}")
            vals[nd.name] = y
        vals["__out__"] = vals[self.output]
        return vals[self.output], Cache(vals)

    def loss(self, inputs: dict[str, np.ndarray], choices: np.ndarray) -> float:
        p, _ = self.forward(inputs)
        picked = p[np.arange(len(choices)), choices]
        return float(-np.mean(np.log(picked)))

    def backward(self, cache: Cache, choices: np.ndarray) -> dict[str, np.ndarray]:
        """Accumulate d(mean CE)/d(param) into ``Param.grad`` and return them."""
        vals = cache.values
        p = vals[self.output]
        rows = np.arange(len(choices))
        out_node = next(nd for nd in self.nodes if nd.name == self.output)
        offered = vals[out_node.inputs[1]]
        if np.any(offered[rows, choices] <= 0):
            bad = int(np.flatnonzero(offered[rows, choices] <= 0)[0])
            raise ValueError(f"choice {choices[bad]} of batch row {bad} is outside its assortment")
        # fused softmax + CE: (p - e_choice) on offered coordinates, 0 elsewhere
        g = p.copy()
        g[rows, choices] -= 1.0
        g *= offered > 0
        g /= len(choices)
        grads: dict[str, np.ndarray] = {out_node.inputs[0]: g}
        for nd in reversed(self.nodes):
            if nd.name == self.output or nd.name not in grads:
                continue
            dy = grads.pop(nd.name)
            xs = [vals[i] for i in nd.inputs]
            dxs = nd.op.backward(dy, xs, vals[nd.name])
            for name, dx in zip(nd.inputs, dxs):
                if dx is None or name in self.inputs:
                    continue
                grads[name] = grads[name] + dx if name in grads else dx
        return {prm.name: prm.grad for prm in self.params}

    def relu_margin(self, cache: Cache) -> float:
        """Smallest |pre-activation| feeding any rectifier (kink distance)."""
        margin = np.inf
        for nd in self.nodes:
            if isinstance(nd.op, Relu):
                x = cache.values[nd.inputs[0]]
                if x.size:
                    margin = min(margin, float(np.min(np.abs(x))))
        return margin


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, values: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(x) for x in values], [np.zeros_like(x) for x in values])


def adam_step(
    values: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``values`` in place."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for x, g, m, v in zip(values, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        x -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# --- gradient check ------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def random_inputs(graph: LayerGraph, rng: np.random.Generator, batch: int = 3) -> tuple[dict, np.ndarray]:
    """Random inputs for ``graph`` with every assortment of size >= 2."""
    arch = graph.arch
    n = arch["n"]
    offered = np.zeros((batch, n))
    for k in range(batch):
        size = int(rng.integers(2, n + 1))
        offered[k, rng.choice(n, size=size, replace=False)] = 1.0
    choices = np.array([rng.choice(np.flatnonzero(row)) for row in offered])
    inputs = {"S": offered}
    if "f" in graph.inputs:
        inputs["f"] = rng.standard_normal((batch, n, arch["d"]))
    if "g" in graph.inputs:
        inputs["g"] = rng.standard_normal((batch, arch.get("d_cust", 1)))
    return inputs, choices


def grad_check(
    graph: LayerGraph,
    rng: np.random.Generator,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-6,
    make_inputs: Callable | None = None,
    max_tries: int = 50,
) -> GradCheckReport:
    """Compare backward() with central differences on random inputs.

    Inputs whose rectifier pre-activations fall within 1e-4 of the kink
    are redrawn.  The per-element error is ``|a - n| / max(|a|, |n|, floor)``.
    Only parameters are checked; graph inputs are treated as constants.
    """
    make_inputs = make_inputs or (lambda r: random_inputs(graph, r))
    for _ in range(max_tries):
        inputs, choices = make_inputs(rng)
        _, cache = graph.forward(inputs)
        if graph.relu_margin(cache) >= 1e-4:
            break
    else:
        raise RuntimeError("could not draw inputs away from rectifier kinks")
    graph.zero_grad()
    graph.backward(cache, choices)
    report = {}
    for prm in graph.params:
        analytic = prm.grad.copy()
        numeric = np.empty_like(analytic)
        flat = prm.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = graph.loss(inputs, choices)
            flat[i] = old - h
            down = graph.loss(inputs, choices)
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        report[prm.name] = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
    graph.zero_grad()
    return GradCheckReport(report, tolerance)
