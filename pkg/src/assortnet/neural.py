"""Assortment-aware choice networks and the two feature-based baselines.

Gated-Assort-Net (GAsN) feeds the 0/1 assortment vector through a dense
stack and gates the output with the same vector.  Res-Assort-Net (RAsN)
runs the assortment through residual blocks ``x + relu(f(x))`` before the
gate.  The feature-based variants first turn product and customer
features into one latent utility per product (inner product of two
encoders) and feed that into the assortment network: GAsN(f) sees
``u * S``, RAsN(f) sees the concatenation ``[u, S]``.

Every builder records its architecture in ``graph.arch`` so a graph can be
rebuilt from a saved file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from assortnet.autodiff import (
    Add,
    Affine,
    Concat,
    Expand,
    Inner,
    LayerGraph,
    MaskedSoftmax,
    Mul,
    Node,
    Relu,
    Reshape,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GasnSpec:
    n: int
    hidden_dims: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(w) for w in self.hidden_dims))
        if self.n < 1 or any(w < 1 for w in self.hidden_dims):
            raise ValueError(f"invalid GAsN spec {self}")


@dataclass(frozen=True)
class RasnSpec:
    n: int
    blocks: int = 2
    block_hidden: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.blocks < 1 or (self.block_hidden is not None and self.block_hidden < 1):
            raise ValueError(f"invalid RAsN spec {self}")


@dataclass(frozen=True)
class EncoderSpec:
    """Product encoder ``d -> ... -> h`` and customer encoder ``d' -> ... -> h``."""

    d: int
    d_cust: int = 1
    product_layers: tuple[int, ...] = (5, 1)
    customer_layers: tuple[int, ...] = (1,)

    def __post_init__(self):
        object.__setattr__(self, "product_layers", tuple(int(w) for w in self.product_layers))
        object.__setattr__(self, "customer_layers", tuple(int(w) for w in self.customer_layers))
        if not self.product_layers or not self.customer_layers:
            raise ValueError("encoders need at least one layer")
        if self.product_layers[-1] != self.customer_layers[-1]:
            raise ValueError("product and customer encoders must end in the same width h")

    @property
    def h(self) -> int:
        return self.product_layers[-1]


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []

    def add(self, name, op, *inputs) -> str:
        self.nodes.append(Node(name, op, tuple(inputs)))
        return name

    def affine(self, name, x, in_dim, out_dim) -> str:
        return self.add(name, Affine(name, in_dim, out_dim, self.rng), x)

    def stack(self, prefix, x, in_dim, widths, relu_last=False) -> tuple[str, int]:
        """Dense layers with rectifiers between them (and after the last if asked)."""
        for i, w in enumerate(widths):
            x = self.affine(f"{prefix}.{i}", x, in_dim, w)
            if relu_last or i < len(widths) - 1:
                x = self.add(f"{prefix}.{i}.relu", Relu(), x)
            in_dim = w
        return x, in_dim

    def residual_blocks(self, prefix, x, width, blocks, block_hidden) -> str:
        for b in range(blocks):
            widths = [block_hidden, width] if block_hidden else [width]
            fx, _ = self.stack(f"{prefix}{b}", x, width, widths, relu_last=True)
            x = self.add(f"{prefix}{b}.add", Add(), x, fx)
        return x

    def encoders(self, enc: EncoderSpec) -> str:
        pe, _ = self.stack("enc_p", "f", enc.d, enc.product_layers)
        ce, _ = self.stack("enc_c", "g", enc.d_cust, enc.customer_layers)
        return self.add("u", Inner(), pe, ce)

    def finish(self, inputs, logits, utilities, arch) -> LayerGraph:
        self.add("out", MaskedSoftmax(), logits, "S")
        return LayerGraph(tuple(inputs), self.nodes, "out", logits, utilities, arch)


def build_gasn(spec: GasnSpec, seed: int = 0) -> LayerGraph:
    b = _Builder(seed)
    x, width = b.stack("hidden", "S", spec.n, spec.hidden_dims, relu_last=True)
    logits = b.affine("logits", x, width, spec.n)
    arch = {"kind": "gasn", "n": spec.n, "hidden": list(spec.hidden_dims), "seed": seed}
    return b.finish(("S",), logits, None, arch)


def build_rasn(spec: RasnSpec, seed: int = 0) -> LayerGraph:
    b = _Builder(seed)
    x = b.residual_blocks("block", "S", spec.n, spec.blocks, spec.block_hidden)
    logits = b.affine("logits", x, spec.n, spec.n)
    arch = {"kind": "rasn", "n": spec.n, "blocks": spec.blocks, "block_hidden": spec.block_hidden, "seed": seed}
    return b.finish(("S",), logits, None, arch)


def _enc_arch(enc: EncoderSpec) -> dict:
    return {
        "d": enc.d,
        "d_cust": enc.d_cust,
        "product_layers": list(enc.product_layers),
        "customer_layers": list(enc.customer_layers),
    }


def build_gasn_f(spec: GasnSpec, encoder: EncoderSpec, seed: int = 0, masked_input: bool = True) -> LayerGraph:
    b = _Builder(seed)
    u = b.encoders(encoder)
    x = b.add("u_masked", Mul(), u, "S") if masked_input else u
    x, width = b.stack("hidden", x, spec.n, spec.hidden_dims, relu_last=True)
    logits = b.affine("logits", x, width, spec.n)
    arch = {"kind": "gasn_f", "n": spec.n, "hidden": list(spec.hidden_dims), "masked_input": masked_input,
            "seed": seed, **_enc_arch(encoder)}
    return b.finish(("S", "f", "g"), logits, "u", arch)


def build_rasn_f(spec: RasnSpec, encoder: EncoderSpec, seed: int = 0) -> LayerGraph:
    b = _Builder(seed)
    u = b.encoders(encoder)
    x = b.add("u_S", Concat(), u, "S")
    x = b.residual_blocks("block", x, 2 * spec.n, spec.blocks, spec.block_hidden)
    logits = b.affine("logits", x, 2 * spec.n, spec.n)
    arch = {"kind": "rasn_f", "n": spec.n, "blocks": spec.blocks, "block_hidden": spec.block_hidden,
            "seed": seed, **_enc_arch(encoder)}
    return b.finish(("S", "f", "g"), logits, "u", arch)


def build_tastenet(n: int, d: int, d_cust: int, widths=(100,), seed: int = 0) -> LayerGraph:
    """Customer net g -> alpha in R^(n*d); u_i = alpha_i . f_i."""
    b = _Builder(seed)
    x, width = b.stack("taste", "g", d_cust, widths, relu_last=True)
    alpha = b.affine("alpha", x, width, n * d)
    alpha = b.add("alpha.rows", Reshape(n, d), alpha)
    u = b.add("u", Inner(), alpha, "f")
    arch = {"kind": "tastenet", "n": n, "d": d, "d_cust": d_cust, "widths": list(widths), "seed": seed}
    return b.finish(("S", "f", "g"), u, "u", arch)


def build_deepmnl(n: int, d: int, d_cust: int, widths=(100,), seed: int = 0) -> LayerGraph:
    """Shared dense stack on concat(g, f_i) -> scalar u_i."""
    b = _Builder(seed)
    gx = b.add("g.tiled", Expand(n), "g")
    z = b.add("z", Concat(), gx, "f")
    x, width = b.stack("util", z, d_cust + d, widths, relu_last=True)
    x = b.affine("util.out", x, width, 1)
    u = b.add("u", Reshape(n), x)
    arch = {"kind": "deepmnl", "n": n, "d": d, "d_cust": d_cust, "widths": list(widths), "seed": seed}
    return b.finish(("S", "f", "g"), u, "u", arch)


def build_from_arch(arch: dict) -> LayerGraph:
    kind = arch.get("kind")
    seed = int(arch.get("seed", 0))
    if kind == "gasn":
        return build_gasn(GasnSpec(arch["n"], tuple(arch["hidden"])), seed)
    if kind == "rasn":
        return build_rasn(RasnSpec(arch["n"], arch["blocks"], arch.get("block_hidden")), seed)
    if kind in ("gasn_f", "rasn_f"):
        enc = EncoderSpec(arch["d"], arch["d_cust"], tuple(arch["product_layers"]), tuple(arch["customer_layers"]))
        if kind == "gasn_f":
            return build_gasn_f(GasnSpec(arch["n"], tuple(arch["hidden"])), enc, seed, arch.get("masked_input", True))
        return build_rasn_f(RasnSpec(arch["n"], arch["blocks"], arch.get("block_hidden")), enc, seed)
    if kind == "tastenet":
        return build_tastenet(arch["n"], arch["d"], arch["d_cust"], tuple(arch["widths"]), seed)
    if kind == "deepmnl":
        return build_deepmnl(arch["n"], arch["d"], arch["d_cust"], tuple(arch["widths"]), seed)
    raise ValueError(f"unknown architecture kind {kind!r}")


def with_product_count(arch: dict, n: int) -> dict:
    """Same architecture over ``n`` products (widths tied to n follow it)."""
    out = dict(arch)
    old = arch["n"]
    out["n"] = n
    if "hidden" in arch:
        out["hidden"] = [n if w == old else w for w in arch["hidden"]]
    return out


# --- parameter transplant / persistence ------------------------------------------------

def _axis_index(old_size: int, new_size: int, old_arch: dict, new_arch: dict) -> np.ndarray:
    """Where each old coordinate of one tensor axis lands in the new tensor.

    Product-indexed axes embed positionally.  The RAsN(f) block state is
    ``[u; S]`` of width 2n, so its second half moves from offset n to n'.
    """
    n, n_new = old_arch["n"], new_arch["n"]
    if old_arch.get("kind") == "rasn_f" and old_size == 2 * n and new_size == 2 * n_new:
        return np.concatenate([np.arange(n), n_new + np.arange(n)])
    return np.arange(old_size)


def warm_start_transplant(old: LayerGraph, new: LayerGraph) -> LayerGraph:
    """Copy every old parameter into the corresponding entries of its new counterpart.

    Product indices embed positionally (old product i is new product i);
    the entries that only exist in the larger net keep their fresh values.
    """
    if old.arch.get("kind") != new.arch.get("kind"):
        raise ValueError(f"cannot transplant {old.arch.get('kind')} into {new.arch.get('kind')}")
    src, dst = old.param_dict(), new.param_dict()
    if list(src) != list(dst):
        raise ValueError("architectures differ in their parameter layout")
    for name, p_old in src.items():
        p_new = dst[name]
        if p_old.value.ndim != p_new.value.ndim or any(
            a > b for a, b in zip(p_old.value.shape, p_new.value.shape)
        ):
            raise ValueError(f"{name}: shape {p_old.value.shape} does not embed into {p_new.value.shape}")
        index = [_axis_index(a, b, old.arch, new.arch) for a, b in zip(p_old.value.shape, p_new.value.shape)]
        p_new.value[np.ix_(*index)] = p_old.value
    return new


class ModelFileError(ValueError):
    pass


def save_model(graph: LayerGraph, path: str | Path) -> None:
    body = {
        "format_version": FORMAT_VERSION,
        "arch": graph.arch,
        "params": {p.name: p.value.tolist() for p in graph.params},
    }
    Path(path).write_text(json.dumps(body))


def load_model(path: str | Path) -> LayerGraph:
    try:
        body = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: corrupt model file ({exc})") from exc
    if not isinstance(body, dict) or "format_version" not in body:
        raise ModelFileError(f"{path}: not a model file")
    if body["format_version"] != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format_version {body['format_version']!r}")
    graph = build_from_arch(body["arch"])
    stored = body["params"]
    params = graph.param_dict()
    if set(stored) != set(params):
        raise ModelFileError(f"{path}: parameter names do not match architecture")
    for name, prm in params.items():
        value = np.array(stored[name], dtype=np.float64)
        if value.shape != prm.value.shape:
            raise ModelFileError(f"{path}: {name} has shape {value.shape}, expected {prm.value.shape}")
        prm.value[...] = value
    return graph
