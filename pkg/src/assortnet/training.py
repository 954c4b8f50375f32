"""Mini-batch training of choice networks with early stopping."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from assortnet.autodiff import AdamState, LayerGraph, adam_step
from assortnet.core import ChoiceArrays, ChoiceDataset

log = logging.getLogger(__name__)

_EVAL_CHUNK = 4096


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int
    batch_size: int
    lr: float
    patience: int
    seed: int = 0

    def __post_init__(self):
        if min(self.max_epochs, self.batch_size, self.patience) < 1 or self.lr <= 0:
            raise ValueError(f"invalid training config {self}")

    @classmethod
    def defaults(cls, **overrides) -> "TrainConfig":
        """Packaged defaults (``configs/train_defaults.json``) with overrides."""
        text = resources.files("assortnet").joinpath("configs/train_defaults.json").read_text()
        values = json.loads(text)
        values.update(overrides)
        return cls(**values)


@dataclass
class EpochRecord:
    epoch: int
    train_ce: float
    val_ce: float
    wall_ms: float


def batch_inputs(graph: LayerGraph, arr: ChoiceArrays, idx) -> dict[str, np.ndarray]:
    inputs = {"S": arr.offered[idx]}
    if "f" in graph.inputs:
        block = arr.product_block(idx)
        if block is None:
            raise ValueError("network needs product features but the dataset has none")
        inputs["f"] = block
    if "g" in graph.inputs:
        if arr.customer is None:
            inputs["g"] = np.ones((len(inputs["S"]), 1))
        else:
            inputs["g"] = arr.customer[idx]
    return inputs


def predict(graph: LayerGraph, data: ChoiceDataset | ChoiceArrays, what: str = "probs") -> np.ndarray:
    """Choice probabilities (or any named node, e.g. ``"logits"``) for every row."""
    arr = data.arrays if isinstance(data, ChoiceDataset) else data
    key = {"probs": graph.output, "logits": graph.logits, "utilities": graph.utilities}.get(what, what)
    parts = []
    for lo in range(0, arr.m, _EVAL_CHUNK):
        idx = slice(lo, lo + _EVAL_CHUNK)
        _, cache = graph.forward(batch_inputs(graph, arr, idx))
        parts.append(cache.values[key])
    return np.concatenate(parts) if parts else np.zeros((0, arr.offered.shape[1]))


def mean_ce(graph: LayerGraph, data: ChoiceDataset | ChoiceArrays) -> float:
    arr = data.arrays if isinstance(data, ChoiceDataset) else data
    p = predict(graph, arr)[np.arange(arr.m), arr.choices]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def train(
    graph: LayerGraph,
    train_set: ChoiceDataset,
    val_set: ChoiceDataset,
    config: TrainConfig,
) -> tuple[LayerGraph, list[EpochRecord]]:
    """Adam on mean cross-entropy; restores the best-validation parameters."""
    tr, va = train_set.arrays, val_set.arrays
    rng = np.random.default_rng(config.seed)
    params = graph.params
    values = [p.value for p in params]
    grads = [p.grad for p in params]
    state = AdamState.zeros_like(values)
    best_ce = mean_ce(graph, va)
    best = [v.copy() for v in values]
    since_best = 0
    history: list[EpochRecord] = []
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(tr.m)
        total = 0.0
        for lo in range(0, tr.m, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            choices = tr.choices[idx]
            probs, cache = graph.forward(batch_inputs(graph, tr, idx))
            picked = probs[np.arange(len(idx)), choices]
            batch_ce = -np.log(picked).mean()
            if not np.isfinite(batch_ce):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch} (lr={config.lr}); lower the learning rate"
                )
            total += batch_ce * len(idx)
            graph.zero_grad()
            graph.backward(cache, choices)
            adam_step(values, grads, state, lr=config.lr)
        val_ce = mean_ce(graph, va)
        history.append(EpochRecord(epoch, total / tr.m, val_ce, (time.perf_counter() - t0) * 1e3))
        if val_ce < best_ce:
            best_ce = val_ce
            best = [v.copy() for v in values]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    for v, b in zip(values, best):
        v[...] = b
    log.info("trained %s: %d epochs, best val CE %.4f", graph.arch.get("kind"), len(history), best_ce)
    return graph, history


def write_history(history: list[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_ce", "val_ce", "wall_ms"])
        for rec in history:
            w.writerow([rec.epoch, repr(rec.train_ce), repr(rec.val_ce), f"{rec.wall_ms:.1f}"])


def history_dicts(history: list[EpochRecord]) -> list[dict]:
    return [asdict(r) for r in history]
