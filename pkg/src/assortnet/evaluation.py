"""Metrics: cross-entropy, accuracy, adaptive calibration error, equal-mass
calibration bins and the utility-shift (Delta u) layer analysis."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from assortnet.core import ChoiceArrays

log = logging.getLogger(__name__)

CE_CLAMP = 1e-12


def ce_loss(predictions: np.ndarray, choices: np.ndarray) -> float:
    """Mean -log p(choice), with p clamped below at 1e-12."""
    p = np.asarray(predictions, dtype=float)[np.arange(len(choices)), choices]
    clamped = int(np.sum(p < CE_CLAMP))
    if clamped:
        log.warning("ce_loss: %d probabilities clamped to %g", clamped, CE_CLAMP)
    return float(-np.mean(np.log(np.maximum(p, CE_CLAMP))))


def clamp_count(predictions: np.ndarray, choices: np.ndarray) -> int:
    p = np.asarray(predictions, dtype=float)[np.arange(len(choices)), choices]
    return int(np.sum(p < CE_CLAMP))


def accuracy(predictions: np.ndarray, choices: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return float(np.mean(np.argmax(predictions, axis=1) == np.asarray(choices)))


@dataclass
class CalibrationBin:
    mean_predicted: float
    mean_empirical: float
    count: int


@dataclass
class CalibrationBins:
    bins: list[list[CalibrationBin]]
    offered_counts: np.ndarray  # n_i per product
    flagged: list[int] = field(default_factory=list)

    def rows(self):
        for i, per in enumerate(self.bins):
            for b, cb in enumerate(per):
                yield i, b, cb.mean_predicted, cb.mean_empirical, cb.count


def _equal_mass_sizes(count: int, B: int) -> list[int]:
    base, extra = divmod(count, B)
    return [base + (1 if b < extra else 0) for b in range(B)]


def calibration_bins(
    predictions: np.ndarray, choices: np.ndarray, offered: np.ndarray, B: int = 25
) -> CalibrationBins:
    """Per-product equal-mass bins of predicted vs. empirical purchase rate.

    A product's samples are the observations offering it.  Samples are
    stably sorted by predicted probability and cut into ``B`` bins whose
    sizes differ by at most one (the lower bins take the remainder).
    Products with fewer than ``B`` samples get one bin per sample and are
    listed in ``flagged``.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    predictions = np.asarray(predictions, dtype=float)
    choices = np.asarray(choices)
    n = predictions.shape[1]
    out, counts, flagged = [], np.zeros(n, dtype=np.int64), []
    for i in range(n):
        idx = np.flatnonzero(offered[:, i] > 0)
        counts[i] = len(idx)
        pred = predictions[idx, i]
        hit = (choices[idx] == i).astype(float)
        order = np.argsort(pred, kind="stable")
        pred, hit = pred[order], hit[order]
        if len(idx) < B:
            flagged.append(i)
            sizes = [1] * len(idx)
        else:
            sizes = _equal_mass_sizes(len(idx), B)
        per, lo = [], 0
        for s in sizes:
            per.append(CalibrationBin(float(pred[lo : lo + s].mean()), float(hit[lo : lo + s].mean()), s))
            lo += s
        out.append(per)
    return CalibrationBins(out, counts, flagged)


def ace(predictions: np.ndarray, choices: np.ndarray, offered: np.ndarray, B: int = 25) -> float:
    """Adaptive calibration error: (1 / mB) sum_i n_i sum_b |acc(b,i) - conf(b,i)|."""
    bins = calibration_bins(predictions, choices, offered, B)
    m = len(choices)
    total = 0.0
    for n_i, per in zip(bins.offered_counts, bins.bins):
        total += n_i * sum(abs(cb.mean_empirical - cb.mean_predicted) for cb in per)
    return float(total / (m * B))


def write_calibration_csv(bins: CalibrationBins, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["product", "bin", "mean_predicted", "mean_empirical", "count"])
        for row in bins.rows():
            w.writerow(row)


# --- layer effect --------------------------------------------------------------------

@dataclass
class DeltaUHistogram:
    values: np.ndarray  # all Delta u for sampled (observation, offered product) pairs
    edges: np.ndarray
    counts: np.ndarray
    skipped: int
    sampled_rows: np.ndarray


def _minmax(x: np.ndarray) -> np.ndarray | None:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return None
    return (x - lo) / (hi - lo)


def delta_u_from_arrays(
    utilities_in: np.ndarray,
    logits_out: np.ndarray,
    offered: np.ndarray,
    sample_count: int = 200,
    rng: np.random.Generator | None = None,
    bins: int = 20,
) -> DeltaUHistogram:
    """Within-assortment min-max normalized shift from input utilities to logits."""
    rng = rng or np.random.default_rng(0)
    m = len(offered)
    rows = rng.choice(m, size=min(sample_count, m), replace=False)
    values, skipped = [], 0
    for r in rows:
        S = np.flatnonzero(offered[r] > 0)
        if len(S) < 2:
            skipped += 1
            continue
        ui, uo = _minmax(utilities_in[r, S]), _minmax(logits_out[r, S])
        if ui is None or uo is None:
            skipped += 1
            continue
        values.append(uo - ui)
    vals = np.concatenate(values) if values else np.zeros(0)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(vals, bins=edges)
    return DeltaUHistogram(vals, edges, counts, skipped, np.sort(rows))


def delta_u(graph, data, sample_count: int = 200, rng: np.random.Generator | None = None) -> DeltaUHistogram:
    """Delta u for a network that exposes latent utilities and pre-gate logits."""
    from assortnet.training import predict

    if graph.utilities is None:
        raise ValueError("network has no latent-utility node")
    arr = data if isinstance(data, ChoiceArrays) else data.arrays
    u_in = predict(graph, arr, "utilities")
    u_out = predict(graph, arr, "logits")
    return delta_u_from_arrays(u_in, u_out, arr.offered, sample_count, rng)


def write_delta_u_csv(hist: DeltaUHistogram, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow([f"{lo:.3f}", f"{hi:.3f}", int(c)])


# --- reports -------------------------------------------------------------------------

@dataclass
class EvalReport:
    ce: float
    accuracy: float
    ace: float
    observations: int
    ce_clamped: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(predictions: np.ndarray, arr: ChoiceArrays, B: int = 25) -> EvalReport:
    return EvalReport(
        ce=ce_loss(predictions, arr.choices),
        accuracy=accuracy(predictions, arr.choices),
        ace=ace(predictions, arr.choices, arr.offered, B),
        observations=arr.m,
        ce_clamped=clamp_count(predictions, arr.choices),
    )
