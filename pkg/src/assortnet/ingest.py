"""CSV ingestion for the SwissMetro, Expedia and Hotel choice datasets.

Each loader returns a :class:`ChoiceDataset` whose ``meta["ingest"]`` holds
a manifest: filters applied, per-reason drop counts, category dictionaries
and dropped columns.  Drop counts always sum to input minus output units
(rows for SwissMetro and Hotel, searches for Expedia).
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from pathlib import Path

import numpy as np

from assortnet.core import Assortment, ChoiceDataset, ChoiceObservation, ProductUniverse


class SchemaError(ValueError):
    pass


def _open_rows(path: str | Path, required: list[str]):
    fh = Path(path).open(newline="")
    header = fh.readline()
    fh.seek(0)
    # the public SwissMetro file is tab-separated, the others comma-separated
    reader = csv.DictReader(fh, delimiter="\t" if "\t" in header else ",")
    missing = [c for c in required if c not in (reader.fieldnames or [])]
    if missing:
        fh.close()
        raise SchemaError(f"{path}: missing columns {missing}")
    return fh, reader


def _num(value: str) -> float:
    return float(value)


def _one_hot(values: list[int], categories: list[int]) -> np.ndarray:
    out = np.zeros((len(values), len(categories)))
    pos = {c: k for k, c in enumerate(categories)}
    for r, v in enumerate(values):
        out[r, pos[v]] = 1.0
    return out


def write_manifest(dataset: ChoiceDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset.meta.get("ingest", {}), indent=1, sort_keys=True) + "\n")


# --- SwissMetro ----------------------------------------------------------------------

SWISSMETRO_PRODUCTS = ("TRAIN", "SM", "CAR")
# binary attributes enter as one 0/1 column, the rest are one-hot encoded
SWISSMETRO_BINARY = ("MALE", "FIRST", "GA")
SWISSMETRO_CATEGORICAL = ("AGE", "INCOME", "WHO", "PURPOSE", "LUGGAGE")
_SM_FILTERS = (
    ("choice_unknown", lambda r: r["CHOICE"] != 0),
    ("who_unknown", lambda r: r["WHO"] != 0),
    ("age_unknown", lambda r: r["AGE"] != 6),
    ("income_unknown", lambda r: r["INCOME"] != 4),
    ("purpose_out_of_range", lambda r: r["PURPOSE"] in (1, 2, 3, 4)),
)


def load_swissmetro(path: str | Path) -> ChoiceDataset:
    """Three products (train, Swissmetro, car); car headway is 0."""
    prod_cols = [f"{p}_{c}" for p in ("TRAIN", "SM") for c in ("TT", "HE", "CO")] + ["CAR_TT", "CAR_CO"]
    av_cols = [f"{p}_AV" for p in SWISSMETRO_PRODUCTS]
    cust_cols = list(SWISSMETRO_BINARY + SWISSMETRO_CATEGORICAL)
    required = ["CHOICE"] + cust_cols + av_cols + prod_cols
    drops: Counter = Counter()
    kept: list[dict] = []
    total = 0
    fh, reader = _open_rows(path, required)
    with fh:
        for raw in reader:
            total += 1
            row = {c: int(_num(raw[c])) for c in ["CHOICE"] + cust_cols + av_cols}
            reason = next((name for name, ok in _SM_FILTERS if not ok(row)), None)
            if reason is None:
                members = tuple(k for k, c in enumerate(av_cols) if row[c] == 1)
                if row["CHOICE"] - 1 not in members:
                    reason = "choice_unavailable"
            if reason is not None:
                drops[reason] += 1
                continue
            row["members"] = members
            row["product"] = np.array(
                [
                    [_num(raw["TRAIN_TT"]), _num(raw["TRAIN_HE"]), _num(raw["TRAIN_CO"])],
                    [_num(raw["SM_TT"]), _num(raw["SM_HE"]), _num(raw["SM_CO"])],
                    [_num(raw["CAR_TT"]), 0.0, _num(raw["CAR_CO"])],
                ]
            )
            kept.append(row)
    if not kept:
        raise ValueError(f"{path}: no rows survive the filters ({dict(drops)})")
    categories = {c: sorted({r[c] for r in kept}) for c in SWISSMETRO_CATEGORICAL}
    blocks = [np.array([[r[c]] for r in kept], float) for c in SWISSMETRO_BINARY]
    blocks += [_one_hot([r[c] for r in kept], categories[c]) for c in SWISSMETRO_CATEGORICAL]
    customer = np.hstack(blocks)
    obs = tuple(
        ChoiceObservation(r["CHOICE"] - 1, Assortment(r["members"], 3), customer[k], r["product"])
        for k, r in enumerate(kept)
    )
    manifest = {
        "source": "swissmetro",
        "input_rows": total,
        "output_rows": len(obs),
        "drop_counts": dict(drops),
        "filters": [name for name, _ in _SM_FILTERS] + ["choice_unavailable"],
        "products": list(SWISSMETRO_PRODUCTS),
        "product_features": ["TT", "HE", "CO"],
        "customer_columns": [*SWISSMETRO_BINARY, *(f"{c}={v}" for c in SWISSMETRO_CATEGORICAL for v in categories[c])],
        "categories": categories,
    }
    return ChoiceDataset(ProductUniverse(3), obs, meta={"ingest": manifest})


# --- Expedia -------------------------------------------------------------------------

EXPEDIA_CUSTOMER = (
    "srch_length_of_stay",
    "srch_booking_window",
    "srch_adults_count",
    "srch_children_count",
    "srch_room_count",
    "srch_saturday_night_bool",
)
EXPEDIA_PRODUCT = (
    "prop_starrating",
    "prop_brand_bool",
    "prop_location_score1",
    "prop_log_historical_price",
    "price_usd",
    "promotion_flag",
    "random_bool",
)
EXPEDIA_POSITIONS = 38
EXPEDIA_NO_PURCHASE = EXPEDIA_POSITIONS  # position 39, 0-based index 38
MAX_PRICE = 1000.0
MAX_BOOKING_WINDOW = 365


def _expedia_search(rows: list[dict]) -> tuple[str | None, ChoiceObservation | None]:
    try:
        customer = np.array([_num(rows[0][c]) for c in EXPEDIA_CUSTOMER])
        feats = [(int(_num(r["position"])), np.array([_num(r[c]) for c in EXPEDIA_PRODUCT]), int(_num(r["booking_bool"])))
                 for r in rows]
    except ValueError:
        return "missing_value", None
    if not np.all(np.isfinite(customer)) or any(not np.all(np.isfinite(f)) for _, f, _ in feats):
        return "missing_value", None
    if any(f[EXPEDIA_PRODUCT.index("price_usd")] > MAX_PRICE for _, f, _ in feats):
        return "price_outlier", None
    if customer[EXPEDIA_CUSTOMER.index("srch_booking_window")] > MAX_BOOKING_WINDOW:
        return "booking_window_outlier", None
    positions = [p for p, _, _ in feats]
    if min(positions) < 1 or max(positions) > EXPEDIA_POSITIONS or len(set(positions)) != len(positions):
        return "position_out_of_range", None
    booked = [p for p, _, b in feats if b == 1]
    if len(booked) > 1:
        return "multiple_bookings", None
    n = EXPEDIA_POSITIONS + 1
    product = np.zeros((n, len(EXPEDIA_PRODUCT)))
    for p, f, _ in feats:
        product[p - 1] = f
    members = tuple(sorted(p - 1 for p in positions)) + (EXPEDIA_NO_PURCHASE,)
    choice = booked[0] - 1 if booked else EXPEDIA_NO_PURCHASE
    return None, ChoiceObservation(choice, Assortment(members, n), customer, product)


def load_expedia(path: str | Path) -> ChoiceDataset:
    """Products are ranked positions 1-38 plus the no-purchase option (index 38).

    Rows of one search must be contiguous (the public file is sorted by
    ``srch_id``).  A search is dropped whole if any row fails a rule.
    """
    required = ["srch_id", "position", "booking_bool", *EXPEDIA_CUSTOMER, *EXPEDIA_PRODUCT]
    drops: Counter = Counter()
    obs: list[ChoiceObservation] = []
    searches = 0
    fh, reader = _open_rows(path, required)
    dropped_columns = [c for c in reader.fieldnames if c not in required]

    def flush(rows):
        nonlocal searches
        if not rows:
            return
        searches += 1
        reason, ob = _expedia_search(rows)
        if reason is None:
            obs.append(ob)
        else:
            drops[reason] += 1

    with fh:
        current, rows = None, []
        for raw in reader:
            if raw["srch_id"] != current:
                flush(rows)
                current, rows = raw["srch_id"], []
            rows.append(raw)
        flush(rows)
    if not obs:
        raise ValueError(f"{path}: no searches survive the filters ({dict(drops)})")
    manifest = {
        "source": "expedia",
        "input_searches": searches,
        "output_searches": len(obs),
        "drop_counts": dict(drops),
        "filters": ["missing_value", "price_outlier", "booking_window_outlier", "position_out_of_range",
                    "multiple_bookings"],
        "customer_columns": list(EXPEDIA_CUSTOMER),
        "product_columns": list(EXPEDIA_PRODUCT),
        "dropped_columns": dropped_columns,
        "no_purchase_index": EXPEDIA_NO_PURCHASE,
    }
    universe = ProductUniverse(EXPEDIA_POSITIONS + 1, EXPEDIA_NO_PURCHASE)
    return ChoiceDataset(universe, tuple(obs), no_purchase_always_offered=True, meta={"ingest": manifest})


# --- Hotel ---------------------------------------------------------------------------

HOTEL_COLUMNS = ("hotel_id", "offered_room_types", "purchased_room_type")
DEFAULT_RARE_THRESHOLD = 10


def load_hotel(path: str | Path, hotel_id: int, rare_threshold: int = DEFAULT_RARE_THRESHOLD) -> ChoiceDataset:
    """One transaction per row: ``hotel_id``, ``offered_room_types`` (room-type
    ids separated by ``;``) and ``purchased_room_type``.

    Purchases of unoffered room types are dropped, then room types bought
    fewer than ``rare_threshold`` times are removed (together with the rows
    that bought them).  Surviving room types map to indices 0..k-1 in
    ascending id order and a no-purchase option, index k, joins every
    assortment.  No synthetic no-purchase choices are added.
    """
    drops: Counter = Counter()
    rows: list[tuple[tuple[int, ...], int]] = []
    total = 0
    seen_hotels = set()
    fh, reader = _open_rows(path, list(HOTEL_COLUMNS))
    with fh:
        for raw in reader:
            hid = int(_num(raw["hotel_id"]))
            seen_hotels.add(hid)
            if hid != hotel_id:
                continue
            total += 1
            offered = tuple(sorted({int(x) for x in raw["offered_room_types"].split(";") if x.strip()}))
            bought = int(_num(raw["purchased_room_type"]))
            if bought not in offered:
                drops["unmatched_purchase"] += 1
                continue
            rows.append((offered, bought))
    if hotel_id not in seen_hotels:
        raise ValueError(f"{path}: unknown hotel id {hotel_id} (present: {sorted(seen_hotels)})")
    purchases = Counter(b for _, b in rows)
    rare = sorted(t for t, c in purchases.items() if c < rare_threshold)
    kept_types = sorted(t for t, c in purchases.items() if c >= rare_threshold)
    index = {t: k for k, t in enumerate(kept_types)}
    n = len(kept_types) + 1
    no_purchase = n - 1
    obs = []
    for offered, bought in rows:
        if bought not in index:
            drops["rare_room_type"] += 1
            continue
        members = tuple(index[t] for t in offered if t in index) + (no_purchase,)
        obs.append(ChoiceObservation(index[bought], Assortment(members, n)))
    if not obs:
        raise ValueError(f"{path}: hotel {hotel_id} has no surviving transactions ({dict(drops)})")
    manifest = {
        "source": "hotel",
        "hotel_id": hotel_id,
        "input_rows": total,
        "output_rows": len(obs),
        "drop_counts": dict(drops),
        "rare_threshold": rare_threshold,
        "rare_room_types": rare,
        "room_types": kept_types,
        "no_purchase_index": no_purchase,
        "no_purchase_mode": "option_only",
    }
    return ChoiceDataset(ProductUniverse(n, no_purchase), tuple(obs), no_purchase_always_offered=True,
                         meta={"ingest": manifest})

