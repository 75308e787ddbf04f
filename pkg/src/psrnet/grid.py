"""Gridded population and POI data: coarsening, windows, splits, PGRD files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError

SLOTS_PER_DAY = 48
WEEK_SLOTS = 7 * SLOTS_PER_DAY

POI_CATEGORIES = (
    "food", "hotel", "culture", "sports", "shopping", "factory", "recreation",
    "institution", "medical", "scenic", "education", "residence", "transport", "business",
)


@dataclass
class PopulationSeries:
    values: np.ndarray  # [T, H, W], persons per cell per slot
    cell_meters: int = 500
    slot_minutes: int = 30

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ShapeError(f"population series must be [T,H,W] with T>=1, got {self.values.shape}")
        if np.any(self.values < 0):
            raise DataError("population values must be nonnegative")

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class PoiMap:
    counts: np.ndarray  # [C, nH, nW]
    categories: tuple[str, ...] = POI_CATEGORIES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 3 or self.counts.shape[0] != len(self.categories):
            raise ShapeError(f"POI counts {self.counts.shape} do not match {len(self.categories)} categories")
        if np.any(self.counts < 0) or np.any(self.counts != np.round(self.counts)):
            raise DataError("POI counts must be nonnegative integers")


@dataclass
class ReferenceSnapshot:
    values: np.ndarray  # [1, nH, nW]
    slot_index: int


@dataclass
class WindowSample:
    coarse_seq: np.ndarray  # [T_w, H, W]
    fine_target: np.ndarray  # [1, nH, nW]
    t_of_day: int
    slot: int = -1


@dataclass
class DatasetSplit:
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)


def coarsen(fine: np.ndarray, n: int) -> np.ndarray:
    """Sum non-overlapping ``n x n`` blocks over the last two axes."""
    fine = np.asarray(fine, dtype=np.float64)
    *lead, nH, nW = fine.shape
    if nH % n or nW % n:
        raise ShapeError(f"grid {nH}x{nW} is not divisible by {n}")
    return fine.reshape(*lead, nH // n, n, nW // n, n).sum(axis=(-3, -1))


def make_windows(series: PopulationSeries | np.ndarray, n: int, window: int,
                 coarse: np.ndarray | None = None) -> list[WindowSample]:
    """One sample per end slot ``t >= window - 1``.

    ``coarse`` may be passed when the coarse series is already known;
    otherwise it is the sum pooling of the fine series.
    """
    fine = series.values if isinstance(series, PopulationSeries) else np.asarray(series, dtype=np.float64)
    T = fine.shape[0]
    if T < window:
        raise DataError(f"series of {T} slots is shorter than the window {window}")
    coarse = coarsen(fine, n) if coarse is None else coarse
    return [
        WindowSample(coarse[t - window + 1:t + 1], fine[t:t + 1], t % SLOTS_PER_DAY, t)
        for t in range(window - 1, T)
    ]


def split_source(samples, seed: int, ratios=(0.70, 0.15, 0.15)) -> DatasetSplit:
    """Seeded shuffle then train/val/test partition."""
    n = len(samples)
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise DataError(f"{n} samples are too few for ratios {ratios}")
    return DatasetSplit(
        sorted(order[:n_train].tolist()),
        sorted(order[n_train:n_train + n_val].tolist()),
        sorted(order[n_train + n_val:].tolist()),
    )


def split_target(samples, week_slots: int = WEEK_SLOTS) -> tuple[ReferenceSnapshot, list[int]]:
    """Final ``week_slots`` samples form the test set; its first frame is the reference."""
    n = len(samples)
    if n < week_slots:
        raise DataError(f"target has {n} samples, fewer than the {week_slots}-slot test week")
    test = list(range(n - week_slots, n))
    first = samples[test[0]]
    return ReferenceSnapshot(first.fine_target.copy(), first.slot), test


# -- PGRD binary format --------------------------------------------------------------
#
# b"PGRD" | u16 version | u8 dtype (0 = f64) | u8 rank | rank x u32 dims | LE payload

MAGIC = b"PGRD"
VERSION = 1
_HEADER = struct.Struct("<4sHBB")
_MAX_ELEMENTS = 1 << 34


def encode_grid(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim > 255 or any(d >= 1 << 32 for d in array.shape):
        raise FormatError(f"shape {array.shape} cannot be encoded")
    head = _HEADER.pack(MAGIC, VERSION, 0, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + dims + np.ascontiguousarray(array, dtype="<f8").tobytes()


def decode_grid(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}")
    offset = _HEADER.size + 4 * rank
    if len(blob) < offset:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, _HEADER.size)
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError(f"dims {dims} overflow the element limit")
    if len(blob) - offset != 8 * count:
        raise FormatError(f"payload holds {len(blob) - offset} bytes, dims {dims} need {8 * count}")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)


def save_grid(path, array: np.ndarray, meta: dict | None = None) -> None:
    """Write ``array`` as PGRD and, when given, ``meta`` as a ``.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_grid(array))
    if meta is not None:
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_grid(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    array = decode_grid(path.read_bytes())
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return array, meta
