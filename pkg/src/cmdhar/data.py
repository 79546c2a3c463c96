"""Sensor recording ingestion, windowing, normalization and noise injection.

Recordings come in as CSV (UTF-8, header row, comma separated, one sample
per row) plus a JSON schema describing the columns:

    {
      "sample_rate": 50.0,
      "subject_id": "s01",          # optional
      "columns": {
        "acc_x": {"channel": true, "modality": "accel"},
        "acc_y": {"channel": true, "modality": "accel"},
        "gyro_x": {"channel": true, "modality": "gyro"},
        "activity": {"label": true}
      }
    }

A column entry with "label": true is the per-sample class index; every
other mapped column is a channel and must name its modality ("channel" is
optional and implied by "modality"). Columns in the file but absent from
the schema are ignored. Malformed cells are rejected with their line
number, never silently dropped.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint

SPLITS = ("train", "val", "test")


class SchemaError(ValueError):
    """Schema document and CSV header disagree."""


class ParseError(ValueError):
    """A CSV cell failed to parse; message carries the file line number."""


@dataclass(frozen=True)
class SensorRecording:
    """Equal-length named channel series with per-sample labels."""

    channel_names: list[str]
    data: np.ndarray                 # length x channels
    labels: np.ndarray               # length, int class indices
    sample_rate: float
    subject_id: str
    modality_of_channel: dict[str, str]

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"recording data must be 2-D, got {self.data.shape}")
        if len(self.labels) != len(self.data):
            raise ValueError("labels length must equal channel length")
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError("channel_names must match data columns")
        missing = [c for c in self.channel_names if c not in self.modality_of_channel]
        if missing:
            raise ValueError(f"channels without modality: {missing}")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channel_count(self) -> int:
        return self.data.shape[1]

    @property
    def modalities(self) -> list[str]:
        seen = []
        for c in self.channel_names:
            m = self.modality_of_channel[c]
            if m not in seen:
                seen.append(m)
        return seen


@dataclass(frozen=True)
class WindowedDataset:
    """Fixed-length labeled windows with split tags and modality annotations."""

    windows: np.ndarray              # N x S x C
    labels: np.ndarray               # N
    split: np.ndarray                # N, values in SPLITS
    class_count: int
    channel_names: list[str]
    modality_of_channel: dict[str, str]
    norm_stats: tuple | None = None  # (per-channel mean, per-channel std)

    def __post_init__(self):
        if self.windows.ndim != 3:
            raise ValueError(f"windows must be N x S x C, got {self.windows.shape}")
        if not (len(self.labels) == len(self.split) == len(self.windows)):
            raise ValueError("windows, labels and split must align")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_size(self) -> int:
        return self.windows.shape[1]

    @property
    def channel_count(self) -> int:
        return self.windows.shape[2]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return np.flatnonzero(self.split == split)

    def modality_slices(self) -> dict[str, list[int]]:
        """Channel indices per modality, in channel order."""
        out: dict[str, list[int]] = {}
        for i, c in enumerate(self.channel_names):
            out.setdefault(self.modality_of_channel[c], []).append(i)
        return out


# ---------------------------------------------------------------------------
# Schema + CSV loading


def load_schema(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        schema = json.load(fh)
    validate_schema(schema)
    return schema


def validate_schema(schema: dict) -> None:
    if "columns" not in schema or not isinstance(schema["columns"], dict):
        raise SchemaError("schema must carry a 'columns' mapping")
    labels = [c for c, spec in schema["columns"].items() if spec.get("label")]
    if len(labels) != 1:
        raise SchemaError(f"schema must mark exactly one label column, found {labels}")
    for col, spec in schema["columns"].items():
        if spec.get("label"):
            continue
        if not spec.get("modality"):
            raise SchemaError(f"channel column {col!r} must name its modality")


def load_csv(path, schema) -> SensorRecording:
    """Read a recording CSV against a schema (dict or path to JSON)."""
    if not isinstance(schema, dict):
        schema = load_schema(schema)
    else:
        validate_schema(schema)

    columns = schema["columns"]
    label_col = next(c for c, s in columns.items() if s.get("label"))
    channel_cols = [c for c in columns if not columns[c].get("label")]

    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: empty file")

    header = [h.strip() for h in lines[0].split(",")]
    pos = {name: i for i, name in enumerate(header)}
    for col in [label_col, *channel_cols]:
        if col not in pos:
            raise SchemaError(f"{path}: header is missing schema column {col!r}")

    n_rows = len(lines) - 1
    if n_rows == 0:
        raise ParseError(f"{path}: no data rows")
    data = np.empty((n_rows, len(channel_cols)), dtype=np.float64)
    labels = np.empty(n_rows, dtype=np.int64)

    chan_pos = [pos[c] for c in channel_cols]
    label_pos = pos[label_col]
    for r, line in enumerate(lines[1:]):
        lineno = r + 2  # physical line; header is line 1
        cells = line.split(",")
        if len(cells) < len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} cells, "
                             f"got {len(cells)}")
        for j, cp in enumerate(chan_pos):
            cell = cells[cp].strip()
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: line {lineno}: non-numeric cell {cell!r} in column "
                    f"{channel_cols[j]!r}") from None
            if not math.isfinite(value):
                raise ParseError(
                    f"{path}: line {lineno}: non-finite cell {cell!r} in column "
                    f"{channel_cols[j]!r}")
            data[r, j] = value
        cell = cells[label_pos].strip()
        try:
            lab = int(float(cell))
            if float(cell) != lab or lab < 0:
                raise ValueError
        except ValueError:
            raise ParseError(
                f"{path}: line {lineno}: label cell {cell!r} is not a non-negative "
                f"integer") from None
        labels[r] = lab

    return SensorRecording(
        channel_names=channel_cols,
        data=data,
        labels=labels,
        sample_rate=float(schema.get("sample_rate", 0.0)),
        subject_id=str(schema.get("subject_id", "")),
        modality_of_channel={c: columns[c]["modality"] for c in channel_cols},
    )


# ---------------------------------------------------------------------------
# Windowing and splits


def _allocate_split(n: int, fractions: np.ndarray) -> list[int]:
    # largest-remainder allocation: each count within 1 of the exact share
    ideal = n * fractions
    counts = np.floor(ideal).astype(int)
    remainder = ideal - counts
    for i in np.argsort(-remainder)[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def make_windows(rec: SensorRecording, size: int, step: int,
                 ratios=(8, 1, 1), seed: int = 0) -> WindowedDataset:
    """Slide a window over the recording and stratify the split by class.

    Windows start at offsets 0, step, 2*step, ...; each takes the majority
    label of its samples (ties resolve to the lower class index). The
    train/val/test assignment is a per-class shuffle under ``seed``, so the
    split is deterministic and within one window of the exact ratio inside
    every class stratum.
    """
    if size > rec.length:
        raise ValueError(f"window size {size} exceeds recording length {rec.length}")
    if step < 1:
        raise ValueError("step must be >= 1")

    offsets = range(0, rec.length - size + 1, step)
    class_count = int(rec.labels.max()) + 1
    windows = np.stack([rec.data[o:o + size] for o in offsets])
    labels = np.empty(len(windows), dtype=np.int64)
    for i, o in enumerate(offsets):
        counts = np.bincount(rec.labels[o:o + size], minlength=class_count)
        labels[i] = int(np.argmax(counts))  # argmax breaks ties toward lower index

    fr = np.asarray(ratios, dtype=np.float64)
    fr = fr / fr.sum()
    rng = np.random.default_rng(seed)
    split = np.empty(len(windows), dtype="<U5")
    for cls in range(class_count):
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        n_tr, n_va, n_te = _allocate_split(len(members), fr)
        split[members[:n_tr]] = "train"
        split[members[n_tr:n_tr + n_va]] = "val"
        split[members[n_tr + n_va:]] = "test"

    return WindowedDataset(
        windows=windows, labels=labels, split=split, class_count=class_count,
        channel_names=list(rec.channel_names),
        modality_of_channel=dict(rec.modality_of_channel),
    )


def normalize(ds: WindowedDataset, stats_from: str = "train") -> WindowedDataset:
    """Per-channel z-score using statistics of one split (train by default)."""
    idx = ds.indices(stats_from)
    if len(idx) == 0:
        raise ValueError(f"cannot normalize: {stats_from!r} split is empty")
    ref = ds.windows[idx]
    mean = ref.mean(axis=(0, 1))
    std = np.maximum(ref.std(axis=(0, 1)), 1e-8)
    return replace(ds, windows=(ds.windows - mean) / std, norm_stats=(mean, std))


def channel_signal_power(ds: WindowedDataset) -> np.ndarray:
    """Mean squared value per channel over the whole dataset."""
    return (ds.windows ** 2).mean(axis=(0, 1))


def snr_noise_variance(ds: WindowedDataset, snr_db: float) -> np.ndarray:
    """Per-channel Gaussian noise variance hitting the target SNR in dB."""
    if not (math.isfinite(snr_db) or snr_db == math.inf):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    if snr_db == math.inf:
        return np.zeros(ds.channel_count)
    return channel_signal_power(ds) / (10.0 ** (snr_db / 10.0))


def inject_snr_noise(ds: WindowedDataset, snr_db: float, seed: int = 0) -> WindowedDataset:
    """Add zero-mean Gaussian noise at the requested signal-to-noise ratio.

    Noise variance per channel is P_signal / 10^(snr_db/10) with P_signal the
    channel's mean squared value over the whole dataset. ``snr_db = inf`` is
    the no-noise sentinel. The input dataset is left untouched.
    """
    if snr_db == math.inf:
        return replace(ds, windows=ds.windows.copy())
    var = snr_noise_variance(ds, snr_db)
    if np.any(var == 0.0):
        dead = [ds.channel_names[i] for i in np.flatnonzero(var == 0.0)]
        warnings.warn(f"all-zero channels get zero noise: {dead}", stacklevel=2)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(ds.windows.shape) * np.sqrt(var)
    return replace(ds, windows=ds.windows + noise)


# ---------------------------------------------------------------------------
# Optional binary cache (checkpoint byte layout)


def save_cache(ds: WindowedDataset, path) -> None:
    """Persist windows/labels/split in the checkpoint layout.

    Window values are stored as f32; modality annotations are not part of
    the cache and must be re-supplied on load.
    """
    split_codes = np.array([SPLITS.index(s) for s in ds.split], dtype=np.float64)
    checkpoint.save({
        "windows": ds.windows,
        "labels": ds.labels.astype(np.float64),
        "split": split_codes,
    }, path)


def load_cache(path, channel_names: list[str] | None = None,
               modality_of_channel: dict[str, str] | None = None) -> WindowedDataset:
    entries = checkpoint.load(path)
    for key in ("windows", "labels", "split"):
        if key not in entries:
            raise checkpoint.CheckpointError(f"cache is missing entry {key!r}")
    windows = entries["windows"]
    labels = entries["labels"].astype(np.int64)
    split = np.array([SPLITS[int(s)] for s in entries["split"]], dtype="<U5")
    c = windows.shape[2]
    if channel_names is None:
        channel_names = [f"ch{i}" for i in range(c)]
    if modality_of_channel is None:
        modality_of_channel = {name: "unknown" for name in channel_names}
    return WindowedDataset(
        windows=windows, labels=labels, split=split,
        class_count=int(labels.max()) + 1,
        channel_names=channel_names, modality_of_channel=modality_of_channel,
    )
