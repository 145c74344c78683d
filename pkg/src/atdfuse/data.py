"""Paired bimodal datasets: synthetic tasks, CSV time series, CSV beats."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .guide import ModalityId
from .tensor import make_rng

log = logging.getLogger(__name__)

CALENDAR_VOCAB = 7 * 24


class SchemaError(ValueError):
    """Input file does not match the expected layout."""


@dataclass
class ModalBatch:
    modality: ModalityId
    kind: str
    payload: np.ndarray
    targets: np.ndarray | None = None

    def __len__(self):
        return len(self.payload)


@dataclass
class PairedDataset:
    """Two aligned modalities plus targets.

    ``y`` is an integer label vector for classification or a float matrix
    ``[n, out_dim]`` for regression.
    """

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    schema1: dict
    schema2: dict
    task: str
    n_classes: int = 0
    timestamps: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.x1) == len(self.x2) == len(self.y):
            raise ValueError(f"paired modalities disagree on sample count: "
                             f"{len(self.x1)}, {len(self.x2)}, {len(self.y)}")

    def __len__(self):
        return len(self.y)

    @property
    def out_dim(self):
        return self.n_classes if self.task == "classification" else self.y.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ts = None if self.timestamps is None else self.timestamps[idx]
        return PairedDataset(self.x1[idx], self.x2[idx], self.y[idx], self.schema1,
                             self.schema2, self.task, self.n_classes, ts, dict(self.info))

    def batches(self, idx):
        """ModalBatch pair for the given sample indices."""
        idx = np.asarray(idx, dtype=np.int64)
        y = self.y[idx]
        return (ModalBatch(ModalityId(0, self.schema1["kind"]), self.schema1["kind"], self.x1[idx], y),
                ModalBatch(ModalityId(1, self.schema2["kind"]), self.schema2["kind"], self.x2[idx], y))


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    def get(self, name):
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def _split_sizes(n, fractions):
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val


def chronological_split(n, fractions):
    n_train, n_val = _split_sizes(n, fractions)
    idx = np.arange(n)
    return Splits(idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])


def random_split(n, fractions, seed):
    perm = make_rng(seed).permutation(n)
    n_train, n_val = _split_sizes(n, fractions)
    return Splits(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                  np.sort(perm[n_train + n_val:]))


def stratified_split(labels, fractions, seed):
    """Per-class shuffled split so every split keeps the label proportions."""
    labels = np.asarray(labels)
    rng = make_rng(seed)
    parts = ([], [], [])
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train, n_val = _split_sizes(len(members), fractions)
        parts[0].append(members[:n_train])
        parts[1].append(members[n_train:n_train + n_val])
        parts[2].append(members[n_train + n_val:])
    return Splits(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


def series_schema(length, patch, channels=1):
    return {"kind": "series", "length": int(length), "window": int(patch), "channels": int(channels)}


# -- synthetic ----------------------------------------------------------------
def gen_synthetic(task, n, seed, length=16, noise=0.3, target_noise=0.05, patch=4):
    """Paired synthetic series tasks.

    ``xor_classification``: each modality is a constant sign s in {-1, +1}
    plus Gaussian noise; the label is 1 when the signs agree. Either
    modality alone is independent of the label.

    ``product_regression``: each modality is a level m ~ U(-1, 1) plus
    noise; the target is the product of the two observed series means plus
    ``target_noise`` Gaussian noise.
    """
    rng = make_rng(seed)
    schema = series_schema(length, patch)
    if task == "xor_classification":
        s1 = rng.choice([-1.0, 1.0], size=n)
        s2 = rng.choice([-1.0, 1.0], size=n)
        x1 = s1[:, None] + noise * rng.standard_normal((n, length))
        x2 = s2[:, None] + noise * rng.standard_normal((n, length))
        y = (s1 * s2 > 0).astype(np.int64)
        return PairedDataset(x1, x2, y, schema, dict(schema), "classification", 2,
                             info={"signs": np.stack([s1, s2], axis=1)})
    if task == "product_regression":
        m1 = rng.uniform(-1.0, 1.0, size=n)
        m2 = rng.uniform(-1.0, 1.0, size=n)
        x1 = m1[:, None] + noise * rng.standard_normal((n, length))
        x2 = m2[:, None] + noise * rng.standard_normal((n, length))
        y = x1.mean(axis=1) * x2.mean(axis=1) + target_noise * rng.standard_normal(n)
        return PairedDataset(x1, x2, y[:, None], schema, dict(schema), "regression")
    raise ValueError(f"unknown synthetic task {task!r}")


# -- CSV time series ------------------------------------------------------------
def load_csv_timeseries(path, window, horizon, target, timestamp="date", patch=4):
    """Sliding-window forecasting samples from a timestamped CSV.

    Modality 1 holds the numeric columns over each window ``[n, window, c]``;
    modality 2 holds calendar tokens ``day_of_week * 24 + hour`` for each
    window row. Targets are the next ``horizon`` values of ``target`` after
    the window. Values are returned unnormalized; see :func:`zscore_fit`.
    """
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: unreadable CSV ({exc})") from None
    missing = [c for c in (timestamp, target) if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    numeric_cols = [c for c in df.columns if c != timestamp]
    bad = [c for c in numeric_cols if not pd.api.types.is_numeric_dtype(df[c])]
    if bad:
        raise SchemaError(f"{path}: non-numeric column(s) {bad}")
    nan_rows = np.flatnonzero(df[numeric_cols].isna().any(axis=1).to_numpy())
    if len(nan_rows):
        raise SchemaError(f"{path}: NaN cells in data rows {nan_rows.tolist()}")
    try:
        ts = pd.to_datetime(df[timestamp])
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"{path}: unparseable timestamps ({exc})") from None
    if ts.isna().any():
        raise SchemaError(f"{path}: missing timestamps in rows {np.flatnonzero(ts.isna()).tolist()}")
    if not ts.is_monotonic_increasing or ts.duplicated().any():
        raise SchemaError(f"{path}: timestamps are not strictly increasing")

    values = df[numeric_cols].to_numpy(dtype=np.float64)
    tgt = df[target].to_numpy(dtype=np.float64)
    tokens = (ts.dt.dayofweek.to_numpy() * 24 + ts.dt.hour.to_numpy()).astype(np.int64)
    n_rows = len(df)
    n = n_rows - window - horizon + 1
    if n < 1:
        raise SchemaError(f"{path}: {n_rows} rows are too few for window={window}, horizon={horizon}")

    starts = np.arange(n)
    win = starts[:, None] + np.arange(window)[None, :]
    ahead = starts[:, None] + window + np.arange(horizon)[None, :]
    x1 = values[win]
    x2 = tokens[win]
    y = tgt[ahead]
    stamps = ts.to_numpy().astype("datetime64[ns]").astype(np.int64)[starts + window - 1]
    return PairedDataset(
        x1, x2, y,
        series_schema(window, patch, channels=len(numeric_cols)),
        {"kind": "tokens", "vocab": CALENDAR_VOCAB, "length": int(window)},
        "regression", timestamps=stamps,
        info={"columns": numeric_cols, "target_col": numeric_cols.index(target)},
    )


# -- beats ----------------------------------------------------------------------
def rasterize(beats, height=15, width=30):
    """Deterministic 2-D rendering of 1-D traces.

    Each trace is resampled to ``width`` columns by linear interpolation and
    scaled by its own max absolute value so that +max sits on row 0, zero on
    the middle row and -max on the last row. Each column's intensity is split
    linearly between the two nearest rows. Use an odd ``height`` for a
    single-row zero line.
    """
    beats = np.atleast_2d(np.asarray(beats, dtype=np.float64))
    b, length = beats.shape
    t = np.linspace(0.0, length - 1, width)
    lo_t = np.floor(t).astype(np.int64)
    hi_t = np.minimum(lo_t + 1, length - 1)
    frac_t = t - lo_t
    resampled = beats[:, lo_t] * (1.0 - frac_t) + beats[:, hi_t] * frac_t
    amp = np.abs(beats).max(axis=1, keepdims=True)
    amp[amp == 0] = 1.0
    row = (height - 1) / 2.0 * (1.0 - resampled / amp)
    row = np.clip(row, 0.0, height - 1)
    lo = np.floor(row).astype(np.int64)
    frac = row - lo
    hi = np.minimum(lo + 1, height - 1)
    img = np.zeros((b, height, width))
    bi = np.repeat(np.arange(b), width)
    ci = np.tile(np.arange(width), b)
    np.add.at(img, (bi, lo.reshape(-1), ci), (1.0 - frac).reshape(-1))
    np.add.at(img, (bi, hi.reshape(-1), ci), frac.reshape(-1))
    return img


def load_beats_csv(path, n_classes, height=15, width=30, patch=4, raster_patch=5):
    """Fixed-length beats: each row is L signal values then an integer label.

    Modality 1 is the raw beat; modality 2 its raster (:func:`rasterize`).
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(f"{path}: line {lineno} has {len(rec)} fields, "
                                  f"expected {len(header)} (inconsistent row lengths)")
            rows.append((lineno, rec))
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    try:
        values = np.array([[float(v) for v in rec[:-1]] for _, rec in rows])
        raw_labels = np.array([float(rec[-1]) for _, rec in rows])
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric cell ({exc})") from None
    if np.isnan(values).any():
        bad = [rows[i][0] for i in np.flatnonzero(np.isnan(values).any(axis=1))]
        raise SchemaError(f"{path}: NaN cells on lines {bad}")
    labels = raw_labels.astype(np.int64)
    if (labels != raw_labels).any() or labels.min() < 0 or labels.max() >= n_classes:
        bad = [rows[i][0] for i in np.flatnonzero((labels != raw_labels) | (labels < 0)
                                                  | (labels >= n_classes))]
        raise SchemaError(f"{path}: labels outside [0, {n_classes}) on lines {bad}")
    length = values.shape[1]
    return PairedDataset(
        values, rasterize(values, height, width), labels,
        series_schema(length, patch),
        {"kind": "image2d", "height": height, "width": width, "patch": raster_patch},
        "classification", n_classes,
    )


# -- normalization ----------------------------------------------------------------
def zscore_fit(x, axis=0, floor=1e-8):
    mean = x.mean(axis=axis)
    std = x.std(axis=axis)
    return mean, np.where(std < floor, 1.0, std)


def normalize_series(ds, train_idx):
    """Z-score the series modalities and regression targets with train-split
    statistics (per position and channel for series, per output for targets)."""
    out = ds.subset(np.arange(len(ds)))
    for attr, schema in (("x1", ds.schema1), ("x2", ds.schema2)):
        if schema["kind"] != "series":
            continue
        arr = getattr(ds, attr)
        mean, std = zscore_fit(arr[train_idx])
        setattr(out, attr, (arr - mean) / std)
    if ds.task == "regression" and ds.info.get("normalize_targets", True):
        mean, std = zscore_fit(ds.y[train_idx])
        out.y = (ds.y - mean) / std
        out.info["target_mean"], out.info["target_std"] = mean, std
    return out


def load_dataset(spec, seed):
    """Build the paired dataset and split indices for a ``DataConfig``."""
    fractions = (spec.split_train, spec.split_val, spec.split_test)
    if spec.kind == "synthetic":
        ds = gen_synthetic(spec.task, spec.n, seed, length=spec.window, noise=spec.noise,
                           target_noise=spec.target_noise, patch=spec.patch)
        # synthetic targets are already on a unit scale
        ds.info["normalize_targets"] = False
        splits = (stratified_split(ds.y, fractions, seed) if ds.task == "classification"
                  else random_split(len(ds), fractions, seed))
    elif spec.kind == "csv_timeseries":
        ds = load_csv_timeseries(spec.path, spec.window, spec.horizon, spec.target,
                                 spec.timestamp, patch=spec.patch)
        splits = chronological_split(len(ds), fractions)
    elif spec.kind == "beats_csv":
        ds = load_beats_csv(spec.path, spec.n_classes, spec.raster_height, spec.raster_width,
                            patch=spec.patch, raster_patch=spec.raster_patch)
        splits = stratified_split(ds.y, fractions, seed)
    else:
        raise ValueError(f"unknown data kind {spec.kind!r}")
    if len(splits.train) < 2:
        raise ValueError(f"training split has {len(splits.train)} sample(s); at least 2 are needed")
    if spec.normalize:
        ds = normalize_series(ds, splits.train)
    return ds, splits
