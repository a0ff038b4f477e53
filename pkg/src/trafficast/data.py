"""Series ingestion, periodic sample assembly, and synthetic data.

A training sample pairs a recent window R with daily/weekly context blocks
D and W cut from the same series at day and week offsets, plus the target
Y. Block indexing is documented on TrainingSample; everything here is plain
numpy (the autodiff wrapper enters only at the model boundary).

File container: magic `STGT`, version byte, rank byte, rank little-endian
uint64 dims, then float64 little-endian payload in row-major order.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from trafficast.graph import GraphSpec

MAGIC = b"STGT"
VERSION = 1


class DataError(ValueError):
    """Malformed file, inconsistent spec, or series too short."""


# ---------------------------------------------------------------------------
# binary tensor container
# ---------------------------------------------------------------------------

def tensor_blob(array) -> bytes:
    """Serialize one array: header, dims, then the row-major payload."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    return (
        MAGIC
        + struct.pack("<BB", VERSION, arr.ndim)
        + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        + arr.tobytes(order="C")
    )


def parse_tensor_blob(raw: bytes, offset: int, origin: str) -> Tuple[np.ndarray, int]:
    """Decode one tensor blob starting at `offset`; returns (array, end).

    Error messages report absolute byte offsets into `raw` so a corrupt
    file can be inspected directly.
    """
    if len(raw) - offset < 6:
        raise DataError(
            f"{origin}: truncated header at byte offset {offset}, "
            f"expected at least 6 bytes, got {len(raw) - offset}"
        )
    if raw[offset : offset + 4] != MAGIC:
        raise DataError(
            f"{origin}: bad magic at byte offset {offset}, "
            f"expected {MAGIC!r}, got {raw[offset:offset + 4]!r}"
        )
    version, rank = raw[offset + 4], raw[offset + 5]
    if version != VERSION:
        raise DataError(
            f"{origin}: unsupported version {version} at byte offset {offset + 4}, "
            f"expected {VERSION}"
        )
    if rank == 0:
        raise DataError(f"{origin}: zero rank at byte offset {offset + 5}")
    dims_start = offset + 6
    dims_end = dims_start + 8 * rank
    if len(raw) < dims_end:
        raise DataError(
            f"{origin}: truncated dims at byte offset {dims_start}, "
            f"expected {8 * rank} bytes, got {len(raw) - dims_start}"
        )
    dims = struct.unpack(f"<{rank}Q", raw[dims_start:dims_end])
    for k, dim in enumerate(dims):
        if dim == 0:
            raise DataError(
                f"{origin}: nonpositive dimension {dim} "
                f"at byte offset {dims_start + 8 * k}"
            )
    count = int(np.prod(dims))
    expected = 8 * count
    if len(raw) - dims_end < expected:
        raise DataError(
            f"{origin}: payload at byte offset {dims_end} "
            f"expected {expected} bytes ({count} values), got {len(raw) - dims_end}"
        )
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=dims_end)
    return values.reshape(dims).astype(np.float64), dims_end + expected


def write_tensor_file(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_blob(array))


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    arr, end = parse_tensor_blob(raw, 0, origin=str(path))
    if end != len(raw):
        raise DataError(
            f"{path}: payload at byte offset {end - 8 * arr.size} "
            f"expected {8 * arr.size} bytes ({arr.size} values), "
            f"got {len(raw) - (end - 8 * arr.size)}"
        )
    return arr


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class SignalSeries:
    """A [T, N, C] observation array with its daily/weekly cadence."""

    data: np.ndarray
    samples_per_day: int
    samples_per_week: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"series must be [T, N, C], got rank {self.data.ndim}")
        if self.samples_per_day <= 0:
            raise DataError("samples_per_day must be positive")
        if self.samples_per_week != 7 * self.samples_per_day:
            raise DataError(
                f"samples_per_week must be 7*samples_per_day "
                f"({7 * self.samples_per_day}), got {self.samples_per_week}"
            )

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


def load_series(path, l_d: int, l_w: Optional[int] = None) -> SignalSeries:
    """Read a [T, N, C] tensor file; l_w defaults to 7*l_d."""
    return SignalSeries(read_tensor_file(path), l_d, 7 * l_d if l_w is None else l_w)


@dataclass
class DatasetSpec:
    """Windowing and split configuration.

    P recent steps in, Q steps out; D and W blocks are P+L steps long with
    L = Q + S so a half-width-S attention window around any forecast step
    stays inside the block.
    """

    P: int = 12
    Q: int = 12
    S: int = 3
    d_count: int = 1
    w_count: int = 1
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    L: int = field(init=False)

    def __post_init__(self):
        for name in ("P", "Q", "S", "d_count", "w_count"):
            if getattr(self, name) < 0 or (name in ("P", "Q") and getattr(self, name) == 0):
                raise DataError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_count < 1 or self.w_count < 1:
            raise DataError("d_count and w_count must be at least 1")
        self.L = self.Q + self.S
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise DataError(f"split must sum to 1, got {self.split}")
        if any(s < 0 for s in self.split):
            raise DataError(f"split ratios must be nonnegative, got {self.split}")

    @property
    def block_len(self) -> int:
        return self.P + self.L


@dataclass
class TrainingSample:
    """One (R, D, W, Y) tuple, as float64 arrays.

    r: [P, N, C] rows data[t0-P .. t0-1]
    d: [d_count, P+L, N, C], block axis most-distant-first: position p holds
       offset i = d_count - p days back, rows data[t0-P-i*l_d .. t0+L-1-i*l_d]
    w: same layout with week offsets i*l_w
    y: [Q, N, C] rows data[t0 .. t0+Q-1]
    t0: absolute index of the first forecast step
    """

    r: np.ndarray
    d: np.ndarray
    w: np.ndarray
    y: np.ndarray
    t0: int


def admissible_t0_range(series: SignalSeries, spec: DatasetSpec) -> range:
    """All t0 with full history (back w_count weeks) and full target ahead."""
    first = spec.w_count * series.samples_per_week + spec.P
    last = series.n_steps - spec.Q  # inclusive
    return range(first, last + 1)


def _cut_sample(data, t0, spec, l_d, l_w) -> TrainingSample:
    r = data[t0 - spec.P : t0]
    d_blocks = [
        data[t0 - spec.P - i * l_d : t0 + spec.L - i * l_d]
        for i in range(spec.d_count, 0, -1)
    ]
    w_blocks = [
        data[t0 - spec.P - i * l_w : t0 + spec.L - i * l_w]
        for i in range(spec.w_count, 0, -1)
    ]
    y = data[t0 : t0 + spec.Q]
    return TrainingSample(
        r=r.copy(),
        d=np.stack(d_blocks),
        w=np.stack(w_blocks),
        y=y.copy(),
        t0=t0,
    )


def build_samples(
    series: SignalSeries, spec: DatasetSpec
) -> Tuple[List[TrainingSample], List[TrainingSample], List[TrainingSample]]:
    """Cut every admissible sample at stride 1 and split chronologically.

    The daily offset must exceed L, otherwise the most recent D block would
    reach into the forecast period itself.
    """
    l_d, l_w = series.samples_per_day, series.samples_per_week
    if l_d <= spec.L:
        raise DataError(
            f"samples_per_day ({l_d}) must exceed L = Q + S ({spec.L}); "
            "the most recent daily block would overlap the forecast window"
        )
    t0s = admissible_t0_range(series, spec)
    if len(t0s) == 0:
        min_t = spec.w_count * l_w + spec.P + spec.Q
        raise DataError(
            f"series too short: T={series.n_steps}, need at least {min_t} steps "
            f"for one sample (w_count*l_w + P + Q)"
        )
    samples = [_cut_sample(series.data, t0, spec, l_d, l_w) for t0 in t0s]
    n = len(samples)
    n_train = int(n * spec.split[0])
    n_val = int(n * spec.split[1])
    return (
        samples[:n_train],
        samples[n_train : n_train + n_val],
        samples[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-channel z-score statistics."""

    mean: np.ndarray  # [C]
    std: np.ndarray   # [C], floored at 1e-8

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def fit_apply_zscore(series: SignalSeries, train_range) -> Tuple[Normalizer, SignalSeries]:
    """Fit per-channel statistics on train_range rows, normalize the series."""
    idx = np.asarray(list(train_range), dtype=int)
    if idx.size == 0:
        raise DataError("train_range is empty")
    train = series.data[idx]  # [Ttrain, N, C]
    mean = train.mean(axis=(0, 1))
    std = train.std(axis=(0, 1))
    floored = std < 1e-8
    if np.any(floored):
        warnings.warn(
            f"zero-variance channel(s) {np.nonzero(floored)[0].tolist()}: "
            "std floored at 1e-8"
        )
        std = np.where(floored, 1e-8, std)
    norm = Normalizer(mean=mean, std=std)
    out = SignalSeries(
        norm.apply(series.data), series.samples_per_day, series.samples_per_week
    )
    return norm, out


@dataclass
class DatasetSplits:
    train: List[TrainingSample]
    val: List[TrainingSample]
    test: List[TrainingSample]
    normalizer: Normalizer
    spec: DatasetSpec


def prepare_dataset(series: SignalSeries, spec: DatasetSpec) -> DatasetSplits:
    """Split, normalize, and window a raw series.

    Statistics come from the rows strictly before the first validation
    forecast start, so nothing the validation or test targets cover leaks
    into the scaler.
    """
    l_d, l_w = series.samples_per_day, series.samples_per_week
    if l_d <= spec.L:
        raise DataError(
            f"samples_per_day ({l_d}) must exceed L = Q + S ({spec.L})"
        )
    t0s = list(admissible_t0_range(series, spec))
    if not t0s:
        min_t = spec.w_count * l_w + spec.P + spec.Q
        raise DataError(
            f"series too short: T={series.n_steps}, need at least {min_t} steps"
        )
    n_train = int(len(t0s) * spec.split[0])
    fit_end = t0s[n_train] if n_train < len(t0s) else series.n_steps
    normalizer, normed = fit_apply_zscore(series, range(0, fit_end))
    train, val, test = build_samples(normed, spec)
    return DatasetSplits(train=train, val=val, test=test, normalizer=normalizer, spec=spec)


# ---------------------------------------------------------------------------
# synthetic series
# ---------------------------------------------------------------------------

def synth_generate(
    n_nodes: int,
    days: int,
    l_d: int,
    shift_max: int,
    noise: float,
    seed: int,
    amp_weekly: float = 0.0,
) -> Tuple[SignalSeries, GraphSpec]:
    """Periodic per-node signals with integer per-day phase jitter.

    Node i on day k produces
        base_i + amp_i * sin(2*pi*(t + delta_i(k)) / l_d)
          + amp_weekly * sin(2*pi*t / l_w) + noise * eps(t)
    with delta_i(k) drawn uniformly from the integers in
    [-shift_max, +shift_max]. Integer shifts keep cross-day correlation
    peaks on exact lags. amp_weekly defaults to 0 so the default signal is
    exactly l_d-periodic when noise and shift_max are both 0.

    The companion graph is a ring with unit distances; sigma is set to 1
    explicitly because equal distances have zero spread.
    """
    if shift_max < 0:
        raise DataError(f"shift_max must be >= 0, got {shift_max}")
    if noise < 0:
        raise DataError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    l_w = 7 * l_d
    t_total = days * l_d

    base = rng.uniform(30.0, 70.0, size=n_nodes)
    amp = rng.uniform(5.0, 15.0, size=n_nodes)
    shifts = rng.integers(-shift_max, shift_max + 1, size=(n_nodes, days))

    t = np.arange(t_total)
    day_of_t = t // l_d
    # [T, N]: per-node shifts expanded along time by each step's day index
    delta = shifts[:, day_of_t].T
    phase = 2.0 * np.pi * (t[:, None] + delta) / l_d
    x = base[None, :] + amp[None, :] * np.sin(phase)
    if amp_weekly != 0.0:
        x = x + amp_weekly * np.sin(2.0 * np.pi * t[:, None] / l_w)
    if noise > 0:
        x = x + noise * rng.standard_normal(size=(t_total, n_nodes))

    series = SignalSeries(x[:, :, None], samples_per_day=l_d, samples_per_week=l_w)
    edges = [(i, (i + 1) % n_nodes, 1.0) for i in range(n_nodes)] if n_nodes > 1 else []
    graph = GraphSpec(n_nodes=n_nodes, edges=edges, kappa=1.0, sigma=1.0)
    return series, graph
