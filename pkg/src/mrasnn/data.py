"""Vibration windows: windowing, splitting, SNR-controlled noise, a synthetic
fault-signal generator and the ``VIBR`` binary dataset format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Invalid dataset content or arguments."""


class DatasetFormatError(DataError):
    """Bad magic bytes or otherwise unparseable file."""


class DatasetVersionError(DataError):
    pass


class DatasetTruncatedError(DataError):
    pass


@dataclass
class SampleSet:
    windows: np.ndarray  # [N, c_in, L]
    labels: np.ndarray  # [N]
    class_names: list[str] = field(default_factory=list)
    split: str = "all"

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 3:
            raise DataError(f"windows must be [N, channels, length], got {self.windows.shape}")
        if len(self.labels) != len(self.windows):
            raise DataError("windows and labels differ in length")
        if not self.class_names:
            k = int(self.labels.max()) + 1 if len(self.labels) else 0
            self.class_names = [f"class{i}" for i in range(k)]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "SampleSet":
        return SampleSet(self.windows[idx], self.labels[idx], list(self.class_names), split or self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def window_signal(record: np.ndarray, L: int, stride: int | None = None) -> np.ndarray:
    """Cut ``[c_in, M]`` into ``floor((M - L)/stride) + 1`` windows of length L."""
    record = np.asarray(record)
    if record.ndim == 1:
        record = record[None, :]
    stride = L if stride is None else stride
    M = record.shape[-1]
    if M < L:
        raise DataError(f"record of length {M} is shorter than the window length {L}")
    n = (M - L) // stride + 1
    return np.stack([record[:, i * stride : i * stride + L] for i in range(n)])


def split(dataset: SampleSet, train_fraction: float, seed: int) -> tuple[SampleSet, SampleSet]:
    """Seeded stratified split; each class contributes ``round(n * fraction)`` training windows."""
    if not 0 < train_fraction < 1:
        raise DataError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, eval_idx = [], []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise DataError(f"class {k} has fewer than 2 samples")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(len(idx) * train_fraction)), 1), len(idx) - 1)
        train_idx.append(idx[:n_train])
        eval_idx.append(idx[n_train:])
    tr = np.sort(np.concatenate(train_idx))
    ev = np.sort(np.concatenate(eval_idx))
    return dataset.subset(tr, "train"), dataset.subset(ev, "eval")


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(x, dtype=np.float64))))


def add_noise(window: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white Gaussian noise with power ``P_signal / 10**(snr_db/10)``.

    The signal power is the mean square of this window alone.
    """
    window = np.asarray(window)
    p = signal_power(window)
    if p == 0:
        raise DataError("SNR is undefined for an all-zero window")
    sigma = np.sqrt(p / 10.0 ** (snr_db / 10.0))
    noisy = window.astype(np.float64) + rng.normal(0.0, sigma, size=window.shape)
    return noisy.astype(window.dtype if window.dtype.kind == "f" else np.float64)


def add_noise_set(dataset: SampleSet, snr_db: float, seed: int) -> SampleSet:
    rng = np.random.default_rng(seed)
    noisy = np.stack([add_noise(w, snr_db, rng) for w in dataset.windows])
    return SampleSet(noisy, dataset.labels.copy(), list(dataset.class_names), dataset.split)


def standardize(windows: np.ndarray) -> np.ndarray:
    """Per-window, per-channel z-score."""
    mu = windows.mean(axis=-1, keepdims=True)
    sd = windows.std(axis=-1, keepdims=True)
    return ((windows - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)


# ---------------------------------------------------------------- synthetic generator

SAMPLE_RATE = 12_000.0
SHAFT_HZ = 29.5
NOISE_STD = 0.35
IMPACT_DECAY_S = 0.0015
TRIGGER_JITTER_RAD = 0.3  # windows start on a once-per-rev pulse
HARMONIC2_BASE = 0.2
HARMONIC2_STEP = 0.15  # looseness grows the 2x order with fault class


def fault_signature(k: int) -> tuple[float, float]:
    """(impact repetition rate Hz, resonance frequency Hz) of fault class ``k >= 1``."""
    return 55.0 + 38.0 * k, 1800.0 + 650.0 * k


def _synth_window(k: int, L: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(L) / SAMPLE_RATE
    shaft = SHAFT_HZ * rng.uniform(0.95, 1.05)
    phase = rng.uniform(-TRIGGER_JITTER_RAD, TRIGGER_JITTER_RAD)
    x = 0.6 * np.sin(2 * np.pi * shaft * t + phase)
    x += (HARMONIC2_BASE + HARMONIC2_STEP * k) * np.sin(2 * np.pi * 2 * shaft * t + 2 * phase)
    if k > 0:
        rate, resonance = fault_signature(k)
        rate *= rng.uniform(0.97, 1.03)
        period = 1.0 / rate
        t0 = rng.uniform(0, period)
        while t0 < t[-1]:
            amp = rng.uniform(0.7, 1.3)
            dt = t - t0
            on = dt >= 0
            x[on] += amp * np.exp(-dt[on] / IMPACT_DECAY_S) * np.sin(2 * np.pi * resonance * dt[on])
            t0 += period * rng.uniform(0.98, 1.02)
    x += rng.normal(0.0, NOISE_STD, size=L)
    return x


def synth_dataset(num_classes: int = 3, per_class: int = 200, L: int = 1024, seed: int = 0,
                  channels: int = 1) -> SampleSet:
    """Desk-scale stand-in for a bearing dataset.

    Every window holds a shaft sinusoid plus its second harmonic, started
    near a fixed shaft phase, and Gaussian noise. Class 0 is the normal
    condition. Class k >= 1 raises the second harmonic by ``HARMONIC2_STEP * k``
    and adds an exponentially decaying resonance burst repeated at a
    class-specific impact rate, with jittered timing and amplitude (see
    ``fault_signature``).
    Multi-channel sets repeat the generator independently per channel.
    """
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    windows = np.empty((num_classes * per_class, channels, L), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, k in enumerate(labels):
        for c in range(channels):
            windows[i, c] = _synth_window(int(k), L, rng)
    names = ["normal"] + [f"fault{k}" for k in range(1, num_classes)]
    return SampleSet(windows, labels, names, "all")


# ---------------------------------------------------------------- VIBR format

MAGIC = b"VIBR"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")


def dataset_bytes(ds: SampleSet) -> bytes:
    n, c, L = ds.windows.shape
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, n, c, L, ds.num_classes)
    return head + ds.windows.astype("<f4").tobytes() + ds.labels.astype("<u2").tobytes()


def save_dataset(ds: SampleSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_from_bytes(blob: bytes) -> SampleSet:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise DatasetFormatError("not a VIBR dataset (bad magic)")
    if len(blob) < _HEADER.size:
        raise DatasetTruncatedError("header is truncated")
    _, version, n, c, L, K = _HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported VIBR version {version}")
    need = _HEADER.size + n * c * L * 4 + n * 2
    if len(blob) != need:
        raise DatasetTruncatedError(f"header declares {n} windows ({need} bytes) but file has {len(blob)} bytes")
    off = _HEADER.size
    windows = np.frombuffer(blob, "<f4", n * c * L, off).reshape(n, c, L).astype(np.float32)
    labels = np.frombuffer(blob, "<u2", n, off + n * c * L * 4).astype(np.int64)
    if n and labels.max() >= K:
        raise DatasetFormatError("label exceeds declared class count")
    return SampleSet(windows, labels, [f"class{i}" for i in range(K)])


def load_dataset(path) -> SampleSet:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def load_csv(path, channels: int = 1) -> SampleSet:
    """One window per row, channel-major samples, integer label in the last column."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and not row[0].lstrip().startswith("#"):
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    if rows:
                        raise DataError(f"non-numeric CSV row: {row[:3]}...") from None
    if not rows:
        raise DataError("CSV file holds no windows")
    arr = np.asarray(rows)
    labels = arr[:, -1].astype(np.int64)
    body = arr[:, :-1]
    if body.shape[1] % channels:
        raise DataError("row length is not a multiple of the channel count")
    return SampleSet(body.reshape(len(arr), channels, -1), labels)
