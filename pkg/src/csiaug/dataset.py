"""Dataset container, the CSIA binary file format and train/val/test splits.

File layout (little-endian)::

    magic        4s   b"CSIA"
    version      u16  1
    M            u32
    n_ap         u16
    n_rx         u16
    n_samples    u64
    bandwidth_hz f64
    carrier_hz   f64
    then n_samples records of
        x f64, y f64, origin u8,
        n_ap * n_rx * M * 2 f32  (AP-major, antenna next, subcarrier last, re before im)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .core import CsiSample, DimensionError, Origin

MAGIC = b"CSIA"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHQdd")
_LABEL = struct.Struct("<ddB")


class DatasetFormatError(Exception):
    """Base class for CSIA file problems."""


class MagicMismatchError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


class DimensionMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class DatasetMeta:
    n_subcarriers: int
    n_ap: int
    n_rx: int
    bandwidth: float
    carrier_freq: float
    n_samples: int = 0
    created_from: str = ""

    def __post_init__(self):
        if self.n_subcarriers < 2 or self.n_ap < 1 or self.n_rx < 1:
            raise DimensionError(
                f"invalid dims M={self.n_subcarriers} n_ap={self.n_ap} n_rx={self.n_rx}"
            )
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_ap, self.n_rx, self.n_subcarriers)


@dataclass(frozen=True)
class Dataset:
    """Ordered samples stored as stacked arrays.

    ``csi`` has shape ``(N, n_ap, n_rx, M)``, ``labels`` ``(N, 2)`` and
    ``origin`` ``(N,)`` holding :class:`Origin` codes. Arrays are read-only.
    """

    meta: DatasetMeta
    csi: np.ndarray
    labels: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        csi = np.array(self.csi, dtype=np.complex128, copy=True)
        labels = np.array(self.labels, dtype=np.float64, copy=True).reshape(-1, 2)
        origin = np.array(self.origin, dtype=np.uint8, copy=True).reshape(-1)
        if csi.ndim != 4 or csi.shape[1:] != self.meta.shape:
            raise DimensionError(f"csi shape {csi.shape} does not match meta {self.meta.shape}")
        n = csi.shape[0]
        if labels.shape[0] != n or origin.shape[0] != n:
            raise DimensionError("csi, labels and origin disagree on sample count")
        if origin.size and origin.max() > max(Origin):
            raise ValueError("unknown origin code")
        for a in (csi, labels, origin):
            a.setflags(write=False)
        object.__setattr__(self, "csi", csi)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", origin)
        if self.meta.n_samples != n:
            object.__setattr__(self, "meta", replace(self.meta, n_samples=n))

    def __len__(self) -> int:
        return self.csi.shape[0]

    def __getitem__(self, i: int) -> CsiSample:
        return CsiSample(self.csi[i], self.labels[i], Origin(int(self.origin[i])))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.meta, self.csi[idx], self.labels[idx], self.origin[idx])

    @property
    def measured_mask(self) -> np.ndarray:
        return self.origin == Origin.MEASURED

    @classmethod
    def from_samples(cls, samples, meta: DatasetMeta) -> Dataset:
        samples = list(samples)
        if samples:
            csi = np.stack([s.tensor for s in samples])
            labels = np.stack([s.label for s in samples])
        else:
            csi = np.zeros((0,) + meta.shape, dtype=np.complex128)
            labels = np.zeros((0, 2))
        origin = np.array([int(s.origin) for s in samples], dtype=np.uint8)
        return cls(meta, csi, labels, origin)

    @classmethod
    def empty_like(cls, meta: DatasetMeta) -> Dataset:
        return cls.from_samples([], meta)


def concat(datasets) -> Dataset:
    datasets = list(datasets)
    if not datasets:
        raise ValueError("nothing to concatenate")
    meta = datasets[0].meta
    for d in datasets[1:]:
        if d.meta.shape != meta.shape:
            raise DimensionError("cannot concatenate datasets with different dims")
    return Dataset(
        meta,
        np.concatenate([d.csi for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([d.origin for d in datasets]),
    )


# ---------------------------------------------------------------------------
# Binary IO


def save(dataset: Dataset, path) -> None:
    meta = dataset.meta
    n = len(dataset)
    rec = np.empty(
        n,
        dtype=np.dtype(
            [
                ("x", "<f8"),
                ("y", "<f8"),
                ("origin", "u1"),
                ("iq", "<f4", (meta.n_ap * meta.n_rx * meta.n_subcarriers * 2,)),
            ]
        ),
    )
    rec["x"] = dataset.labels[:, 0]
    rec["y"] = dataset.labels[:, 1]
    rec["origin"] = dataset.origin
    iq = np.empty(dataset.csi.shape + (2,), dtype="<f4")
    iq[..., 0] = dataset.csi.real
    iq[..., 1] = dataset.csi.imag
    rec["iq"] = iq.reshape(n, -1)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        meta.n_subcarriers,
        meta.n_ap,
        meta.n_rx,
        n,
        float(meta.bandwidth),
        float(meta.carrier_freq),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def load(path, created_from: str | None = None) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: not a CSIA file (bad magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated", record_index=None)
    magic, version, m, n_ap, n_rx, n, bw, fc = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if m < 2 or n_ap < 1 or n_rx < 1:
        raise DimensionMismatchError(f"{path}: invalid dims M={m} n_ap={n_ap} n_rx={n_rx}")
    rec_size = _LABEL.size + n_ap * n_rx * m * 2 * 4
    body = len(data) - _HEADER.size
    if body < n * rec_size:
        bad = body // rec_size
        raise TruncatedFileError(
            f"{path}: truncated in record {bad} of {n}", record_index=bad
        )
    if body > n * rec_size:
        raise DimensionMismatchError(
            f"{path}: {body - n * rec_size} trailing bytes; header dims inconsistent with payload"
        )
    dt = np.dtype(
        [("x", "<f8"), ("y", "<f8"), ("origin", "u1"), ("iq", "<f4", (n_ap * n_rx * m * 2,))]
    )
    rec = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    iq = rec["iq"].astype(np.float64).reshape(n, n_ap, n_rx, m, 2)
    csi = iq[..., 0] + 1j * iq[..., 1]
    labels = np.stack([rec["x"], rec["y"]], axis=1)
    if rec["origin"].size and rec["origin"].max() > max(Origin):
        raise DatasetFormatError(f"{path}: unknown origin code {rec['origin'].max()}")
    meta = DatasetMeta(m, n_ap, n_rx, bw, fc, n, created_from or str(path))
    return Dataset(meta, csi, labels, rec["origin"])


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitManifest:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    scheme: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            a = np.array(getattr(self, name), dtype=np.int64).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        for a, b in ((0, 1), (0, 2), (1, 2)):
            if sets[a] & sets[b]:
                raise ValueError("split index sets overlap")
        for s in sets:
            if len(s) and min(s) < 0:
                raise ValueError("negative index in split")

    def check_bounds(self, n: int) -> None:
        for a in (self.train, self.val, self.test):
            if a.size and a.max() >= n:
                raise IndexError(f"split index {a.max()} out of range for {n} samples")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "params": dict(self.params),
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SplitManifest:
        return cls(d["train"], d["val"], d["test"], d["scheme"], d.get("params", {}))

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None))

    @classmethod
    def load(cls, path) -> SplitManifest:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def split_random(n_or_dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Shuffle indices with ``seed`` then cut contiguous train/val/test blocks.

    Block sizes are ``floor(f * N)``; indices left over when the fractions sum
    to less than one belong to no split.
    """
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    fr = list(fractions) + [0.0] * (3 - len(fractions))
    if any(f < 0 for f in fr) or fr[0] <= 0 or sum(fr) > 1 + 1e-12:
        raise ValueError(f"invalid split fractions {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(np.floor(f * n + 1e-9)) for f in fr]
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitManifest(
        np.sort(perm[:a]),
        np.sort(perm[a:b]),
        np.sort(perm[b : b + sizes[2]]),
        "random",
        {"fractions": [float(f) for f in fr], "seed": int(seed)},
    )


def _long_axis(labels: np.ndarray) -> int:
    span = labels.max(axis=0) - labels.min(axis=0)
    return int(np.argmax(span))


def split_spatial(
    dataset_or_labels,
    scheme: str = "center",
    fraction: float = 1.0 / 3.0,
    side: str = "low",
    val_fraction: float = 0.0,
    seed: int = 0,
    band: tuple[float, float] | None = None,
) -> SplitManifest:
    """Train on a band of the room and test on the remainder.

    ``scheme="center"`` trains on the middle ``fraction`` of the bounding box
    along its long axis; ``scheme="side"`` on the ``side`` ("low"/"high") end.
    ``band`` overrides the computed bounds. A ``val_fraction`` of the train
    band is carved out as validation by a seeded shuffle.
    """
    labels = getattr(dataset_or_labels, "labels", dataset_or_labels)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    if labels.shape[0] == 0:
        raise ValueError("cannot split an empty dataset")
    axis = _long_axis(labels)
    lo, hi = labels[:, axis].min(), labels[:, axis].max()
    if hi <= lo:
        raise ValueError("labels span a degenerate bounding box")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    width = (hi - lo) * fraction
    if band is None:
        if scheme == "center":
            mid = 0.5 * (lo + hi)
            band = (mid - width / 2, mid + width / 2)
        elif scheme == "side":
            band = (lo, lo + width) if side == "low" else (hi - width, hi)
        else:
            raise ValueError(f"unknown spatial scheme {scheme!r}")
    coord = labels[:, axis]
    inside = (coord >= band[0]) & (coord <= band[1])
    train = np.flatnonzero(inside)
    test = np.flatnonzero(~inside)
    if train.size == 0 or test.size == 0:
        raise ValueError("spatial split leaves the train or test region empty")
    val = np.array([], dtype=np.int64)
    if val_fraction > 0:
        perm = np.random.default_rng(seed).permutation(train)
        n_val = int(np.floor(val_fraction * train.size + 1e-9))
        val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return SplitManifest(
        train,
        val,
        test,
        f"spatial-{scheme}",
        {
            "axis": axis,
            "band": [float(band[0]), float(band[1])],
            "fraction": float(fraction),
            "side": side,
            "val_fraction": float(val_fraction),
            "seed": int(seed),
        },
    )
