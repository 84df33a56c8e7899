"""Shared containers, DFT kernels and path-derived random streams."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Origin(enum.IntEnum):
    """Provenance tag of a sample. Values are the on-disk origin byte."""

    MEASURED = 0
    PHASE_AP = 1
    PHASE_RX = 2
    AMP_AP = 3
    AMP_RX = 4
    CORR = 5
    PDP1 = 6
    PDP2 = 7
    PDP3 = 8
    PDP4 = 9
    NOISE = 10

    @property
    def is_augmented(self) -> bool:
        return self is not Origin.MEASURED


class DimensionError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CsiSample:
    """One location's channel tensor of shape ``(n_ap, n_rx, M)`` and its 2-D label in meters."""

    tensor: np.ndarray
    label: np.ndarray
    origin: Origin = Origin.MEASURED

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.complex128)
        if t.ndim != 3:
            raise DimensionError(f"tensor must be (n_ap, n_rx, M), got shape {t.shape}")
        if t.shape[0] < 1 or t.shape[1] < 1 or t.shape[2] < 2:
            raise DimensionError(f"need n_ap >= 1, n_rx >= 1, M >= 2; got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("tensor contains non-finite values")
        lab = np.asarray(self.label, dtype=np.float64).reshape(-1)
        if lab.shape != (2,) or not np.all(np.isfinite(lab)):
            raise ValueError(f"label must be 2 finite coordinates, got {self.label!r}")
        object.__setattr__(self, "tensor", _frozen(t))
        object.__setattr__(self, "label", _frozen(lab))
        object.__setattr__(self, "origin", Origin(self.origin))

    @property
    def n_ap(self) -> int:
        return self.tensor.shape[0]

    @property
    def n_rx(self) -> int:
        return self.tensor.shape[1]

    @property
    def n_subcarriers(self) -> int:
        return self.tensor.shape[2]

    def replace(self, tensor=None, label=None, origin=None) -> CsiSample:
        return CsiSample(
            self.tensor if tensor is None else tensor,
            self.label if label is None else label,
            self.origin if origin is None else origin,
        )


# ---------------------------------------------------------------------------
# DFT kernels. Unnormalized forward, 1/M inverse, along the last axis.


def _check_length(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim == 0 or x.shape[-1] < 2:
        raise DimensionError("DFT length must be at least 2")
    return x


def dft_forward(h) -> np.ndarray:
    """``H[m] = sum_n h[n] exp(-j 2 pi m n / M)`` over the last axis."""
    return np.fft.fft(_check_length(h), axis=-1)


def dft_inverse(H) -> np.ndarray:
    """``h[n] = (1/M) sum_m H[m] exp(+j 2 pi m n / M)`` over the last axis."""
    return np.fft.ifft(_check_length(H), axis=-1)


# ---------------------------------------------------------------------------
# Random streams


@dataclass(frozen=True)
class RngStream:
    """A random stream addressed by ``(root_seed, path)``.

    Two streams with the same address always produce the same draws. The
    address is hashed through :class:`numpy.random.SeedSequence` (``path`` is
    its spawn key), so streams with different paths are independent and no
    stream depends on how many draws any other stream made.
    """

    root_seed: int
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.root_seed < 0:
            raise ValueError("root_seed must be non-negative")
        object.__setattr__(self, "root_seed", int(self.root_seed) & (2**64 - 1))
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def derive(self, *indices: int) -> RngStream:
        return RngStream(self.root_seed, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.root_seed, spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def seed_int(self) -> int:
        """A 63-bit integer seed deterministically tied to this stream."""
        ss = np.random.SeedSequence(self.root_seed, spawn_key=self.path)
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def derive_stream(root: RngStream, index: int) -> RngStream:
    return root.derive(index)


def as_generator(rng) -> np.random.Generator:
    """Accept an :class:`RngStream`, a Generator or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def complex_normal(gen: np.random.Generator, shape, variance=1.0) -> np.ndarray:
    """Circularly symmetric complex Gaussian draws, ``E|z|^2 = variance``."""
    scale = np.sqrt(np.asarray(variance, dtype=np.float64) / 2.0)
    z = gen.standard_normal(shape) + 1j * gen.standard_normal(shape)
    return z * scale
