"""Hardware-drift augmentations: random phase or gain per AP or per antenna.

Each operator multiplies whole blocks of the channel tensor by one random
complex factor. Per-AP methods share the factor across all antennas and
subcarriers of an AP; per-antenna methods draw one factor per (AP, antenna).
The ``phases`` / ``gains_db`` arguments pin the random draws and exist so the
transforms can be checked against fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CsiSample, Origin, as_generator

DEFAULT_P_STAR_DB = 1.0


def _block_shape(sample: CsiSample, per_antenna: bool) -> tuple[int, int, int]:
    return (sample.n_ap, sample.n_rx if per_antenna else 1, 1)


def _apply_phase(sample, rng, per_antenna, phases, origin):
    shape = _block_shape(sample, per_antenna)
    if phases is None:
        phases = as_generator(rng).uniform(0.0, 2 * np.pi, shape[:2])
    phases = np.broadcast_to(np.asarray(phases, dtype=np.float64).reshape(-1, shape[1]), shape[:2])
    factor = np.exp(1j * phases)[..., None]
    return sample.replace(tensor=sample.tensor * factor, origin=origin)


def _apply_gain(sample, p_star, rng, per_antenna, gains_db, origin):
    if p_star < 0:
        raise ValueError("p_star must be >= 0")
    shape = _block_shape(sample, per_antenna)
    if gains_db is None:
        gains_db = as_generator(rng).uniform(-p_star, p_star, shape[:2])
    gains_db = np.broadcast_to(np.asarray(gains_db, dtype=np.float64).reshape(-1, shape[1]), shape[:2])
    # power-style dB: gain 10^(a/10) applied to the complex amplitude
    factor = (10.0 ** (gains_db / 10.0))[..., None]
    return sample.replace(tensor=sample.tensor * factor, origin=origin)


def phase_ap(sample: CsiSample, rng=None, phases=None) -> CsiSample:
    return _apply_phase(sample, rng, False, phases, Origin.PHASE_AP)


def phase_rx(sample: CsiSample, rng=None, phases=None) -> CsiSample:
    return _apply_phase(sample, rng, True, phases, Origin.PHASE_RX)


def amp_ap(sample: CsiSample, p_star: float = DEFAULT_P_STAR_DB, rng=None, gains_db=None) -> CsiSample:
    return _apply_gain(sample, p_star, rng, False, gains_db, Origin.AMP_AP)


def amp_rx(sample: CsiSample, p_star: float = DEFAULT_P_STAR_DB, rng=None, gains_db=None) -> CsiSample:
    return _apply_gain(sample, p_star, rng, True, gains_db, Origin.AMP_RX)


METHODS = {
    "phase-ap": phase_ap,
    "phase-rx": phase_rx,
    "amp-ap": amp_ap,
    "amp-rx": amp_rx,
}


@dataclass(frozen=True)
class TransceiverAugConfig:
    method: str = "phase-ap"
    p_star: float = DEFAULT_P_STAR_DB
    factor: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown transceiver method {self.method!r}")
        if self.p_star < 0:
            raise ValueError("p_star must be >= 0")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def augment_to_size(dataset, config: TransceiverAugConfig, target_size: int, rng):
    """Grow ``dataset`` to ``target_size`` samples with ``config.method``.

    Thin wrapper over :func:`csiaug.augment.augment_to_size`.
    """
    from .augment import augment_to_size as _grow

    return _grow(dataset, config.method, target_size, rng, p_star=config.p_star)
