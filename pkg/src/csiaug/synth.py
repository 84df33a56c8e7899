"""Synthetic single-bounce multipath rooms and their CSI.

A UE at position ``p`` reaches AP ``j`` through an optional direct path and
one path per scatterer (UE -> scatterer -> AP). Each path contributes
``alpha * a_k(phi) * exp(-j 2 pi f_m tau)`` to subcarrier ``m`` of antenna
``k``, with ``a_k(phi) = exp(-j pi k sin(phi - orientation))`` for a
half-wavelength linear array.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import CsiSample, Origin, RngStream, complex_normal
from .dataset import Dataset, DatasetMeta

SPEED_OF_LIGHT = 299_792_458.0


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass(frozen=True)
class EnvConfig:
    room_width: float = 10.0
    room_depth: float = 10.0
    n_ap: int = 3
    n_rx: int = 4
    # (x, y, orientation_rad) per AP; empty -> spread along the walls
    ap_positions: tuple = ()
    n_scatterers: int = 50
    los_enabled: bool = True
    carrier_freq: float = 5e9
    bandwidth: float = 80e6
    n_subcarriers: int = 234
    noise_variance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        aps = tuple(tuple(float(v) for v in ap) for ap in self.ap_positions)
        if not aps and self.n_ap >= 1 and self.room_width > 0 and self.room_depth > 0:
            aps = default_ap_layout(self.n_ap, self.room_width, self.room_depth)
        object.__setattr__(self, "ap_positions", aps)
        problems = []
        if not self.room_width > 0:
            problems.append("room_width must be > 0")
        if not self.room_depth > 0:
            problems.append("room_depth must be > 0")
        if self.n_ap < 1:
            problems.append("n_ap must be >= 1")
        if self.n_rx < 1:
            problems.append("n_rx must be >= 1")
        if self.n_subcarriers < 2:
            problems.append("n_subcarriers must be >= 2")
        if not self.bandwidth > 0:
            problems.append("bandwidth must be > 0")
        if not self.carrier_freq > 0:
            problems.append("carrier_freq must be > 0")
        if self.noise_variance < 0:
            problems.append("noise_variance must be >= 0")
        if self.n_scatterers < 0:
            problems.append("n_scatterers must be >= 0")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if len(aps) != self.n_ap:
            problems.append(f"ap_positions has {len(aps)} entries, n_ap is {self.n_ap}")
        for i, ap in enumerate(aps):
            if len(ap) != 3:
                problems.append(f"ap_positions[{i}] must be (x, y, orientation)")
            elif not (0 <= ap[0] <= self.room_width and 0 <= ap[1] <= self.room_depth):
                problems.append(f"ap_positions[{i}] lies outside the room")
        if problems:
            raise ConfigError(problems)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    def subcarrier_freqs(self) -> np.ndarray:
        m = np.arange(1, self.n_subcarriers + 1)
        return self.carrier_freq - self.bandwidth / 2 + (m - 0.5) * self.bandwidth / self.n_subcarriers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap_positions"] = [list(ap) for ap in self.ap_positions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in sorted(unknown)])
        d = dict(d)
        if "ap_positions" in d and d["ap_positions"] is not None:
            d["ap_positions"] = tuple(tuple(ap) for ap in d["ap_positions"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError([str(exc)]) from exc

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> EnvConfig:
        d = yaml.safe_load(Path(path).read_text()) or {}
        if "env" in d and isinstance(d["env"], dict):
            d = d["env"]
        return cls.from_dict(d)


def default_ap_layout(n_ap: int, width: float, depth: float) -> tuple:
    """Place APs evenly along the room perimeter, arrays facing the center."""
    perim = 2 * (width + depth)
    out = []
    for j in range(n_ap):
        s = (j + 0.5) * perim / n_ap
        if s < width:
            x, y = s, 0.0
        elif s < width + depth:
            x, y = width, s - width
        elif s < 2 * width + depth:
            x, y = width - (s - width - depth), depth
        else:
            x, y = 0.0, depth - (s - 2 * width - depth)
        orient = float(np.arctan2(depth / 2 - y, width / 2 - x))
        out.append((float(x), float(y), orient))
    return tuple(out)


@dataclass(frozen=True)
class Environment:
    config: EnvConfig
    scatterer_pos: np.ndarray = field(repr=False)
    reflectivity: np.ndarray = field(repr=False)

    @property
    def wavelength(self) -> float:
        return self.config.wavelength

    @property
    def n_scatterers(self) -> int:
        return self.scatterer_pos.shape[0]

    def contains(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        return 0 <= x <= self.config.room_width and 0 <= y <= self.config.room_depth


def build_environment(config: EnvConfig) -> Environment:
    """Draw scatterers uniformly in the room; reflectivity magnitude U[0.05, 0.5], phase U[0, 2 pi)."""
    gen = RngStream(config.seed, (0,)).generator()
    n = config.n_scatterers
    pos = np.column_stack(
        [gen.uniform(0, config.room_width, n), gen.uniform(0, config.room_depth, n)]
    )
    mag = gen.uniform(0.05, 0.5, n)
    phase = gen.uniform(0, 2 * np.pi, n)
    refl = mag * np.exp(1j * phase)
    pos.setflags(write=False)
    refl.setflags(write=False)
    return Environment(config, pos, refl)


def _paths(env: Environment, ue: np.ndarray, ap: np.ndarray):
    """Complex gain, delay and arrival azimuth of every path from ``ue`` to AP ``ap``."""
    cfg = env.config
    lam = cfg.wavelength
    gains, delays, angles = [], [], []
    ap_xy = ap[:2]
    if cfg.los_enabled:
        v = ue - ap_xy
        d = max(float(np.hypot(*v)), 1e-3)
        gains.append(lam / (4 * np.pi * d) * np.exp(-2j * np.pi * cfg.carrier_freq * d / SPEED_OF_LIGHT))
        delays.append(d / SPEED_OF_LIGHT)
        angles.append(np.arctan2(v[1], v[0]))
    if env.n_scatterers:
        s = env.scatterer_pos
        d1 = np.maximum(np.hypot(*(s - ue).T), 1e-3)
        v2 = s - ap_xy
        d2 = np.maximum(np.hypot(*v2.T), 1e-3)
        dt = d1 + d2
        g = env.reflectivity * lam / (4 * np.pi * dt) * np.exp(-2j * np.pi * cfg.carrier_freq * dt / SPEED_OF_LIGHT)
        gains.extend(g)
        delays.extend(dt / SPEED_OF_LIGHT)
        angles.extend(np.arctan2(v2[:, 1], v2[:, 0]))
    return np.asarray(gains, dtype=np.complex128), np.asarray(delays), np.asarray(angles)


def channel_response(env: Environment, ue_pos) -> np.ndarray:
    """Noise-free ``(n_ap, n_rx, M)`` frequency response at ``ue_pos``."""
    cfg = env.config
    ue = np.asarray(ue_pos, dtype=np.float64).reshape(2)
    f = cfg.subcarrier_freqs()
    k = np.arange(cfg.n_rx)
    out = np.zeros((cfg.n_ap, cfg.n_rx, cfg.n_subcarriers), dtype=np.complex128)
    for j, ap in enumerate(np.asarray(cfg.ap_positions)):
        g, tau, phi = _paths(env, ue, ap)
        if g.size == 0:
            continue
        steer = np.exp(-1j * np.pi * np.outer(k, np.sin(phi - ap[2])))  # (n_rx, L)
        ramp = np.exp(-2j * np.pi * np.outer(tau, f))  # (L, M)
        out[j] = (steer * g) @ ramp
    return out


def sample_channel(env: Environment, ue_pos, noise_on: bool = False, rng: RngStream | None = None) -> CsiSample:
    """Channel at ``ue_pos`` plus, if ``noise_on``, CN(0, noise_variance) per entry (unit pilot)."""
    if not env.contains(ue_pos):
        raise ValueError(f"UE position {tuple(ue_pos)} lies outside the room")
    h = channel_response(env, ue_pos)
    var = env.config.noise_variance
    if noise_on and var > 0:
        if rng is None:
            raise ValueError("noise_on requires an rng stream")
        h = h + complex_normal(rng.generator(), h.shape, var)
    return CsiSample(h, np.asarray(ue_pos, dtype=np.float64), Origin.MEASURED)


def grid_layout(env: Environment, spacing: float) -> np.ndarray:
    """Points at ``(i + 1/2) * spacing`` offsets inside the room."""
    cfg = env.config
    xs = np.arange(spacing / 2, cfg.room_width, spacing)
    ys = np.arange(spacing / 2, cfg.room_depth, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def random_layout(env: Environment, n: int, rng: RngStream) -> np.ndarray:
    gen = rng.generator()
    cfg = env.config
    return np.column_stack([gen.uniform(0, cfg.room_width, n), gen.uniform(0, cfg.room_depth, n)])


def dataset_meta(env: Environment, n: int = 0, created_from: str = "synth") -> DatasetMeta:
    cfg = env.config
    return DatasetMeta(cfg.n_subcarriers, cfg.n_ap, cfg.n_rx, cfg.bandwidth, cfg.carrier_freq, n, created_from)


def make_dataset(env: Environment, layout, noise_on: bool, rng: RngStream) -> Dataset:
    """Sample one measured CSI tensor per layout point.

    ``layout`` is ``("grid", spacing)``, ``("random", n)`` or an explicit
    ``(N, 2)`` array of positions. Point ``i`` draws its noise from
    ``rng.derive(1, i)``; random positions come from ``rng.derive(0)``.
    """
    if isinstance(layout, tuple) and len(layout) == 2 and isinstance(layout[0], str):
        kind, arg = layout
        if kind == "grid":
            pts = grid_layout(env, float(arg))
        elif kind == "random":
            pts = random_layout(env, int(arg), rng.derive(0))
        else:
            raise ValueError(f"unknown layout {kind!r}")
    else:
        pts = np.asarray(layout, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("layout yields no points inside the room")
    samples = [sample_channel(env, p, noise_on, rng.derive(1, i)) for i, p in enumerate(pts)]
    return Dataset.from_samples(samples, dataset_meta(env, len(samples), f"synth seed={env.config.seed}"))
