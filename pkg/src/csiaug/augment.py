"""Dataset-level augmentation driver shared by all methods.

Output layout is always the measured block first, then augmented copies in
``(copy, sample)`` order: copy 1 of every source sample, then copy 2, and so
on. Copy ``c`` (1-based) of source sample ``i`` draws from
``rng.derive(i, c)``, so results do not depend on thread count or on which
other samples were augmented.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import channel as ch
from .core import Origin, RngStream, dft_inverse
from .dataset import Dataset, concat
from .transceiver import DEFAULT_P_STAR_DB

TRANSCEIVER_METHODS = ("phase-ap", "phase-rx", "amp-ap", "amp-rx")
CHANNEL_METHODS = ("corr", "pdp1", "pdp2", "pdp3", "pdp4")
ALL_METHODS = TRANSCEIVER_METHODS + CHANNEL_METHODS + ("noise",)

ORIGIN_OF = {
    "phase-ap": Origin.PHASE_AP,
    "phase-rx": Origin.PHASE_RX,
    "amp-ap": Origin.AMP_AP,
    "amp-rx": Origin.AMP_RX,
    "corr": Origin.CORR,
    "pdp1": Origin.PDP1,
    "pdp2": Origin.PDP2,
    "pdp3": Origin.PDP3,
    "pdp4": Origin.PDP4,
    "noise": Origin.NOISE,
}

MAX_COPIES = 10_000


class _Plan:
    """Per-method preparation (done once per source sample) and draw (per copy)."""

    def __init__(self, dataset: Dataset, method: str, params: dict):
        if method not in ORIGIN_OF:
            raise ValueError(f"unknown augmentation method {method!r}")
        self.dataset = dataset
        self.method = method
        self.origin = ORIGIN_OF[method]
        self.p_star = float(params.get("p_star", DEFAULT_P_STAR_DB))
        m = dataset.meta.n_subcarriers
        ds = params.get("delta_star")
        self.delta_star = ch.default_delta_star(m) if ds is None else int(ds)
        self.snr_db = float(params.get("snr_db", ch.DEFAULT_SNR_NLOS_DB))
        if method == "corr" and not 1 <= self.delta_star <= m - 1:
            raise ValueError(f"delta_star must be in [1, {m - 1}]")
        if self.p_star < 0:
            raise ValueError("p_star must be >= 0")
        self.cell_power = None
        if method == "pdp3":
            grid = params.get("grid")
            if grid is None:
                grid = ch.CellGrid.build(
                    dataset.labels,
                    params.get("cell_spacing", ch.DEFAULT_CELL_SPACING),
                    params.get("cell_origin"),
                )
            self.grid = grid
            # single reduction pass before any draw
            self.cell_power = ch.cell_power(dataset.csi, grid)

    def prepare(self, i: int):
        t = self.dataset.csi[i]
        m = self.method
        if m == "corr":
            c, r0, _ = ch._corr_factors(t, self.delta_star, with_error=False)
            return c, r0
        if m in ("pdp1", "pdp4"):
            return dft_inverse(t)
        if m == "pdp2":
            return np.abs(dft_inverse(t)) ** 2
        if m == "pdp3":
            return self.cell_power[self.grid.assignment[i]]
        if m == "noise":
            return ch._noise_power(t, self.snr_db)
        return t

    def label(self, i: int) -> np.ndarray:
        if self.method == "pdp3":
            return self.grid.center_of(i)
        return self.dataset.labels[i]

    def draw(self, i: int, state, gen: np.random.Generator) -> np.ndarray:
        m = self.method
        t = self.dataset.csi[i]
        a, r = t.shape[0], t.shape[1]
        if m == "phase-ap":
            return t * np.exp(1j * gen.uniform(0, 2 * np.pi, (a, 1, 1)))
        if m == "phase-rx":
            return t * np.exp(1j * gen.uniform(0, 2 * np.pi, (a, r, 1)))
        if m == "amp-ap":
            return t * 10.0 ** (gen.uniform(-self.p_star, self.p_star, (a, 1, 1)) / 10.0)
        if m == "amp-rx":
            return t * 10.0 ** (gen.uniform(-self.p_star, self.p_star, (a, r, 1)) / 10.0)
        if m == "corr":
            return ch._corr_draw(state[0], state[1], gen)
        if m == "pdp1":
            return ch._pdp1_draw(state, gen)
        if m in ("pdp2", "pdp3"):
            return ch._pdp2_draw(state, gen)
        if m == "pdp4":
            return ch._pdp4_draw(state, gen)
        if m == "noise":
            if np.isinf(self.snr_db):
                return t.copy()
            return ch._noise_draw(t, state, gen)
        raise AssertionError(m)


def _as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        raise ValueError("augmentation requires a seed or RngStream")
    return RngStream(int(rng))


def _generate(plan: _Plan, jobs, rng: RngStream, threads: int = 1):
    """Fill one output slot per ``(slot, sample, copy)`` job."""
    ds = plan.dataset
    n_out = len(jobs)
    csi = np.empty((n_out,) + ds.meta.shape, dtype=np.complex128)
    labels = np.empty((n_out, 2))
    by_sample: dict[int, list] = {}
    for slot, i, c in jobs:
        by_sample.setdefault(i, []).append((slot, c))

    def work(i):
        state = plan.prepare(i)
        lab = plan.label(i)
        for slot, c in by_sample[i]:
            csi[slot] = plan.draw(i, state, rng.derive(i, c).generator())
            labels[slot] = lab

    order = sorted(by_sample)
    if threads > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, order))
    else:
        for i in order:
            work(i)
    origin = np.full(n_out, int(plan.origin), dtype=np.uint8)
    return Dataset(ds.meta, csi, labels, origin)


def augment_to_size(dataset: Dataset, method: str, target_size: int, rng, threads: int = 1, **params) -> Dataset:
    """Measured samples followed by copies cycled sample-major until ``target_size`` samples."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot augment an empty dataset")
    if target_size < n:
        raise ValueError(f"target size {target_size} is smaller than the dataset ({n})")
    if target_size == n:
        return dataset
    plan = _Plan(dataset, method, params)
    jobs = []
    for k in range(target_size - n):
        c, i = divmod(k, n)
        jobs.append((k, i, c + 1))
    return concat([dataset, _generate(plan, jobs, _as_stream(rng), threads)])


def augment_dataset(dataset: Dataset, method: str, factor: int, rng, threads: int = 1, **params) -> Dataset:
    """Append ``factor`` augmented copies of every sample; ``factor=0`` returns the input."""
    if factor < 0:
        raise ValueError("factor must be >= 0")
    if factor > MAX_COPIES:
        raise ValueError(f"factor {factor} exceeds the limit of {MAX_COPIES}")
    return augment_to_size(dataset, method, len(dataset) * (1 + int(factor)), rng, threads, **params)


def augment_indices(dataset: Dataset, indices, copies: int, method: str, rng, threads: int = 1, **params) -> Dataset:
    """Keep every sample once and append ``copies`` augmented versions of ``indices`` only."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if copies < 0 or copies > MAX_COPIES:
        raise ValueError(f"copies must lie in [0, {MAX_COPIES}]")
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError("augmentation index out of range")
    if copies == 0 or idx.size == 0:
        return dataset
    plan = _Plan(dataset, method, params)
    jobs = []
    slot = 0
    for c in range(1, copies + 1):
        for i in idx:
            jobs.append((slot, int(i), c))
            slot += 1
    return concat([dataset, _generate(plan, jobs, _as_stream(rng), threads)])
