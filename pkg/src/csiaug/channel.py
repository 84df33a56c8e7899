"""Channel-statistics augmentations.

``corr_augment`` draws fresh fading realizations with the frequency
correlation estimated from a single measured response. The PDP family works
in the delay domain: ``pdp1`` keeps bin magnitudes and randomizes phases,
``pdp2`` redraws every bin as Rayleigh with the measured bin power, ``pdp4``
does ``pdp2`` except for the strongest bin which keeps its magnitude, and
``pdp3`` uses the PDP averaged over a spatial cell and labels the result
with the cell center. ``noise_inject`` is the plain additive-noise baseline.

Every operator acts independently on each (AP, antenna) vector along the
last axis of the ``(n_ap, n_rx, M)`` tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CsiSample, Origin, as_generator, complex_normal, dft_forward, dft_inverse

DEFAULT_CELL_SPACING = 1.0
DEFAULT_SNR_LOS_DB = 20.0
DEFAULT_SNR_NLOS_DB = 15.0


class DegeneratePowerError(ValueError):
    pass


def default_delta_star(m: int) -> int:
    return max(1, m // 8)


# ---------------------------------------------------------------------------
# Frequency correlation


@dataclass(frozen=True)
class AcfEstimate:
    r: np.ndarray
    delta_star: int

    @property
    def r0(self) -> float:
        return float(self.r[0].real)


@dataclass(frozen=True)
class CovarianceEstimate:
    sigma: np.ndarray
    c_factor: np.ndarray
    recon_error: float
    r0: float


def _acf(H: np.ndarray, delta_star: int) -> np.ndarray:
    """Lag-averaged ``mean_i H[i] conj(H[i + d])`` for ``d <= delta_star``, zero beyond."""
    m = H.shape[-1]
    r = np.zeros(H.shape, dtype=np.complex128)
    for d in range(delta_star + 1):
        r[..., d] = np.mean(H[..., : m - d] * np.conj(H[..., d:]), axis=-1)
    r[..., 0] = r[..., 0].real
    return r


def estimate_acf(H, delta_star: int, pooled: bool = False) -> AcfEstimate:
    """Frequency-domain autocorrelation of one response vector.

    With ``pooled=True``, ``H`` may be ``(K, M)`` responses from one
    stationarity region; their per-vector estimates are averaged.
    """
    H = np.asarray(H, dtype=np.complex128)
    m = H.shape[-1]
    if not 1 <= delta_star <= m - 1:
        raise ValueError(f"delta_star must be in [1, {m - 1}], got {delta_star}")
    if H.ndim == 1:
        r = _acf(H, delta_star)
    elif pooled:
        r = _acf(H.reshape(-1, m), delta_star).mean(axis=0)
    else:
        raise ValueError("pass a single (M,) vector or set pooled=True")
    return AcfEstimate(r, int(delta_star))


def _toeplitz_from_acf(r: np.ndarray) -> np.ndarray:
    """Hermitian Toeplitz ``S[m, n] = r[n - m]`` for ``n >= m``, conjugate below.

    With ``r[d] = E[H_i conj(H_{i+d})]`` this is ``E[H_m conj(H_n)]``.
    Broadcasts over leading axes of ``r``.
    """
    m = r.shape[-1]
    lag = np.arange(m)[None, :] - np.arange(m)[:, None]
    upper = r[..., np.abs(lag)]
    return np.where(lag >= 0, upper, np.conj(upper))


def _sqrt_psd(sigma: np.ndarray, with_error: bool = True):
    """Hermitian square root with negative eigenvalues clamped to zero."""
    w, v = np.linalg.eigh(sigma)
    w = np.clip(w, 0.0, None)
    c = (v * np.sqrt(w)[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    if not with_error:
        return c, None
    cc = (v * w[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    num = np.linalg.norm(sigma - cc, axis=(-2, -1))
    den = np.linalg.norm(cc, axis=(-2, -1))
    err = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return c, err


def build_covariance(acf: AcfEstimate) -> CovarianceEstimate:
    r0 = acf.r0
    if not r0 > 0:
        raise DegeneratePowerError("zero-power response: R(0) must be positive")
    sigma = _toeplitz_from_acf(acf.r / r0)
    c, err = _sqrt_psd(sigma)
    return CovarianceEstimate(sigma, c, float(err), r0)


def _corr_factors(tensor: np.ndarray, delta_star: int, with_error: bool = True):
    """Batched square-root factors and powers for every (AP, antenna) vector."""
    r = _acf(tensor, delta_star)
    r0 = r[..., 0].real
    if np.any(r0 <= 0):
        raise DegeneratePowerError("an antenna vector has zero power; cannot build its covariance")
    sigma = _toeplitz_from_acf(r / r0[..., None])
    c, err = _sqrt_psd(sigma, with_error)
    return c, r0, err


def _corr_draw(c, r0, gen):
    x = complex_normal(gen, r0.shape + (c.shape[-1],), r0[..., None])
    return np.einsum("...mn,...n->...m", c, x)


def corr_augment(sample: CsiSample, delta_star: int | None = None, rng=None) -> CsiSample:
    m = sample.n_subcarriers
    ds = default_delta_star(m) if delta_star is None else int(delta_star)
    if not 1 <= ds <= m - 1:
        raise ValueError(f"delta_star must be in [1, {m - 1}], got {ds}")
    c, r0, _ = _corr_factors(sample.tensor, ds, with_error=False)
    return sample.replace(tensor=_corr_draw(c, r0, as_generator(rng)), origin=Origin.CORR)


# ---------------------------------------------------------------------------
# Delay-domain methods


def _random_phase(gen, shape):
    return np.exp(1j * gen.uniform(0.0, 2 * np.pi, shape))


def _pdp1_draw(h, gen):
    return dft_forward(np.abs(h) * _random_phase(gen, h.shape))


def _pdp2_draw(power, gen):
    return dft_forward(complex_normal(gen, power.shape, power))


def _pdp4_draw(h, gen):
    mag = np.abs(h)
    power = mag**2
    peak = np.argmax(mag, axis=-1)[..., None]
    new = complex_normal(gen, h.shape, power)
    rot = _random_phase(gen, peak.shape)
    np.put_along_axis(new, peak, np.take_along_axis(mag, peak, axis=-1) * rot, axis=-1)
    return dft_forward(new)


def pdp1(sample: CsiSample, rng=None) -> CsiSample:
    h = dft_inverse(sample.tensor)
    return sample.replace(tensor=_pdp1_draw(h, as_generator(rng)), origin=Origin.PDP1)


def pdp2(sample: CsiSample, rng=None) -> CsiSample:
    power = np.abs(dft_inverse(sample.tensor)) ** 2
    return sample.replace(tensor=_pdp2_draw(power, as_generator(rng)), origin=Origin.PDP2)


def pdp4(sample: CsiSample, rng=None) -> CsiSample:
    h = dft_inverse(sample.tensor)
    return sample.replace(tensor=_pdp4_draw(h, as_generator(rng)), origin=Origin.PDP4)


# ---------------------------------------------------------------------------
# Cell-averaged PDP


@dataclass(frozen=True)
class CellGrid:
    """Square cells of side ``spacing`` anchored at ``origin``.

    ``assignment[i]`` is the cell key of sample ``i``; ``cells`` maps each key
    to its center and member indices.
    """

    spacing: float
    origin: tuple
    assignment: tuple
    cells: dict

    @classmethod
    def build(cls, labels, spacing: float = DEFAULT_CELL_SPACING, origin=None) -> CellGrid:
        if not spacing > 0:
            raise ValueError("cell spacing must be > 0")
        labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
        if labels.shape[0] == 0:
            raise ValueError("cannot build cells for an empty dataset")
        o = labels.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
        ij = np.floor((labels - o) / spacing + 1e-12).astype(np.int64)
        keys = [tuple(int(v) for v in row) for row in ij]
        cells: dict = {}
        for idx, key in enumerate(keys):
            cells.setdefault(key, []).append(idx)
        cells = {
            k: ((o + (np.asarray(k) + 0.5) * spacing), np.asarray(v, dtype=np.int64))
            for k, v in cells.items()
        }
        return cls(float(spacing), (float(o[0]), float(o[1])), tuple(keys), cells)

    def center_of(self, i: int) -> np.ndarray:
        return self.cells[self.assignment[i]][0]

    def members_of(self, i: int) -> np.ndarray:
        return self.cells[self.assignment[i]][1]


def cell_power(csi: np.ndarray, grid: CellGrid) -> dict:
    """Mean delay-bin power over the members of each cell, ``(n_ap, n_rx, M)`` per key."""
    pdp = np.abs(dft_inverse(csi)) ** 2
    return {k: pdp[members].mean(axis=0) for k, (_, members) in grid.cells.items()}


def pdp3(dataset, grid: CellGrid | None = None, rng=None, factor: int = 1, spacing=DEFAULT_CELL_SPACING):
    """Augmented samples drawn from cell-averaged PDPs, labelled with cell centers.

    Returns only the ``factor * N`` new samples, ordered copy-major. Copy
    ``c`` of sample ``i`` uses ``rng.derive(i, c)`` when ``rng`` is an
    :class:`~csiaug.core.RngStream`.
    """
    from .augment import augment_dataset

    out = augment_dataset(dataset, "pdp3", factor, rng, cell_spacing=spacing, grid=grid)
    return out.subset(np.arange(len(dataset), len(out)))


# ---------------------------------------------------------------------------
# Noise baseline


def _noise_power(tensor: np.ndarray, snr_db: float) -> np.ndarray:
    if np.sum(np.abs(tensor) ** 2) == 0:
        raise DegeneratePowerError("noise injection needs a sample with nonzero energy")
    return np.mean(np.abs(tensor) ** 2, axis=-1) * 10.0 ** (-snr_db / 10.0)


def _noise_draw(tensor, power, gen):
    return tensor + complex_normal(gen, tensor.shape, power[..., None])


def noise_inject(sample: CsiSample, snr_db: float = DEFAULT_SNR_NLOS_DB, rng=None) -> CsiSample:
    """Add CN(0, P) per subcarrier, ``P`` = antenna mean power / SNR. ``snr_db=inf`` is a no-op."""
    power = _noise_power(sample.tensor, snr_db)
    if np.isinf(snr_db) and snr_db > 0:
        return sample.replace(origin=Origin.NOISE)
    return sample.replace(tensor=_noise_draw(sample.tensor, power, as_generator(rng)), origin=Origin.NOISE)
