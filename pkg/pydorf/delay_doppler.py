"""The :mod:`~pydorf.delay_doppler` module decomposes CSI into per delay bin
time series and estimates, for each bin and each sliding window, the radial
velocity of the motion seen along that bin's propagation path.

The steps are:

1. An inverse DFT across subcarriers (:func:`delay_profile`) gives the channel
   response in each resolvable delay bin (:func:`delay_bin_times`).
2. Each bin's time series is cut into overlapping windows; the peak of a
   tapered, zero-padded periodogram of each mean-removed window gives the
   Doppler frequency :math:`f^\\star` (:func:`doppler_peak`).
3. The radial velocity is :math:`v_r = \\lambda f^\\star`
   (:func:`radial_velocity_matrix`).
"""

import warnings
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import get_window

from pydorf.bounds_checker import input_bounds_checker
from pydorf.csi_model import CsiTrial
from pydorf.exceptions import InvalidInputError
from pydorf.param_classes import SpectrogramConfig
from pydorf.utilities import check_finite, summarize_attrs


class DelayProfileSeries:
    r"""Channel response per delay bin over time

    Attributes:
        h: Complex array ``(T, N_bins, A)`` of delay profiles,
            :math:`h(s, \tau_i)`.
        tau: Delay bin centres :math:`\tau_i` in seconds.
    """

    def __init__(self, h: np.ndarray, tau: np.ndarray):
        if h.shape[1] != tau.shape[0]:
            raise InvalidInputError(f'{h.shape[1]} delay bins but {tau.shape[0]} delays')
        self.h = h
        self.tau = tau

    @property
    def n_bins(self) -> int:
        return self.h.shape[1]

    def ac_power(self) -> np.ndarray:
        """Time-averaged power of each mean-removed bin series, shape ``(N_bins, A)``."""
        centred = self.h - self.h.mean(axis=0, keepdims=True)
        return np.mean(np.abs(centred) ** 2, axis=0)

    def __repr__(self):
        return (f"DelayProfileSeries(T={self.h.shape[0]}, bins={self.n_bins}, "
                f"A={self.h.shape[2]})")


class DopplerMatrix:
    r"""Radial velocity projections per analysis window and delay bin

    This is the matrix :math:`V_r \in \mathbb{R}^{T' \times N}`. Columns from
    several antennas may be concatenated; ``bins`` and ``antenna_ids`` record
    the provenance of each column.

    Args:
        v_r: Radial velocities ``(T', N)`` in m/s.
        window_times: Window centre times in seconds, length ``T'``.
        lambda_m: Carrier wavelength in metres.
        bins: Delay bin index of each column (defaults to ``0..N-1``).
        antenna_ids: Antenna index of each column (defaults to zeros).
        silent: Boolean ``(T', N)`` mask of windows with no usable peak.
        sample_rate_hz: The CSI sampling rate; when given, the Nyquist bound
            :math:`|v_r| \le \lambda f_s / 2` is checked.
    """

    def __init__(self, v_r: np.ndarray, window_times: np.ndarray,
                 lambda_m: float,
                 bins: Optional[np.ndarray] = None,
                 antenna_ids: Optional[np.ndarray] = None,
                 silent: Optional[np.ndarray] = None,
                 sample_rate_hz: Optional[float] = None):

        v_r = np.asarray(v_r, dtype=float)
        if v_r.ndim != 2:
            raise InvalidInputError(f'Doppler matrix must be 2D, got shape {v_r.shape}')
        check_finite(v_r, 'Doppler matrix')

        window_times = np.asarray(window_times, dtype=float)
        if window_times.shape != (v_r.shape[0],):
            raise InvalidInputError(f'{window_times.shape[0]} window times for '
                                    f'{v_r.shape[0]} windows')

        input_bounds_checker(lambda_m, 0, np.inf, '()', label='wavelength (m)')

        n_cols = v_r.shape[1]
        self.v_r = v_r
        self.window_times = window_times
        self.lambda_m = float(lambda_m)
        self.bins = (np.arange(n_cols) if bins is None
                     else np.asarray(bins, dtype=int))
        self.antenna_ids = (np.zeros(n_cols, dtype=int) if antenna_ids is None
                            else np.asarray(antenna_ids, dtype=int))
        self.silent = (np.zeros(v_r.shape, dtype=bool) if silent is None
                       else np.asarray(silent, dtype=bool))

        if self.bins.shape != (n_cols,) or self.antenna_ids.shape != (n_cols,):
            raise InvalidInputError('Column provenance does not match the Doppler matrix')
        if self.silent.shape != v_r.shape:
            raise InvalidInputError('Silent mask does not match the Doppler matrix')

        if sample_rate_hz is not None:
            limit = self.lambda_m * sample_rate_hz / 2
            if np.any(np.abs(v_r) > limit * (1 + 1e-12)):
                raise InvalidInputError(f'Radial velocity exceeds the Nyquist bound '
                                        f'{limit:.4f} m/s')

    @property
    def n_windows(self) -> int:
        return self.v_r.shape[0]

    @property
    def n_bins(self) -> int:
        return self.v_r.shape[1]

    def for_antenna(self, antenna: int) -> 'DopplerMatrix':
        """Returns the sub-matrix of the columns from one antenna."""

        cols = self.antenna_ids == antenna
        if not np.any(cols):
            raise InvalidInputError(f'No columns for antenna {antenna}; available: '
                                    f'{sorted(set(self.antenna_ids.tolist()))}')

        return DopplerMatrix(self.v_r[:, cols], self.window_times, self.lambda_m,
                             bins=self.bins[cols], antenna_ids=self.antenna_ids[cols],
                             silent=self.silent[:, cols])

    @property
    def antennas(self) -> List[int]:
        return sorted(set(self.antenna_ids.tolist()))

    def __repr__(self):
        return (f"DopplerMatrix(windows={self.n_windows}, bins={self.n_bins}, "
                f"antennas={len(self.antennas)}, lambda={self.lambda_m:.5f} m)")

    def summarize(self, dp=3):
        """Prints a summary table of the radial velocities."""
        summarize_attrs(self, ['v_r', 'window_times'], dp=dp)


def concatenate_doppler(matrices: List[DopplerMatrix]) -> DopplerMatrix:
    """Concatenates Doppler matrices that share windowing along the bin axis."""

    if not matrices:
        raise InvalidInputError('No Doppler matrices to concatenate')

    first = matrices[0]
    for other in matrices[1:]:
        if other.n_windows != first.n_windows:
            raise InvalidInputError(f'Window counts differ: {first.n_windows} '
                                    f'vs {other.n_windows}')

    return DopplerMatrix(np.concatenate([m.v_r for m in matrices], axis=1),
                         first.window_times, first.lambda_m,
                         bins=np.concatenate([m.bins for m in matrices]),
                         antenna_ids=np.concatenate([m.antenna_ids for m in matrices]),
                         silent=np.concatenate([m.silent for m in matrices], axis=1))


def delay_bin_times(n_bins: int, delta_f: float) -> np.ndarray:
    r"""Centres of the resolvable delay bins

    .. math::

        \tau_i = \frac{i}{N \Delta f}, \quad i = 0, \dots, N - 1

    Args:
        n_bins: Number of bins :math:`N`.
        delta_f: Subcarrier spacing :math:`\Delta f` in Hz.

    Returns:
        The delays in seconds.

    Examples:

        >>> delay_bin_times(4, 1.0)
        array([0.  , 0.25, 0.5 , 0.75])
        >>> delay_bin_times(1, 312500.0)
        array([0.])
    """

    input_bounds_checker(n_bins, 1, np.inf, '[)', label='number of delay bins')
    input_bounds_checker(delta_f, 0, np.inf, '()', label='subcarrier spacing (Hz)')

    return np.arange(n_bins) / (n_bins * delta_f)


def delay_profile(trial: CsiTrial) -> DelayProfileSeries:
    r"""Inverse DFT of the CSI across subcarriers

    .. math::

        h(s, \tau_i) = \frac{1}{N} \sum_{n=0}^{N-1} H_n(s)
                        e^{j 2 \pi n \Delta f \tau_i}

    At the bin centres :math:`\tau_i` this is exactly the N-point inverse DFT,
    so a forward DFT of the output reproduces the input.

    Args:
        trial: A (sanitized) :class:`~pydorf.csi_model.CsiTrial`.

    Returns:
        A :class:`DelayProfileSeries` covering all antennas.
    """

    if trial.n_subcarriers < 2:
        raise InvalidInputError('Delay profile needs at least 2 subcarriers')

    h = np.fft.ifft(trial.samples, axis=1)
    tau = delay_bin_times(trial.n_subcarriers, trial.subcarrier_spacing_hz)

    return DelayProfileSeries(h, tau)


def doppler_spectrogram(bin_series: np.ndarray, cfg: SpectrogramConfig,
                        sample_rate: float) -> Tuple[np.ndarray, np.ndarray]:
    """Periodograms of the sliding windows of one delay bin series.

    Each window is mean-removed, tapered and zero padded to
    ``cfg.nfft`` points.

    Args:
        bin_series: Complex time series of one delay bin.
        cfg: A :class:`~pydorf.param_classes.SpectrogramConfig` instance.
        sample_rate: Sampling rate in Hz.

    Returns:
        A tuple of the signed frequency axis in ascending order (Hz) and the
        power array of shape ``(T', nfft)``.
    """

    bin_series = np.asarray(bin_series)
    n_windows = cfg.n_windows(bin_series.shape[0])

    starts = np.arange(n_windows) * cfg.hop
    index = starts[:, np.newaxis] + np.arange(cfg.window_len)[np.newaxis, :]
    frames = bin_series[index]
    frames = frames - frames.mean(axis=1, keepdims=True)

    taper = get_window(cfg.window, cfg.window_len, fftbins=True)
    spectrum = np.fft.fft(frames * taper, n=cfg.nfft, axis=1)
    power = np.fft.fftshift(np.abs(spectrum) ** 2, axes=1)
    freqs = np.fft.fftshift(np.fft.fftfreq(cfg.nfft, d=1.0 / sample_rate))

    return freqs, power


def _pick_peaks(freqs: np.ndarray, power: np.ndarray, frames_silent: np.ndarray,
                cfg: SpectrogramConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Guarded argmax per row with deterministic tie-breaking."""

    guard = np.abs(freqs) < cfg.dc_guard_hz
    power = np.where(guard[np.newaxis, :], -np.inf, power)

    # Order candidates so that a stable argmax prefers smaller |f| and then
    # positive f among exactly tied maxima
    order = np.lexsort((-freqs, np.abs(freqs)))
    ranked = power[:, order]
    best = order[np.argmax(ranked, axis=1)]

    peaks = freqs[best]
    silent = frames_silent | ~np.isfinite(ranked.max(axis=1))

    if cfg.min_peak_snr_db > 0:
        usable = np.where(guard[np.newaxis, :], np.nan, power)
        median = np.nanmedian(usable, axis=1)
        peak_power = ranked.max(axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio_db = 10 * np.log10(peak_power / median)
        silent |= ~(ratio_db >= cfg.min_peak_snr_db)

    peaks = np.where(silent, 0.0, peaks)

    return peaks, silent


def _silent_frames(bin_series: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Windows that are identically zero after mean removal."""

    n_windows = cfg.n_windows(bin_series.shape[0])
    starts = np.arange(n_windows) * cfg.hop
    index = starts[:, np.newaxis] + np.arange(cfg.window_len)[np.newaxis, :]
    frames = bin_series[index]
    centred = frames - frames.mean(axis=1, keepdims=True)

    # Relative tolerance: rounding in the mean leaves ~1e-16 of a constant
    scale = np.maximum(np.abs(frames).max(axis=1), np.finfo(float).tiny)
    return np.abs(centred).max(axis=1) <= 1e-12 * scale


def doppler_peak(bin_series: np.ndarray, cfg: SpectrogramConfig,
                 sample_rate: float) -> Tuple[float, bool]:
    r"""Signed Doppler peak frequency of one analysis window

    The first ``cfg.window_len`` samples of ``bin_series`` form the window.
    The window mean is removed, which suppresses the static part of the
    channel, and the peak of the periodogram over the full signed frequency
    axis is returned, excluding :math:`|f|` below ``cfg.dc_guard_hz``. Exact
    ties are broken toward smaller :math:`|f|` and then toward positive
    :math:`f`.

    Args:
        bin_series: Complex series of one delay bin, at least one window long.
        cfg: A :class:`~pydorf.param_classes.SpectrogramConfig` instance.
        sample_rate: Sampling rate in Hz.

    Returns:
        A tuple ``(f_star, silent)``. A window that is identically zero after
        mean removal returns ``(0.0, True)``.

    Examples:

        >>> t = np.arange(128) / 100.0
        >>> f_star, silent = doppler_peak(np.exp(2j * np.pi * 8 * t),
        ...                               SpectrogramConfig(), 100.0)
        >>> abs(f_star - 8.0) <= 100.0 / (128 * 4)
        True
        >>> doppler_peak(np.ones(128, dtype=complex), SpectrogramConfig(), 100.0)
        (0.0, True)
    """

    bin_series = np.asarray(bin_series)
    if bin_series.shape[0] < cfg.window_len:
        raise InvalidInputError(f'Window of {cfg.window_len} samples is longer than '
                                f'the {bin_series.shape[0]} sample series')
    check_finite(bin_series, 'bin series')

    window = bin_series[:cfg.window_len]
    freqs, power = doppler_spectrogram(window, cfg, sample_rate)
    frames_silent = _silent_frames(window, cfg)
    peaks, silent = _pick_peaks(freqs, power, frames_silent, cfg)

    return float(peaks[0]), bool(silent[0])


def select_bins(profile: DelayProfileSeries, cfg: SpectrogramConfig,
                antenna: int) -> np.ndarray:
    """Delay bins retained for one antenna under the configured policy.

    The 'top' policy keeps the ``cfg.bin_count`` bins with the highest
    time-averaged AC power (ties to the lower bin index); the 'all' policy
    keeps every bin. Retained bins are returned in ascending bin order.
    """

    if cfg.bin_policy == 'all':
        return np.arange(profile.n_bins)

    power = profile.ac_power()[:, antenna]
    order = np.lexsort((np.arange(profile.n_bins), -power))

    return np.sort(order[:min(cfg.bin_count, profile.n_bins)])


def radial_velocity_matrix(trial: CsiTrial,
                           cfg: SpectrogramConfig = SpectrogramConfig()
                           ) -> DopplerMatrix:
    r"""Radial velocity of each retained delay bin in each analysis window

    Each antenna is processed independently: the delay profile is formed, bins
    are retained under ``cfg.bin_policy`` and, for each retained bin and each
    window, :math:`v_r = \lambda f^\star`. Columns of all antennas are
    concatenated in antenna order; use :meth:`DopplerMatrix.for_antenna` to
    split them.

    Args:
        trial: A sanitized (or raw) :class:`~pydorf.csi_model.CsiTrial`.
        cfg: A :class:`~pydorf.param_classes.SpectrogramConfig` instance; the
            bin selection policy is ``cfg.bin_policy``/``cfg.bin_count``.

    Returns:
        A :class:`DopplerMatrix`.

    Raises:
        InvalidInputError: if the trial is shorter than one window.
    """

    if trial.n_times < cfg.window_len:
        raise InvalidInputError(f'Trial of {trial.n_times} frames is shorter than one '
                                f'window of {cfg.window_len} frames')

    profile = delay_profile(trial)
    n_windows = cfg.n_windows(trial.n_times)
    window_times = ((np.arange(n_windows) * cfg.hop + (cfg.window_len - 1) / 2) /
                    trial.sample_rate_hz)

    columns, silents, bins, antenna_ids = [], [], [], []

    for antenna in range(trial.n_antennas):
        retained = select_bins(profile, cfg, antenna)

        for bin_idx in retained:
            series = profile.h[:, bin_idx, antenna]
            freqs, power = doppler_spectrogram(series, cfg, trial.sample_rate_hz)
            peaks, silent = _pick_peaks(freqs, power, _silent_frames(series, cfg), cfg)
            columns.append(trial.wavelength_m * peaks)
            silents.append(silent)
            bins.append(bin_idx)
            antenna_ids.append(antenna)

    silent = np.stack(silents, axis=1)
    if np.all(silent):
        warnings.warn('Every window of every retained delay bin is silent',
                      category=RuntimeWarning)

    return DopplerMatrix(np.stack(columns, axis=1), window_times, trial.wavelength_m,
                         bins=np.array(bins), antenna_ids=np.array(antenna_ids),
                         silent=silent, sample_rate_hz=trial.sample_rate_hz)
