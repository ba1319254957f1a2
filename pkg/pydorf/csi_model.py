"""The :mod:`~pydorf.csi_model` module holds the data model for a single
gesture trial of channel state information and the phase sanitization step
that removes hardware phase artefacts before delay-Doppler processing.
"""

import warnings
from typing import Union

import numpy as np

from pydorf.bounds_checker import InputBoundsCheckerFactory
from pydorf.exceptions import InvalidInputError
from pydorf.param_classes import SanitizeParams
from pydorf.utilities import check_finite, summarize_attrs

# Speed of light (m/s), used to convert carrier frequency to wavelength
SPEED_OF_LIGHT = 299792458.0

_constrain_rate = InputBoundsCheckerFactory(0, interval_type='()',
                                            label='sample rate (Hz)')
_constrain_carrier = InputBoundsCheckerFactory(0, interval_type='()',
                                               label='carrier frequency (Hz)')
_constrain_spacing = InputBoundsCheckerFactory(0, interval_type='()',
                                               label='subcarrier spacing (Hz)')


class CsiTrial:
    r"""Complex channel state information for one gesture trial

    The CSI tensor :math:`H_n(s)` is held with axes ordered as time, subcarrier
    and antenna. The subcarrier frequencies are

    .. math::

        f_n = f_c - \left(n - \frac{N}{2}\right) \Delta f

    Args:
        samples: Complex array of shape ``(T, N_sub, A)``, unitless channel
            gain. A 2D ``(T, N_sub)`` array is treated as a single antenna.
        sample_rate_hz: CSI frame rate (Hz).
        carrier_hz: Carrier frequency :math:`f_c` (Hz).
        subcarrier_spacing_hz: Subcarrier spacing :math:`\Delta f` (Hz).
        subject_id: Opaque subject identifier.
        activity_label: Opaque activity identifier.

    Raises:
        InvalidInputError: for bad shapes, non-finite samples or non-positive
            metadata.

    Examples:

        >>> trial = CsiTrial(np.ones((500, 52, 3), dtype=complex), 100.0,
        ...                  2.4e9, 312500.0)
        >>> trial
        CsiTrial(T=500, N_sub=52, A=3, rate=100.0 Hz, fc=2.4 GHz, subject=0, label=0)
        >>> round(trial.wavelength_m, 5)
        0.12491
    """

    def __init__(self,
                 samples: np.ndarray,
                 sample_rate_hz: float,
                 carrier_hz: float,
                 subcarrier_spacing_hz: float,
                 subject_id: int = 0,
                 activity_label: int = 0):

        samples = np.asarray(samples)
        if samples.ndim == 2:
            samples = samples[:, :, np.newaxis]

        if samples.ndim != 3:
            raise InvalidInputError(f'CSI samples must have 3 axes (T, N_sub, A), '
                                    f'got shape {samples.shape}')

        n_times, n_sub, n_ant = samples.shape
        if n_times < 1 or n_sub < 2 or n_ant < 1:
            raise InvalidInputError(f'CSI shape {samples.shape} needs T >= 1, '
                                    f'N_sub >= 2 and A >= 1')

        check_finite(samples, 'CSI samples')

        self.samples = samples.astype(np.complex128, copy=False)
        self.sample_rate_hz = float(_constrain_rate(sample_rate_hz))
        self.carrier_hz = float(_constrain_carrier(carrier_hz))
        self.subcarrier_spacing_hz = float(_constrain_spacing(subcarrier_spacing_hz))
        self.subject_id = subject_id
        self.activity_label = activity_label

    @property
    def n_times(self) -> int:
        return self.samples.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.samples.shape[1]

    @property
    def n_antennas(self) -> int:
        return self.samples.shape[2]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.samples)

    @property
    def phase(self) -> np.ndarray:
        """Wrapped phase of the samples in radians."""
        return np.angle(self.samples)

    @property
    def duration_s(self) -> float:
        return self.n_times / self.sample_rate_hz

    @property
    def wavelength_m(self) -> float:
        """Carrier wavelength :math:`\\lambda = c / f_c` in metres."""
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def subcarrier_frequencies(self) -> np.ndarray:
        """The subcarrier frequencies :math:`f_n` in Hz."""
        n_idx = np.arange(self.n_subcarriers)
        return (self.carrier_hz -
                (n_idx - self.n_subcarriers / 2) * self.subcarrier_spacing_hz)

    def metadata(self) -> dict:
        """The metadata needed to rebuild a trial around new samples."""
        return dict(sample_rate_hz=self.sample_rate_hz,
                    carrier_hz=self.carrier_hz,
                    subcarrier_spacing_hz=self.subcarrier_spacing_hz,
                    subject_id=self.subject_id,
                    activity_label=self.activity_label)

    def __repr__(self):
        return (f"{type(self).__name__}("
                f"T={self.n_times}, "
                f"N_sub={self.n_subcarriers}, "
                f"A={self.n_antennas}, "
                f"rate={self.sample_rate_hz} Hz, "
                f"fc={self.carrier_hz / 1e9:g} GHz, "
                f"subject={self.subject_id}, "
                f"label={self.activity_label})")

    def summarize(self, dp=2):
        """Prints a summary of the CSI magnitude and phase.

        Args:
            dp: The number of decimal places used in rounding summary stats.
        """
        summarize_attrs(self, ['magnitude', 'phase'], dp=dp)


class SanitizationReport:
    """Per-frame line fits removed by :func:`sanitize_trial`

    Attributes:
        slope: Fitted phase slope per frame and antenna, shape ``(T, A)``,
            radians per subcarrier.
        intercept: Fitted phase at subcarrier zero, shape ``(T, A)``, radians.
        zero_mask: Subcarriers whose magnitude was zero and whose phase was
            replaced by zero before fitting, shape ``(T, N_sub, A)``.
    """

    def __init__(self, slope: np.ndarray, intercept: np.ndarray,
                 zero_mask: np.ndarray):
        self.slope = slope
        self.intercept = intercept
        self.zero_mask = zero_mask

    @property
    def n_zero(self) -> int:
        return int(np.count_nonzero(self.zero_mask))

    def __repr__(self):
        return (f"SanitizationReport(frames={self.slope.shape[0]}, "
                f"antennas={self.slope.shape[1]}, zero_subcarriers={self.n_zero})")


class SanitizedTrial(CsiTrial):
    """A trial whose phase has been detrended across subcarriers

    The magnitudes are stored exactly as they were in the source trial and
    the residual phase is stored separately, so that sanitization touches the
    phase only. The ``samples`` attribute is rebuilt from the two.

    Args:
        magnitude: Real array ``(T, N_sub, A)``.
        phase: Residual phase ``(T, N_sub, A)``, continuous across subcarriers.
        report: The :class:`SanitizationReport` of the fits removed.
        **metadata: As for :class:`CsiTrial`.
    """

    def __init__(self, magnitude: np.ndarray, phase: np.ndarray,
                 report: SanitizationReport, **metadata):

        super().__init__(magnitude * np.exp(1j * phase), **metadata)
        self._magnitude = magnitude
        self._phase = phase
        self.sanitization_report = report

    @property
    def magnitude(self) -> np.ndarray:
        return self._magnitude

    @property
    def phase(self) -> np.ndarray:
        """Residual phase in radians, continuous across subcarriers."""
        return self._phase


def unwrap_phase(phases: np.ndarray, axis: int = -1) -> np.ndarray:
    r"""Unwraps phases so that consecutive differences lie in :math:`(-\pi, \pi]`

    Each step between neighbours is shifted by the multiple of :math:`2\pi`
    that brings it into the half-open interval :math:`(-\pi, \pi]`, so a
    jump of exactly :math:`\pi` is kept and a jump of :math:`-\pi` becomes
    :math:`+\pi`. The first value is never changed. Where no shift is needed
    the input values are returned bit for bit.

    Args:
        phases: Wrapped phases in radians.
        axis: The axis along which to unwrap (the subcarrier axis).

    Returns:
        The unwrapped phases.

    Raises:
        InvalidInputError: if any input is non-finite.

    Examples:

        >>> unwrap_phase(np.array([0.0, 0.1, 0.2]))
        array([0. , 0.1, 0.2])
        >>> unwrap_phase(np.array([3.0, -3.0]))
        array([3.        , 3.28318531])
        >>> unwrap_phase(np.array([0.0, np.pi])) / np.pi
        array([0., 1.])
    """

    phases = np.asarray(phases, dtype=float)
    check_finite(phases, 'phases')

    steps = np.diff(phases, axis=axis)
    wrapped = np.pi - np.mod(np.pi - steps, 2 * np.pi)

    # Whole turns to add at each step, accumulated along the axis
    turns = np.round((wrapped - steps) / (2 * np.pi))
    shift_shape = list(phases.shape)
    shift_shape[axis] = 1
    turns = np.concatenate([np.zeros(shift_shape), np.cumsum(turns, axis=axis)],
                           axis=axis)

    if not np.any(turns):
        return phases.copy()

    return phases + 2 * np.pi * turns


def _fit_lines(phase: np.ndarray):
    """Least squares line over the subcarrier axis (axis 1) of a T x N x A array."""

    n_sub = phase.shape[1]
    n_idx = np.arange(n_sub, dtype=float)
    n_centred = n_idx - n_idx.mean()

    phase_mean = phase.mean(axis=1)
    slope = (np.einsum('n,tna->ta', n_centred, phase) /
             np.dot(n_centred, n_centred))
    intercept = phase_mean - slope * n_idx.mean()

    return slope, intercept


def sanitize_trial(trial: CsiTrial,
                   params: SanitizeParams = SanitizeParams()) -> SanitizedTrial:
    r"""Removes the linear phase trend across subcarriers from each frame

    For every time frame and antenna, the phase is unwrapped across
    subcarriers and the least squares line

    .. math::

        \hat\phi_n = a n + b

    is subtracted. The slope :math:`a` absorbs timing and sampling frequency
    offsets and the intercept :math:`b` absorbs the random common phase.
    Antennas are treated independently. Magnitudes are not modified.

    Subcarriers with zero magnitude (at or below
    ``params.zero_magnitude_tol``) have an undefined phase: it is replaced by
    zero before fitting and the subcarrier is flagged in the report.

    A :class:`SanitizedTrial` input already holds a continuous residual phase,
    so only the detrend is reapplied, which makes the operation idempotent.

    Args:
        trial: The trial to sanitize.
        params: A :class:`~pydorf.param_classes.SanitizeParams` instance.

    Returns:
        A :class:`SanitizedTrial`.

    Examples:

        >>> n_idx = np.arange(52)
        >>> frame = np.exp(1j * (0.3 * n_idx + 1.1))
        >>> trial = CsiTrial(np.tile(frame[None, :, None], (4, 1, 1)), 100.0,
        ...                  2.4e9, 312500.0)
        >>> clean = sanitize_trial(trial)
        >>> bool(np.allclose(clean.phase, 0.0))
        True
        >>> float(np.round(clean.sanitization_report.slope[0, 0], 10))
        0.3
        >>> float(np.round(clean.sanitization_report.intercept[0, 0], 10))
        1.1
    """

    if isinstance(trial, SanitizedTrial):
        magnitude = trial.magnitude
        phase = trial.phase
        zero_mask = trial.sanitization_report.zero_mask.copy()
    else:
        magnitude = np.abs(trial.samples)
        zero_mask = magnitude <= params.zero_magnitude_tol
        phase = np.where(zero_mask, 0.0, np.angle(trial.samples))
        phase = unwrap_phase(phase, axis=1)

    if np.any(zero_mask) and not isinstance(trial, SanitizedTrial):
        warnings.warn(f"{np.count_nonzero(zero_mask)} zero-magnitude subcarrier "
                      f"value(s) given zero phase before detrending",
                      category=RuntimeWarning)

    slope, intercept = _fit_lines(phase)
    n_idx = np.arange(trial.n_subcarriers, dtype=float)
    residual = phase - (slope[:, np.newaxis, :] * n_idx[np.newaxis, :, np.newaxis] +
                        intercept[:, np.newaxis, :])

    report = SanitizationReport(slope=slope, intercept=intercept, zero_mask=zero_mask)

    return SanitizedTrial(magnitude.copy(), residual, report, **trial.metadata())


def residual_slopes(trial: Union[CsiTrial, SanitizedTrial]) -> np.ndarray:
    """Fitted per-frame slopes of the unwrapped phase of a trial, shape (T, A).

    Used to confirm that a sanitized trial carries no remaining linear trend.
    """

    phase = trial.phase
    if not isinstance(trial, SanitizedTrial):
        phase = unwrap_phase(phase, axis=1)

    slope, _ = _fit_lines(phase)

    return slope
