r"""The :mod:`~pydorf.synth_oracle` module generates ground truth for the rest
of the package: analytic gesture velocity tracks, Doppler projection matrices
with known directions, and complete multipath CSI trials.

The CSI of a trial is assembled from :math:`L` propagation paths,

.. math::

    H_n(t) = \sum_{l} \beta_l e^{j\psi_{l,a}} e^{-j 2 \pi f_n \tau_l(t)},
    \qquad
    \tau_l(t) = \tau_{l,0} - \frac{1}{c} \int_0^t v(u) \cdot m_l \, du

where :math:`f_n` are the subcarrier frequencies, :math:`\psi_{l,a}` is a
per-antenna phase offset and :math:`m_l` the unit arrival direction of the
path. A path with positive :math:`v \cdot m_l` therefore shows a positive
Doppler frequency :math:`f = v \cdot m_l / \lambda`, matching the sign
convention of :func:`~pydorf.delay_doppler.radial_velocity_matrix`. Static
paths receive no motion term.

Gesture velocities are canonical analytic forms: a circle in the horizontal
plane and sinusoidal strokes along one axis. Synthetic subjects differ in
their random multipath geometry.
"""

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from pydorf import ACTIVITIES
from pydorf.bounds_checker import input_bounds_checker
from pydorf.csi_model import SPEED_OF_LIGHT, CsiTrial
from pydorf.delay_doppler import DopplerMatrix
from pydorf.exceptions import InvalidInputError
from pydorf.param_classes import SynthConfig
from pydorf.utilities import random_unit_vectors, rotation_from_axis_angle
from pydorf.velocity_factorization import DirectionSet, VelocityTrack

# Default gesture periods (s)
GESTURE_PERIODS = {'circle': 2.0,
                   'left_right': 2.5,
                   'up_down': 3.2,
                   'push_pull': 1.6}

# Stroke axis of the linear gestures
_STROKE_AXES = {'left_right': np.array([1.0, 0.0, 0.0]),
                'up_down': np.array([0.0, 0.0, 1.0]),
                'push_pull': np.array([0.0, 1.0, 0.0])}


def gesture_period(kind: str) -> float:
    """The default period of a gesture in seconds.

    Examples:

        >>> gesture_period('circle')
        2.0
    """
    if kind not in GESTURE_PERIODS:
        raise InvalidInputError(f'Unknown gesture {kind!r}, expected one of {ACTIVITIES}')
    return GESTURE_PERIODS[kind]


@dataclass
class MotionSpec:
    """A gesture trajectory

    * `kind`: One of 'circle', 'left_right', 'up_down' and 'push_pull'.
    * `amplitude_m`: Displacement amplitude :math:`A` (m); the peak speed is
      :math:`A\\omega`.
    * `period_s`: Gesture period (s), :math:`\\omega = 2\\pi / \\mathrm{period}`.
    * `duration_s`: Trial duration (s).
    * `rate_hz`: Sampling rate of the velocity track (Hz).
    * `orientation`: Rotation matrix applied to the canonical trajectory.
    * `seed`: Seed for the noise of any CSI generated from this motion.
    """

    kind: str
    amplitude_m: float = 0.15
    period_s: float = 2.0
    duration_s: float = 5.0
    rate_hz: float = 100.0
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ACTIVITIES:
            raise InvalidInputError(f'Unknown gesture {self.kind!r}, expected one of {ACTIVITIES}')
        input_bounds_checker(self.amplitude_m, 0, np.inf, '()', label='amplitude (m)')
        input_bounds_checker(self.period_s, 0, np.inf, '()', label='period (s)')
        input_bounds_checker(self.duration_s, 0, np.inf, '()', label='duration (s)')
        input_bounds_checker(self.rate_hz, 0, np.inf, '()', label='rate (Hz)')

        self.orientation = np.asarray(self.orientation, dtype=float)
        if (self.orientation.shape != (3, 3) or
                not np.allclose(self.orientation @ self.orientation.T, np.eye(3), atol=1e-9)):
            raise InvalidInputError('orientation must be a 3 x 3 rotation matrix')

    @property
    def omega(self) -> float:
        return 2 * np.pi / self.period_s

    @property
    def n_samples(self) -> int:
        return max(1, int(round(self.duration_s * self.rate_hz)))


def gen_motion(spec: MotionSpec) -> VelocityTrack:
    r"""Analytic velocity track of a gesture

    With :math:`\omega = 2\pi / \mathrm{period}` and samples at
    :math:`t_k = k / \mathrm{rate}`:

    * circle: :math:`v(t) = A\omega(-\sin\omega t, \cos\omega t, 0)`
    * left_right, up_down, push_pull: :math:`v(t) = A\omega \sin(\omega t)`
      along x, z and y respectively.

    The canonical velocity is then rotated by ``spec.orientation``.

    Examples:

        >>> track = gen_motion(MotionSpec('circle', amplitude_m=1.0, period_s=1.0))
        >>> np.round(track.v[0] / (2 * np.pi), 12) + 0.0
        array([0., 1., 0.])
    """

    times = np.arange(spec.n_samples) / spec.rate_hz
    phase = spec.omega * times
    scale = spec.amplitude_m * spec.omega

    if spec.kind == 'circle':
        v = scale * np.column_stack([-np.sin(phase), np.cos(phase), np.zeros_like(phase)])
    else:
        v = scale * np.sin(phase)[:, np.newaxis] * _STROKE_AXES[spec.kind][np.newaxis, :]

    return VelocityTrack(v @ spec.orientation.T, times)


def gen_projections(v: VelocityTrack, n_dirs: int, noise_sigma: float = 0.0,
                    seed: int = 0, lambda_m: float = SPEED_OF_LIGHT / 2.4e9
                    ) -> Tuple[DopplerMatrix, DirectionSet]:
    r"""Doppler projections of a velocity track along random directions

    :math:`V_r = V R^\top + N` with directions drawn uniformly on the sphere
    and i.i.d. Gaussian noise of standard deviation ``noise_sigma``.

    Returns:
        The :class:`~pydorf.delay_doppler.DopplerMatrix` and the ground truth
        :class:`~pydorf.velocity_factorization.DirectionSet`.
    """

    input_bounds_checker(n_dirs, 1, np.inf, '[)', label='number of directions')
    input_bounds_checker(noise_sigma, 0, np.inf, '[)', label='noise sigma')

    rng = np.random.default_rng(seed)
    directions = DirectionSet(random_unit_vectors(n_dirs, rng))
    v_r = v.v @ directions.r.T
    if noise_sigma > 0:
        v_r = v_r + rng.normal(0.0, noise_sigma, v_r.shape)

    return DopplerMatrix(v_r, v.times, lambda_m), directions


@dataclass
class ChannelPath:
    """One propagation path

    * `gain`: Complex gain :math:`\\beta_l`.
    * `delay_s`: Static delay :math:`\\tau_{l,0}` (s).
    * `direction`: Unit arrival direction :math:`m_l` relative to the mover.
    * `static`: Static paths are not affected by the motion.
    * `antenna_phases`: Phase offset per antenna (radians); zeros if not given.
    """

    gain: complex
    delay_s: float
    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    static: bool = False
    antenna_phases: Optional[np.ndarray] = None

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)
        if self.direction.shape != (3,) or abs(np.linalg.norm(self.direction) - 1) > 1e-9:
            raise InvalidInputError('Path direction must be a unit 3-vector')
        if self.antenna_phases is not None:
            self.antenna_phases = np.asarray(self.antenna_phases, dtype=float)


@dataclass
class ChannelSpec:
    """A multipath channel

    * `paths`: The :class:`ChannelPath` list.
    * `carrier_hz`, `subcarrier_spacing_hz`, `n_subcarriers`, `n_antennas`:
      The OFDM layout.
    * `noise_sigma`: Standard deviation of the complex white noise.
    * `seed`: Seed of the noise.
    """

    paths: List[ChannelPath]
    carrier_hz: float = 2.4e9
    subcarrier_spacing_hz: float = 312500.0
    n_subcarriers: int = 52
    n_antennas: int = 1
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.paths:
            raise InvalidInputError('A channel needs at least one path')
        if self.n_subcarriers < 2 or self.n_antennas < 1:
            raise InvalidInputError('A channel needs at least 2 subcarriers and 1 antenna')

        max_delay = 1.0 / self.subcarrier_spacing_hz
        for idx, path in enumerate(self.paths):
            if not 0 <= path.delay_s < max_delay:
                raise InvalidInputError(f'Path {idx} delay {path.delay_s:g} s is outside the '
                                        f'unambiguous range [0, {max_delay:g}) s')
            if path.antenna_phases is not None and path.antenna_phases.shape != (self.n_antennas,):
                raise InvalidInputError(f'Path {idx} has {path.antenna_phases.shape[0]} '
                                        f'antenna phases for {self.n_antennas} antennas')

    def delay_bin(self, path_idx: int) -> int:
        """The delay profile bin nearest to the static delay of a path

        Subcarrier frequencies fall with the subcarrier index, so a delay of
        :math:`b` bin widths peaks in bin :math:`(N - b) \\mod N` of
        :func:`~pydorf.delay_doppler.delay_profile`.
        """
        n_bins = int(round(self.paths[path_idx].delay_s * self.n_subcarriers *
                           self.subcarrier_spacing_hz))
        return -n_bins % self.n_subcarriers


def gen_csi(v: VelocityTrack, chan: ChannelSpec, rate: float,
            subject_id: int = 0, activity_label: int = 0) -> CsiTrial:
    """Synthesises the CSI of a moving subject in a multipath channel

    The running displacement along each path is the cumulative trapezoid
    integral of :math:`v \\cdot m_l`, which is exact for piecewise linear
    velocity. Complex white noise has independent real and imaginary parts
    of standard deviation ``noise_sigma / sqrt(2)``.

    Args:
        v: The :class:`~pydorf.velocity_factorization.VelocityTrack`, sampled
            at ``rate``.
        chan: The :class:`ChannelSpec`.
        rate: The CSI sampling rate (Hz).
        subject_id: Subject identifier of the trial.
        activity_label: Activity label of the trial.

    Returns:
        A :class:`~pydorf.csi_model.CsiTrial` of shape ``(T, N_sub, A)``.
    """

    input_bounds_checker(rate, 0, np.inf, '()', label='rate (Hz)')

    n_idx = np.arange(chan.n_subcarriers)
    freqs = chan.carrier_hz - (n_idx - chan.n_subcarriers / 2) * chan.subcarrier_spacing_hz

    samples = np.zeros((v.n_windows, chan.n_subcarriers, chan.n_antennas), dtype=complex)

    for path in chan.paths:
        if path.static:
            delay = np.full(v.n_windows, path.delay_s)
        else:
            displacement = cumulative_trapezoid(v.v @ path.direction, dx=1.0 / rate, initial=0)
            delay = path.delay_s - displacement / SPEED_OF_LIGHT

        response = path.gain * np.exp(-2j * np.pi * freqs[np.newaxis, :] * delay[:, np.newaxis])
        phases = (np.zeros(chan.n_antennas) if path.antenna_phases is None
                  else path.antenna_phases)
        samples += response[:, :, np.newaxis] * np.exp(1j * phases)[np.newaxis, np.newaxis, :]

    if chan.noise_sigma > 0:
        rng = np.random.default_rng(chan.seed)
        samples += (chan.noise_sigma / np.sqrt(2)) * (rng.standard_normal(samples.shape) +
                                                      1j * rng.standard_normal(samples.shape))

    return CsiTrial(samples, rate, chan.carrier_hz, chan.subcarrier_spacing_hz,
                    subject_id=subject_id, activity_label=activity_label)


def random_channel(cfg: SynthConfig, seed: int) -> ChannelSpec:
    """Draws the multipath geometry of one synthetic subject

    The channel has a line of sight path of unit gain at delay zero, then
    ``cfg.n_static_paths`` static reflections and ``cfg.n_moving_paths``
    moving paths placed at distinct delay bin centres with uniformly random
    directions, gains and per-antenna phases.

    Args:
        cfg: A :class:`~pydorf.param_classes.SynthConfig` instance.
        seed: The subject's geometry seed.

    Returns:
        A :class:`ChannelSpec`.
    """

    rng = np.random.default_rng(seed)
    n_paths = cfg.n_static_paths + cfg.n_moving_paths
    bins = rng.choice(np.arange(1, cfg.n_subcarriers), size=n_paths, replace=False)
    bin_width = 1.0 / (cfg.n_subcarriers * cfg.subcarrier_spacing_hz)

    paths = [ChannelPath(gain=1.0 + 0j, delay_s=0.0, static=True,
                         antenna_phases=rng.uniform(0, 2 * np.pi, cfg.n_antennas))]
    directions = random_unit_vectors(n_paths, rng)

    for idx, bin_idx in enumerate(bins):
        static = idx < cfg.n_static_paths
        magnitude = rng.uniform(*cfg.moving_gain)
        paths.append(ChannelPath(gain=magnitude * np.exp(2j * np.pi * rng.uniform()),
                                 delay_s=float(bin_idx * bin_width),
                                 direction=directions[idx], static=static,
                                 antenna_phases=rng.uniform(0, 2 * np.pi, cfg.n_antennas)))

    return ChannelSpec(paths=paths, carrier_hz=cfg.carrier_hz,
                       subcarrier_spacing_hz=cfg.subcarrier_spacing_hz,
                       n_subcarriers=cfg.n_subcarriers, n_antennas=cfg.n_antennas,
                       noise_sigma=cfg.noise_sigma, seed=seed)


def apply_phase_impairment(trial: CsiTrial, slope: Union[float, np.ndarray],
                           intercept: Union[float, np.ndarray]) -> CsiTrial:
    """Adds a linear phase ramp across subcarriers to every frame

    This stands in for timing and sampling frequency offsets: frame ``t`` of
    every antenna is multiplied by ``exp(j (slope[t] n + intercept[t]))``.

    Args:
        trial: The clean trial.
        slope: Ramp slope in radians per subcarrier, scalar or one per frame.
        intercept: Ramp intercept in radians, scalar or one per frame.

    Returns:
        A new :class:`~pydorf.csi_model.CsiTrial`.
    """

    slope = np.broadcast_to(np.asarray(slope, dtype=float), (trial.n_times,))
    intercept = np.broadcast_to(np.asarray(intercept, dtype=float), (trial.n_times,))
    n_idx = np.arange(trial.n_subcarriers)

    ramp = np.exp(1j * (slope[:, np.newaxis] * n_idx[np.newaxis, :] + intercept[:, np.newaxis]))

    return CsiTrial(trial.samples * ramp[:, :, np.newaxis], **trial.metadata())


def synth_trial(cfg: SynthConfig, channel: ChannelSpec, kind: str,
                seed: int, subject_id: int = 0) -> Tuple[CsiTrial, MotionSpec]:
    """One synthetic trial of a gesture in a subject's channel

    The amplitude and period are jittered around ``cfg.amplitude_m`` and the
    default :func:`gesture_period`, and the gesture is tilted by a random
    rotation of angle drawn from a normal distribution with standard
    deviation ``cfg.orientation_jitter_rad``.
    """

    rng = np.random.default_rng(seed)
    amplitude = cfg.amplitude_m * (1 + cfg.amplitude_jitter * rng.uniform(-1, 1))
    period = gesture_period(kind) * (1 + cfg.period_jitter * rng.uniform(-1, 1))
    axis = random_unit_vectors(1, rng)[0]
    orientation = rotation_from_axis_angle(axis, rng.normal(0, cfg.orientation_jitter_rad))

    spec = MotionSpec(kind, amplitude_m=amplitude, period_s=period,
                      duration_s=cfg.duration_s, rate_hz=cfg.sample_rate_hz,
                      orientation=orientation, seed=int(rng.integers(2 ** 31)))

    noisy = ChannelSpec(paths=channel.paths, carrier_hz=channel.carrier_hz,
                        subcarrier_spacing_hz=channel.subcarrier_spacing_hz,
                        n_subcarriers=channel.n_subcarriers, n_antennas=channel.n_antennas,
                        noise_sigma=channel.noise_sigma, seed=spec.seed)

    trial = gen_csi(gen_motion(spec), noisy, cfg.sample_rate_hz, subject_id=subject_id,
                    activity_label=ACTIVITIES.index(kind))

    return trial, spec


def synth_dataset(cfg: SynthConfig) -> Iterator[Tuple[str, CsiTrial]]:
    """Yields ``(trial_id, trial)`` for a whole synthetic dataset

    Each subject receives its own :func:`random_channel`; all seeds derive
    from ``cfg.seed``. Trial ids have the form ``s<subject>_<gesture>_<k>``.
    """

    subject_seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)

    for subject, subject_seq in enumerate(subject_seqs):
        geometry_seq, trials_seq = subject_seq.spawn(2)
        channel = random_channel(cfg, int(geometry_seq.generate_state(1)[0]))
        trial_seeds = trials_seq.generate_state(len(ACTIVITIES) * cfg.trials_per_class)

        for k_idx, kind in enumerate(ACTIVITIES):
            for rep in range(cfg.trials_per_class):
                seed = int(trial_seeds[k_idx * cfg.trials_per_class + rep])
                trial, _ = synth_trial(cfg, channel, kind, seed, subject_id=subject)
                yield f's{subject}_{kind}_{rep:02d}', trial
