from dataclasses import dataclass, asdict, field
from typing import Tuple
from numbers import Number
import json

import enforce_typing
import numpy as np
from dacite import from_dict, Config, DaciteError
from scipy.signal import get_window

from pydorf.exceptions import InvalidInputError

# Design notes: every stage of the pipeline has a handful of settings that
# are rarely changed but must be recorded exactly, because the cache keys and
# the reproducibility of a LOSO report depend on them. All settings classes
# are therefore frozen dataclasses with typed defaults, sharing one interface
# to go to and from dictionaries and JSON files. Cross-field constraints are
# checked in __post_init__ so that an invalid configuration can never be
# constructed.


class ParamClass:
    """Shared import and export methods of the settings classes

    Every settings class is a frozen :class:`~dataclasses.dataclass` whose
    fields all have defaults, so an instance can be built from a partial set
    of values. Nested settings are exported as nested dictionaries and
    restored as their own classes.
    """

    def to_dict(self) -> dict:
        """Returns the settings as a (nested) dictionary."""
        return asdict(self)

    def to_json(self, filename):
        """Writes the settings to a JSON file.

        Args:
            filename: Path of the file to write.
        """
        with open(filename, 'w') as outfile:
            json.dump(asdict(self), outfile, indent=4)

    @classmethod
    def from_dict(cls, data: dict):
        """Builds settings from a dictionary, defaults filling missing keys.

        Args:
            data: Values keyed by field name. Unknown keys are rejected.

        Returns:
            An instance of the settings class.

        Raises:
            InvalidInputError: for unknown keys, wrong types or values that
                fail the field checks.
        """
        # JSON has no tuples, so lists are cast back to tuple fields
        try:
            return from_dict(cls, data, config=Config(cast=[tuple], strict=True))
        except (DaciteError, TypeError) as excep:
            raise InvalidInputError(f'Invalid {cls.__name__} settings: {excep}')

    @classmethod
    def from_json(cls, filename):
        """Builds settings from a JSON file written by :meth:`to_json`.

        Args:
            filename: Path of the JSON file.
        """
        with open(filename) as infile:
            return cls.from_dict(json.load(infile))


def _require(condition: bool, message: str):
    if not condition:
        raise InvalidInputError(message)


@enforce_typing.enforce_types
@dataclass(frozen=True)
class SanitizeParams(ParamClass):
    r"""Settings for CSI phase sanitization

    * `zero_magnitude_tol`: Subcarriers with magnitude at or below this value
      have an undefined phase, which is replaced by zero before fitting and
      flagged in the sanitization report (0.0, unitless).
    """

    zero_magnitude_tol: Number = 0.0

    def __post_init__(self):
        _require(self.zero_magnitude_tol >= 0,
                 'zero_magnitude_tol must be non-negative')


@enforce_typing.enforce_types
@dataclass(frozen=True)
class SpectrogramConfig(ParamClass):
    r"""Settings for the sliding-window Doppler estimator

    The traits are shown below with default value and units in brackets:

    * `window_len`: Analysis window length (128, samples).
    * `hop`: Step between successive windows (16, samples).
    * `window`: Taper name understood by :func:`scipy.signal.get_window`
      ('hann').
    * `zero_pad_factor`: FFT length as a multiple of the window length (4).
    * `dc_guard_hz`: Frequencies with :math:`|f|` below this value are
      excluded from the peak search (0.5, Hz).
    * `bin_policy`: Delay bin retention policy, 'top' (highest time-averaged
      AC power) or 'all'.
    * `bin_count`: Number of bins retained per antenna under the 'top'
      policy (20).
    * `min_peak_snr_db`: Windows whose periodogram peak is less than this many
      decibels above the periodogram median are flagged silent and assigned
      zero Doppler. The default of 0 dB disables the gate (0.0, dB).
    """

    window_len: int = 128
    hop: int = 16
    window: str = 'hann'
    zero_pad_factor: int = 4
    dc_guard_hz: Number = 0.5
    bin_policy: str = 'top'
    bin_count: int = 20
    min_peak_snr_db: Number = 0.0

    def __post_init__(self):
        _require(self.window_len >= 1, 'window_len must be at least 1')
        _require(1 <= self.hop <= self.window_len,
                 f'hop must be in [1, window_len={self.window_len}], got {self.hop}')
        _require(self.zero_pad_factor >= 1, 'zero_pad_factor must be at least 1')
        _require(self.dc_guard_hz >= 0, 'dc_guard_hz must be non-negative')
        _require(self.bin_policy in ('top', 'all'),
                 f"bin_policy must be 'top' or 'all', got {self.bin_policy!r}")
        _require(self.bin_count >= 1, 'bin_count must be at least 1')
        _require(self.min_peak_snr_db >= 0, 'min_peak_snr_db must be non-negative')

        try:
            get_window(self.window, 8)
        except ValueError as excep:
            raise InvalidInputError(f'Unknown window {self.window!r}: {excep}')

    @property
    def nfft(self) -> int:
        """The zero-padded FFT length."""
        return self.window_len * self.zero_pad_factor

    def n_windows(self, n_samples: int) -> int:
        """The number of complete analysis windows in a series of ``n_samples``.

        Examples:

            >>> SpectrogramConfig().n_windows(500)
            24
        """
        if n_samples < self.window_len:
            raise InvalidInputError(f'Series of {n_samples} samples is shorter than '
                                    f'one window of {self.window_len} samples')
        return (n_samples - self.window_len) // self.hop + 1


@enforce_typing.enforce_types
@dataclass(frozen=True)
class FactorizationConfig(ParamClass):
    r"""Settings for the alternating velocity and direction factorization

    * `lam`: Ridge weight on the velocity update (:math:`\lambda`, 0.1).
    * `gamma`: Ridge weight on the direction update (:math:`\gamma`, 0.01).
    * `epsilon`: Stopping threshold on the DTW loss (:math:`\epsilon`, 0.01).
    * `max_iters`: Maximum number of alternating iterations (100).
    * `seed`: Seed for the random direction initialisation (0).
    * `dtw_band`: Sakoe-Chiba band half-width in windows; -1 selects 10% of the
      number of windows, rounded up (-1).
    * `mode`: 'per_antenna' runs one factorization per antenna; 'joint'
      concatenates the bins of all antennas into one factorization.
    """

    lam: Number = 0.1
    gamma: Number = 0.01
    epsilon: Number = 0.01
    max_iters: int = 100
    seed: int = 0
    dtw_band: int = -1
    mode: str = 'per_antenna'

    def __post_init__(self):
        _require(self.lam >= 0, 'lam must be non-negative')
        _require(self.gamma >= 0, 'gamma must be non-negative')
        _require(self.epsilon > 0, 'epsilon must be positive')
        _require(self.max_iters >= 1, 'max_iters must be at least 1')
        _require(self.dtw_band >= -1, 'dtw_band must be -1 (automatic) or >= 0')
        _require(self.mode in ('per_antenna', 'joint'),
                 f"mode must be 'per_antenna' or 'joint', got {self.mode!r}")

    def band_for(self, n_windows: int) -> int:
        """Resolves the DTW band half-width for a series of ``n_windows``.

        Examples:

            >>> FactorizationConfig().band_for(24)
            3
            >>> FactorizationConfig(dtw_band=0).band_for(24)
            0
        """
        if self.dtw_band >= 0:
            return self.dtw_band
        return int(np.ceil(0.1 * n_windows))


@enforce_typing.enforce_types
@dataclass(frozen=True)
class KernelConfig(ParamClass):
    r"""Settings for the random convolutional kernel bank

    * `n_kernels`: Number of kernels, :math:`D` (1000).
    * `lengths`: Candidate kernel lengths ((7, 9, 11)).
    * `seed`: Seed from which the whole bank is regenerated (0).
    """

    n_kernels: int = 1000
    lengths: Tuple[int, ...] = (7, 9, 11)
    seed: int = 0

    def __post_init__(self):
        _require(self.n_kernels >= 1, 'n_kernels must be at least 1')
        _require(len(self.lengths) >= 1 and min(self.lengths) >= 2,
                 'lengths must contain values of at least 2')


@enforce_typing.enforce_types
@dataclass(frozen=True)
class TrainingConfig(ParamClass):
    r"""Settings for the shallow classification network and its training

    * `projection_dim`: Reduced feature dimension :math:`D'` (128).
    * `hidden_dim`: Hidden layer width (256).
    * `n_classes`: Number of activity classes (4).
    * `learning_rate`: AdamW step size (1e-4).
    * `weight_decay`: AdamW decoupled weight decay (0.01).
    * `betas`: AdamW moment decay rates ((0.9, 0.999)).
    * `adam_eps`: AdamW denominator offset (1e-8).
    * `batch_size`: Mini-batch size (64).
    * `label_smoothing`: Label smoothing :math:`\alpha` (0.1).
    * `max_epochs`: Maximum number of epochs (2500).
    * `patience`: Epochs without validation improvement before stopping (200).
    * `validation_fraction`: Stratified validation share of the training
      trials (0.2).
    * `seed`: Seed for initialisation, validation split and batch order (0).
    """

    projection_dim: int = 128
    hidden_dim: int = 256
    n_classes: int = 4
    learning_rate: Number = 1e-4
    weight_decay: Number = 0.01
    betas: Tuple[Number, ...] = (0.9, 0.999)
    adam_eps: Number = 1e-8
    batch_size: int = 64
    label_smoothing: Number = 0.1
    max_epochs: int = 2500
    patience: int = 200
    validation_fraction: Number = 0.2
    seed: int = 0

    def __post_init__(self):
        _require(self.projection_dim >= 1 and self.hidden_dim >= 1,
                 'layer widths must be at least 1')
        _require(self.n_classes >= 2, 'n_classes must be at least 2')
        _require(self.learning_rate > 0, 'learning_rate must be positive')
        _require(self.weight_decay >= 0, 'weight_decay must be non-negative')
        _require(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas),
                 'betas must be two values in [0, 1)')
        _require(self.batch_size >= 1, 'batch_size must be at least 1')
        _require(0 <= self.label_smoothing < 1, 'label_smoothing must be in [0, 1)')
        _require(self.max_epochs >= 1, 'max_epochs must be at least 1')
        _require(self.patience >= 1, 'patience must be at least 1')
        _require(0 < self.validation_fraction < 1,
                 'validation_fraction must be in (0, 1)')


@enforce_typing.enforce_types
@dataclass(frozen=True)
class SynthConfig(ParamClass):
    r"""Settings for synthetic dataset generation

    The defaults give six subjects, four gestures and twenty five-second
    trials per gesture, with 52 subcarriers on three antennas sampled at
    100 Hz on a 2.4 GHz carrier.

    * `n_subjects`: Number of synthetic subjects (6).
    * `trials_per_class`: Trials per subject and gesture (20).
    * `duration_s`: Trial duration (5.0, s).
    * `sample_rate_hz`: CSI sampling rate (100.0, Hz).
    * `carrier_hz`: Carrier frequency (2.4e9, Hz).
    * `subcarrier_spacing_hz`: Subcarrier spacing (312500.0, Hz).
    * `n_subcarriers`: Subcarriers per antenna (52).
    * `n_antennas`: Receive antennas (3).
    * `n_moving_paths`: Body-reflected paths per subject (8).
    * `n_static_paths`: Static reflections besides the line of sight (2).
    * `moving_gain`: Magnitude range of moving path gains ((0.3, 0.6)).
    * `noise_sigma`: Complex white noise standard deviation (0.01).
    * `amplitude_m`: Gesture displacement amplitude (0.15, m).
    * `amplitude_jitter`: Relative per-trial amplitude jitter (0.1).
    * `period_jitter`: Relative per-trial period jitter (0.05).
    * `orientation_jitter_rad`: Per-trial random tilt of the gesture (0.1, rad).
    * `seed`: Global seed for geometry and trials (0).
    """

    n_subjects: int = 6
    trials_per_class: int = 20
    duration_s: Number = 5.0
    sample_rate_hz: Number = 100.0
    carrier_hz: Number = 2.4e9
    subcarrier_spacing_hz: Number = 312500.0
    n_subcarriers: int = 52
    n_antennas: int = 3
    n_moving_paths: int = 8
    n_static_paths: int = 2
    moving_gain: Tuple[Number, ...] = (0.3, 0.6)
    noise_sigma: Number = 0.01
    amplitude_m: Number = 0.15
    amplitude_jitter: Number = 0.1
    period_jitter: Number = 0.05
    orientation_jitter_rad: Number = 0.1
    seed: int = 0

    def __post_init__(self):
        _require(self.n_subjects >= 1, 'n_subjects must be at least 1')
        _require(self.trials_per_class >= 1, 'trials_per_class must be at least 1')
        _require(self.duration_s > 0, f'duration_s must be positive, got {self.duration_s}')
        _require(self.sample_rate_hz > 0, 'sample_rate_hz must be positive')
        _require(self.carrier_hz > 0, 'carrier_hz must be positive')
        _require(self.subcarrier_spacing_hz > 0, 'subcarrier_spacing_hz must be positive')
        _require(self.n_subcarriers >= 2, 'n_subcarriers must be at least 2')
        _require(self.n_antennas >= 1, 'n_antennas must be at least 1')
        _require(1 <= self.n_moving_paths + self.n_static_paths < self.n_subcarriers,
                 'paths must fit into distinct delay bins')
        _require(len(self.moving_gain) == 2 and 0 < self.moving_gain[0] <= self.moving_gain[1],
                 'moving_gain must be an increasing positive pair')
        _require(self.noise_sigma >= 0, 'noise_sigma must be non-negative')
        _require(self.amplitude_m > 0, 'amplitude_m must be positive')
        _require(0 <= self.amplitude_jitter < 1 and 0 <= self.period_jitter < 1,
                 'jitters must be in [0, 1)')
        _require(self.orientation_jitter_rad >= 0, 'orientation_jitter_rad must be non-negative')


# Fields of PipelineConfig that feed each cached stage. The pipeline stages
# are sequential, so each stage key also depends on the upstream stage keys.
_STAGE_FIELDS = {
    'sanitize': ('sanitize',),
    'doppler': ('spectrogram',),
    'factorize': ('factorization', 'antenna'),
    'dorf': ('grid_m',),
}

STAGES = tuple(_STAGE_FIELDS)

CONFIG_VERSION = 1


@enforce_typing.enforce_types
@dataclass(frozen=True)
class PipelineConfig(ParamClass):
    r"""Settings for a complete pipeline run

    A single global seed drives every random choice of a run: see
    :meth:`stage_seeds`.

    * `version`: Configuration format version (1).
    * `dataset_dir`: Directory of canonical trial files.
    * `output_dir`: Directory receiving cached intermediates and reports.
    * `seed`: Global seed (0).
    * `grid_m`: Number of latitude rows :math:`M` of the direction grid (8).
    * `antenna`: Restrict processing to one antenna index, -1 for all (-1).
    * `representation`: 'dorf' classifies the merged DoRF; 'doppler'
      classifies the raw Doppler projections.
    * `workers`: Size of the trial-level worker pool (1).
    * `parallel_folds`: Run LOSO folds in parallel (False).
    * `sanitize`, `spectrogram`, `factorization`, `kernels`, `training`:
      nested stage settings.
    """

    version: int = CONFIG_VERSION
    dataset_dir: str = ''
    output_dir: str = 'dorf_output'
    seed: int = 0
    grid_m: int = 8
    antenna: int = -1
    representation: str = 'dorf'
    workers: int = 1
    parallel_folds: bool = False
    sanitize: SanitizeParams = field(default_factory=SanitizeParams)
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    factorization: FactorizationConfig = field(default_factory=FactorizationConfig)
    kernels: KernelConfig = field(default_factory=KernelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        _require(self.version == CONFIG_VERSION,
                 f'Unsupported configuration version {self.version}, '
                 f'expected {CONFIG_VERSION}')
        _require(self.grid_m >= 1, 'grid_m must be at least 1')
        _require(self.antenna >= -1, 'antenna must be -1 (all) or an antenna index')
        _require(self.representation in ('dorf', 'doppler'),
                 f"representation must be 'dorf' or 'doppler', got {self.representation!r}")
        _require(self.workers >= 1, 'workers must be at least 1')

    def stage_seeds(self) -> dict:
        """Derives the seeds of all random stages from the global seed.

        The training seed in turn drives network initialisation, the
        validation split and the batch order.

        Returns:
            A dictionary with keys 'factorization', 'kernels' and 'training'.

        Examples:

            >>> PipelineConfig(seed=3).stage_seeds() == PipelineConfig(seed=3).stage_seeds()
            True
        """
        names = ('factorization', 'kernels', 'training')
        children = np.random.SeedSequence(self.seed).spawn(len(names))

        return {name: int(child.generate_state(1)[0])
                for name, child in zip(names, children)}

    def seeded(self) -> 'PipelineConfig':
        """Returns a copy in which the stage settings carry the derived seeds."""

        seeds = self.stage_seeds()
        data = self.to_dict()
        data['factorization']['seed'] = seeds['factorization']
        data['kernels']['seed'] = seeds['kernels']
        data['training']['seed'] = seeds['training']

        return PipelineConfig.from_dict(data)

    def stage_hash(self, stage: str) -> str:
        """Returns a digest of every setting that can change a stage's output.

        Args:
            stage: One of 'sanitize', 'doppler', 'factorize' or 'dorf'.

        Returns:
            A hex digest string.
        """
        # Imported here to keep param_classes free of module level cycles
        from pydorf.utilities import digest

        if stage not in _STAGE_FIELDS:
            raise InvalidInputError(f'Unknown stage {stage!r}, expected one of {STAGES}')

        data = self.seeded().to_dict()
        parts = []
        for name in STAGES[:STAGES.index(stage) + 1]:
            parts.append({name: {key: data[key] for key in _STAGE_FIELDS[name]}})

        return digest(*parts)
