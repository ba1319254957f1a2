"""The :mod:`~pydorf.containers` module reads and writes the files exchanged
between pipeline stages.

All binary containers start with an eight byte ASCII magic string, followed
by a fixed little-endian header and ``float32`` payloads:

========  ==================================================  ===================
Magic     Header                                              Payload
========  ==================================================  ===================
DORFCSI1  u32 T, N_sub, A; f64 rate, carrier, spacing;        complex64 CSI
          u32 label, subject                                  (T, N_sub, A)
DORFVR01  u32 T', N; f64 lambda_m                             f32 V_r (T', N),
                                                              optional extension
DORFVF01  u32 T', N                                           f32 V (T', 3),
                                                              f32 R (N, 3)
DORFPF01  u32 T', M, antennas                                 f32 P (A, T', M, 2M)
========  ==================================================  ===================

The DORFVR01 extension block holds f64 window times (T'), i32 delay bins
(N), i32 antenna ids (N) and a u8 silent mask (T', N). Files without it are
accepted and get window times 0 .. T'-1.

Models are stored as ``numpy`` ``.npz`` archives. Plain CSV writers are
provided for inspection and plotting, and :func:`load_csv_trial` converts
CSI exported as text.
"""

import csv
import json
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.preprocessing import StandardScaler

from pydorf import ACTIVITIES
from pydorf.classifier import KernelBank, Model, ShallowNetwork, build_kernel_bank
from pydorf.csi_model import CsiTrial
from pydorf.delay_doppler import DopplerMatrix
from pydorf.dorf import DoRF, SphereGrid, sphere_grid
from pydorf.exceptions import DataFormatError, InvalidInputError
from pydorf.param_classes import KernelConfig, TrainingConfig
from pydorf.velocity_factorization import DirectionSet, VelocityTrack

PathLike = Union[str, Path]

CSI_MAGIC = b'DORFCSI1'
DOPPLER_MAGIC = b'DORFVR01'
FACTORS_MAGIC = b'DORFVF01'
DORF_MAGIC = b'DORFPF01'

MODEL_FORMAT_VERSION = 2

CSI_HEADER = np.dtype([('n_times', '<u4'), ('n_subcarriers', '<u4'), ('n_antennas', '<u4'),
                       ('sample_rate_hz', '<f8'), ('carrier_hz', '<f8'),
                       ('subcarrier_spacing_hz', '<f8'), ('label', '<u4'), ('subject', '<u4')])
DOPPLER_HEADER = np.dtype([('n_windows', '<u4'), ('n_bins', '<u4'), ('lambda_m', '<f8')])
FACTORS_HEADER = np.dtype([('n_windows', '<u4'), ('n_bins', '<u4')])
DORF_HEADER = np.dtype([('n_windows', '<u4'), ('m_rows', '<u4'), ('n_antennas', '<u4')])


class _Reader:
    """Sequential reader over the bytes of one container file."""

    def __init__(self, path: PathLike, magic: bytes):
        self.path = Path(path)
        try:
            self.data = self.path.read_bytes()
        except OSError as excep:
            raise DataFormatError(f'{self.path}: cannot read file ({excep.strerror})')

        found = self.data[:len(magic)]
        if found != magic:
            raise DataFormatError(f'{self.path}: bad magic {found!r}, expected {magic!r}')
        self.offset = len(magic)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def read(self, dtype, count: int = 1) -> np.ndarray:
        dtype = np.dtype(dtype)
        n_bytes = dtype.itemsize * count
        if n_bytes > self.remaining:
            raise DataFormatError(f'{self.path}: truncated, needed {n_bytes} bytes at offset '
                                  f'{self.offset} but {self.remaining} remain')
        values = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += n_bytes
        return values

    def finish(self):
        if self.remaining:
            raise DataFormatError(f'{self.path}: {self.remaining} unexpected trailing bytes')


def _write(path: PathLike, magic: bytes, header: np.ndarray, *payloads: np.ndarray):

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as outfile:
        outfile.write(magic)
        outfile.write(header.tobytes())
        for payload in payloads:
            outfile.write(np.ascontiguousarray(payload).tobytes())


def _as_u32(value, label: str) -> int:
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f'{label} must be an integer to be stored, got {value!r}')
    if not 0 <= value < 2 ** 32:
        raise InvalidInputError(f'{label} {value} does not fit in an unsigned 32 bit field')
    return value


# CSI trials


def write_trial(path: PathLike, trial: CsiTrial):
    """Writes a :class:`~pydorf.csi_model.CsiTrial` as a DORFCSI1 file."""

    header = np.array([(trial.n_times, trial.n_subcarriers, trial.n_antennas,
                        trial.sample_rate_hz, trial.carrier_hz, trial.subcarrier_spacing_hz,
                        _as_u32(trial.activity_label, 'activity label'),
                        _as_u32(trial.subject_id, 'subject id'))], dtype=CSI_HEADER)

    _write(path, CSI_MAGIC, header, trial.samples.astype('<c8'))


def read_trial(path: PathLike) -> CsiTrial:
    """Reads a DORFCSI1 file.

    Raises:
        DataFormatError: naming the file, for bad magic, a truncated payload
            or trailing bytes.
    """

    reader = _Reader(path, CSI_MAGIC)
    header = reader.read(CSI_HEADER)[0]
    shape = (int(header['n_times']), int(header['n_subcarriers']), int(header['n_antennas']))
    samples = reader.read('<c8', int(np.prod(shape))).reshape(shape)
    reader.finish()

    try:
        return CsiTrial(samples.astype(np.complex128), float(header['sample_rate_hz']),
                        float(header['carrier_hz']), float(header['subcarrier_spacing_hz']),
                        subject_id=int(header['subject']), activity_label=int(header['label']))
    except InvalidInputError as excep:
        raise DataFormatError(f'{reader.path}: {excep}')


def read_trial_header(path: PathLike) -> dict:
    """Reads only the DORFCSI1 header, as a dictionary."""

    reader = _Reader(path, CSI_MAGIC)
    header = reader.read(CSI_HEADER)[0]
    return {name: header[name].item() for name in CSI_HEADER.names}


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv_trial(path: PathLike, n_subcarriers: int, n_antennas: int,
                   sample_rate_hz: float, carrier_hz: float, subcarrier_spacing_hz: float,
                   subject_id: int = 0, activity_label: int = 0) -> CsiTrial:
    """Reads CSI exported as text

    Each row holds one time frame. Columns come in (real, imaginary) pairs,
    ordered antenna by antenna and, within an antenna, by subcarrier. A first
    line that is not numeric is taken as a header and skipped.

    Raises:
        DataFormatError: naming the file and 1-based line number for a
            non-numeric value, an odd column count or a row that does not
            match ``2 * n_subcarriers * n_antennas`` columns; or when the file
            has no data rows.
    """

    path = Path(path)
    expected = 2 * n_subcarriers * n_antennas
    rows = []

    try:
        infile = open(path, newline='')
    except OSError as excep:
        raise DataFormatError(f'{path}: cannot read file ({excep.strerror})')

    with infile:
        for line_no, row in enumerate(csv.reader(infile), start=1):
            cells = [cell.strip() for cell in row]
            if not cells or all(cell == '' for cell in cells):
                continue
            if line_no == 1 and not all(_is_number(cell) for cell in cells):
                continue
            if len(cells) % 2:
                raise DataFormatError(f'{path}, line {line_no}: odd column count {len(cells)}; '
                                      f'values must come in (re, im) pairs')
            if len(cells) != expected:
                raise DataFormatError(f'{path}, line {line_no}: {len(cells)} columns, expected '
                                      f'{expected} for {n_subcarriers} subcarriers x '
                                      f'{n_antennas} antennas')
            try:
                rows.append([float(cell) for cell in cells])
            except ValueError as excep:
                raise DataFormatError(f'{path}, line {line_no}: {excep}')

    if not rows:
        raise DataFormatError(f'{path}: no rows')

    values = np.asarray(rows).reshape(len(rows), n_antennas, n_subcarriers, 2)
    samples = (values[..., 0] + 1j * values[..., 1]).transpose(0, 2, 1)

    try:
        return CsiTrial(samples, sample_rate_hz, carrier_hz, subcarrier_spacing_hz,
                        subject_id=subject_id, activity_label=activity_label)
    except InvalidInputError as excep:
        raise DataFormatError(f'{path}: {excep}')


# Doppler matrices


def write_doppler(path: PathLike, dm: DopplerMatrix):
    """Writes a :class:`~pydorf.delay_doppler.DopplerMatrix` as DORFVR01 with
    its extension block."""

    header = np.array([(dm.n_windows, dm.n_bins, dm.lambda_m)], dtype=DOPPLER_HEADER)
    _write(path, DOPPLER_MAGIC, header, dm.v_r.astype('<f4'),
           dm.window_times.astype('<f8'), dm.bins.astype('<i4'),
           dm.antenna_ids.astype('<i4'), dm.silent.astype('u1'))


def read_doppler(path: PathLike) -> DopplerMatrix:
    """Reads a DORFVR01 file, with or without the extension block."""

    reader = _Reader(path, DOPPLER_MAGIC)
    header = reader.read(DOPPLER_HEADER)[0]
    n_windows, n_bins = int(header['n_windows']), int(header['n_bins'])
    v_r = reader.read('<f4', n_windows * n_bins).reshape(n_windows, n_bins).astype(float)

    window_times = bins = antenna_ids = silent = None
    if reader.remaining:
        window_times = reader.read('<f8', n_windows)
        bins = reader.read('<i4', n_bins)
        antenna_ids = reader.read('<i4', n_bins)
        silent = reader.read('u1', n_windows * n_bins).reshape(n_windows, n_bins).astype(bool)
    else:
        window_times = np.arange(n_windows, dtype=float)
    reader.finish()

    try:
        return DopplerMatrix(v_r, window_times, float(header['lambda_m']), bins=bins,
                             antenna_ids=antenna_ids, silent=silent)
    except InvalidInputError as excep:
        raise DataFormatError(f'{reader.path}: {excep}')


# Factorization results


def write_factors(path: PathLike, v: VelocityTrack, r: DirectionSet):
    """Writes a velocity track and direction set as DORFVF01."""

    header = np.array([(v.n_windows, r.n_directions)], dtype=FACTORS_HEADER)
    _write(path, FACTORS_MAGIC, header, v.v.astype('<f4'), r.r.astype('<f4'))


def read_factors(path: PathLike) -> Tuple[VelocityTrack, DirectionSet]:
    """Reads a DORFVF01 file.

    The directions are renormalised after the ``float32`` round trip.
    """

    reader = _Reader(path, FACTORS_MAGIC)
    header = reader.read(FACTORS_HEADER)[0]
    n_windows, n_bins = int(header['n_windows']), int(header['n_bins'])
    v = reader.read('<f4', n_windows * 3).reshape(n_windows, 3).astype(float)
    r = reader.read('<f4', n_bins * 3).reshape(n_bins, 3).astype(float)
    reader.finish()

    norms = np.linalg.norm(r, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataFormatError(f'{reader.path}: zero length direction')

    return VelocityTrack(v), DirectionSet(r / norms)


# DoRFs


def write_dorfs(path: PathLike, fields: Sequence[DoRF]):
    """Writes the per-antenna DoRFs of one trial as DORFPF01."""

    if not fields:
        raise InvalidInputError('No DoRFs to write')

    m_rows = fields[0].grid.m_rows
    if any(field.grid.m_rows != m_rows or field.n_windows != fields[0].n_windows
           for field in fields):
        raise InvalidInputError('DoRFs in one file must share grid and window count')

    header = np.array([(fields[0].n_windows, m_rows, len(fields))], dtype=DORF_HEADER)
    _write(path, DORF_MAGIC, header, np.stack([field.p for field in fields]).astype('<f4'))


def read_dorfs(path: PathLike, grid: Optional[SphereGrid] = None,
               antenna_ids: Optional[Sequence[int]] = None) -> List[DoRF]:
    """Reads a DORFPF01 file into one :class:`~pydorf.dorf.DoRF` per antenna.

    The file does not store antenna labels: fields are labelled with
    ``antenna_ids`` when given and numbered in file order otherwise.
    """

    reader = _Reader(path, DORF_MAGIC)
    header = reader.read(DORF_HEADER)[0]
    n_windows, m_rows, n_ant = (int(header['n_windows']), int(header['m_rows']),
                                int(header['n_antennas']))
    shape = (n_ant, n_windows, m_rows, 2 * m_rows)
    p = reader.read('<f4', int(np.prod(shape))).reshape(shape).astype(float)
    reader.finish()

    if m_rows < 1:
        raise DataFormatError(f'{reader.path}: grid with {m_rows} rows')
    grid = sphere_grid(m_rows) if grid is None or grid.m_rows != m_rows else grid

    if antenna_ids is None:
        antenna_ids = range(n_ant)
    elif len(antenna_ids) != n_ant:
        raise DataFormatError(f'{reader.path}: {n_ant} DoRFs but {len(antenna_ids)} '
                              f'antenna labels')

    return [DoRF(p[idx], grid, antenna_id=int(ant)) for idx, ant in enumerate(antenna_ids)]


# Models


def save_model(path: PathLike, model: Model):
    """Saves a :class:`~pydorf.classifier.Model` as an ``.npz`` archive.

    The kernel bank is stored together with its settings and seed; loading
    regenerates it from the seed and checks it against the stored arrays.
    """

    if model.kernel_bank is None or model.kernel_config is None:
        raise InvalidInputError('Only models with a kernel bank can be saved')

    bank = model.kernel_bank
    arrays = {f'net_{name}': value for name, value in model.network.to_arrays().items()}
    arrays.update(format_version=np.array(MODEL_FORMAT_VERSION),
                  kernel_config=np.array(json.dumps(model.kernel_config.to_dict())),
                  training_config=np.array(json.dumps(model.training_config.to_dict())),
                  bank_seed=np.array(bank.seed), bank_input_length=np.array(bank.input_length),
                  bank_weights=bank.weights, bank_lengths=bank.lengths,
                  bank_biases=bank.biases, bank_dilations=bank.dilations,
                  bank_paddings=bank.paddings,
                  scaler_mean=model.scaler.mean_, scaler_scale=model.scaler.scale_,
                  scaler_var=model.scaler.var_,
                  best_epoch=np.array(model.best_epoch),
                  history=np.asarray(model.history, dtype=float).reshape(-1, 2))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as outfile:
        np.savez(outfile, **arrays)


def load_model(path: PathLike) -> Model:
    """Loads a model written by :func:`save_model`.

    Raises:
        DataFormatError: for an unreadable archive, an unknown format version
            or a kernel bank that does not regenerate from its seed.
    """

    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            data = {key: archive[key] for key in archive.files}
    except (OSError, ValueError) as excep:
        raise DataFormatError(f'{path}: cannot read model archive ({excep})')

    try:
        version = int(data['format_version'])
        if version != MODEL_FORMAT_VERSION:
            raise DataFormatError(f'{path}: model format version {version}, '
                                  f'expected {MODEL_FORMAT_VERSION}')

        kernel_config = KernelConfig.from_dict(json.loads(str(data['kernel_config'])))
        training_config = TrainingConfig.from_dict(json.loads(str(data['training_config'])))
        network = ShallowNetwork.from_arrays({key[4:]: value for key, value in data.items()
                                              if key.startswith('net_')})

        stored = KernelBank(data['bank_weights'], data['bank_lengths'], data['bank_biases'],
                            data['bank_dilations'], data['bank_paddings'],
                            seed=int(data['bank_seed']),
                            input_length=int(data['bank_input_length']))
        scaler = StandardScaler()
        scaler.mean_ = data['scaler_mean']
        scaler.scale_ = data['scaler_scale']
        scaler.var_ = data['scaler_var']
        scaler.n_features_in_ = scaler.mean_.shape[0]
        history = [tuple(row) for row in data['history']]
        best_epoch = int(data['best_epoch'])
    except KeyError as excep:
        raise DataFormatError(f'{path}: missing model entry {excep}')
    except InvalidInputError as excep:
        raise DataFormatError(f'{path}: {excep}')

    bank = build_kernel_bank(kernel_config.n_kernels, stored.seed, stored.input_length,
                             lengths=kernel_config.lengths)
    if not bank.same_as(stored):
        raise DataFormatError(f'{path}: stored kernel bank does not match its seed')

    return Model(network, scaler, training_config, kernel_bank=bank,
                 kernel_config=kernel_config, history=history, best_epoch=best_epoch)


# CSV exports


def _write_csv(path: PathLike, header: List[str], rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as outfile:
        writer = csv.writer(outfile)
        writer.writerow(header)
        writer.writerows(rows)


def write_doppler_csv(path: PathLike, dm: DopplerMatrix):
    """One row per window: the window time then one column per delay bin."""

    header = ['time_s'] + [f'bin{b}_ant{a}' for b, a in zip(dm.bins, dm.antenna_ids)]
    _write_csv(path, header, ([repr(float(t))] + [repr(float(x)) for x in row]
                              for t, row in zip(dm.window_times, dm.v_r)))


def write_factors_csv(velocity_path: PathLike, direction_path: PathLike,
                      v: VelocityTrack, r: DirectionSet):
    """Writes the velocity track and the directions as two CSV files."""

    _write_csv(velocity_path, ['time_s', 'vx', 'vy', 'vz'],
               ([repr(float(t))] + [repr(float(x)) for x in row]
                for t, row in zip(v.times, v.v)))
    _write_csv(direction_path, ['column', 'rx', 'ry', 'rz', 'fallback'],
               ([idx] + [repr(float(x)) for x in row] + [int(flag)]
                for idx, (row, flag) in enumerate(zip(r.r, r.fallback_mask))))


def write_dorf_csv(path: PathLike, field: DoRF):
    """One row per window, one column per grid direction ``m<m>_n<n>``."""

    m_rows = field.grid.m_rows
    header = ['time_s'] + [f'm{m}_n{n}' for m in range(m_rows) for n in range(2 * m_rows)]
    _write_csv(path, header, ([repr(float(t))] + [repr(float(x)) for x in row]
                              for t, row in zip(field.times, field.flat())))


def write_predictions_csv(path: PathLike, trial_ids: Sequence[str], probs: np.ndarray,
                          class_names: Sequence[str] = ACTIVITIES):
    """One row per trial: id, one probability per class and the argmax class."""

    probs = np.atleast_2d(probs)
    header = ['trial_id'] + [f'p_{name}' for name in class_names] + ['predicted']
    _write_csv(path, header, ([trial_id] + [f'{p:.6f}' for p in row] +
                              [class_names[int(np.argmax(row))]]
                              for trial_id, row in zip(trial_ids, probs)))
