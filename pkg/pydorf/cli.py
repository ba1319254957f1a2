"""The :mod:`~pydorf.cli` module runs the DoRF pipeline from the command line.

The ``pydorf`` command has six subcommands:

* ``config`` writes a pipeline configuration file with the default settings,
  updated by any flags given.
* ``ingest`` converts CSI exported as CSV (or existing DORFCSI1 files) into
  the canonical trial files of a dataset directory.
* ``synth`` writes a synthetic dataset, one random channel per subject.
* ``pipeline`` runs sanitization, Doppler extraction, factorization and DoRF
  projection for every trial, caching every intermediate.
* ``loso`` runs the pipeline and then leave-one-subject-out evaluation.
* ``report`` renders figures for a processed trial and a LOSO run.

Intermediates are cached under ``<output>/cache/<stage>/<trial>-<key>.<ext>``,
where the key digests the raw trial file together with every setting that
can change the stage output. A rerun with unchanged settings only reads the
final artifacts back.

Exit codes are 0 on success, 1 for usage errors, 2 for invalid inputs and
unreadable data and 3 for numerical failures.
"""

import argparse
import json
import logging
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import tabulate

from pydorf import ACTIVITIES
from pydorf.classifier import build_kernel_bank, evaluate, extract_features, pool_features, predict, train
from pydorf.containers import (CSI_MAGIC, load_csv_trial, read_doppler, read_dorfs, read_factors,
                               read_trial, read_trial_header, save_model, write_doppler,
                               write_doppler_csv, write_dorf_csv, write_dorfs, write_factors,
                               write_factors_csv, write_predictions_csv, write_trial)
from pydorf.csi_model import sanitize_trial
from pydorf.delay_doppler import concatenate_doppler, radial_velocity_matrix
from pydorf.dorf import doppler_projection_set, merge_dorfs, project_dorf, sphere_grid
from pydorf.exceptions import DataFormatError, DorfError, InvalidInputError, StageError
from pydorf.param_classes import PipelineConfig, SpectrogramConfig, SynthConfig, TrainingConfig
from pydorf.plotting import plot_confusion, plot_doppler_traces, plot_dorf_traces, plot_sphere_grid
from pydorf.synth_oracle import synth_dataset
from pydorf.utilities import digest, file_digest
from pydorf.velocity_factorization import FitReport, VelocityTrack, factorize
from pydorf.version import __version__

LOGGER = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRIAL_SUFFIX = '.csi'
CACHE_SUFFIXES = {'sanitize': '.csi', 'doppler': '.vr', 'factorize': '.vf', 'dorf': '.pf'}
MANIFEST_VERSION = 1
REPORT_VERSION = 1

# Settings that only change where and how fast a run happens
_RUNTIME_FIELDS = ('dataset_dir', 'output_dir', 'workers', 'parallel_folds')


def config_hash(config: PipelineConfig) -> str:
    """Digest of every setting that can change the results of a run."""

    data = config.seeded().to_dict()
    for name in _RUNTIME_FIELDS:
        data.pop(name)

    return digest(data)


def class_names(n_classes: int) -> List[str]:
    if n_classes == len(ACTIVITIES):
        return list(ACTIVITIES)
    return [f'class{idx}' for idx in range(n_classes)]


# Dataset handling


def discover_trials(dataset_dir: PathLike) -> List[Path]:
    """The canonical trial files of a dataset directory, sorted by trial id."""

    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise InvalidInputError(f'Dataset directory {dataset_dir} does not exist')

    paths = sorted(dataset_dir.glob(f'*{TRIAL_SUFFIX}'))
    if not paths:
        raise InvalidInputError(f'No trial files (*{TRIAL_SUFFIX}) in {dataset_dir}')

    return paths


def trial_inventory(paths: Sequence[PathLike], n_classes: int = len(ACTIVITIES)) -> str:
    """Counts trials per subject and class as a text table."""

    counts = Counter()
    for path in paths:
        header = read_trial_header(path)
        counts[(header['subject'], header['label'])] += 1

    subjects = sorted({subject for subject, _ in counts})
    labels = sorted(set(range(n_classes)) | {label for _, label in counts})
    names = class_names(n_classes)
    headers = ['subject'] + [names[lab] if lab < len(names) else f'label{lab}' for lab in labels]
    rows = [[subject] + [counts[(subject, lab)] for lab in labels] for subject in subjects]
    rows.append(['total'] + [sum(counts[(subject, lab)] for subject in subjects)
                             for lab in labels])

    return tabulate.tabulate(rows, headers=headers)


def _parse_label(label: Union[int, str]) -> int:
    if isinstance(label, str) and label in ACTIVITIES:
        return ACTIVITIES.index(label)
    try:
        return int(label)
    except ValueError:
        raise InvalidInputError(f'Unknown activity label {label!r}; use an integer '
                                f'or one of {", ".join(ACTIVITIES)}')


def cmd_ingest(inputs: Sequence[PathLike], output_dir: PathLike,
               n_subcarriers: Optional[int] = None, n_antennas: Optional[int] = None,
               sample_rate_hz: float = 100.0, carrier_hz: float = 2.4e9,
               subcarrier_spacing_hz: float = 312500.0, subject_id: int = 0,
               activity_label: Union[int, str] = 0) -> List[Path]:
    """Converts CSI files into canonical DORFCSI1 trial files

    CSV inputs are read with :func:`~pydorf.containers.load_csv_trial`, which
    needs the subcarrier and antenna counts. Inputs that are already DORFCSI1
    files are copied after checking their shape against any counts given.
    Each trial is written as ``<output_dir>/<input stem>.csi`` and the trial
    inventory of the output directory is printed.

    Returns:
        The paths written, in input order.
    """

    output_dir = Path(output_dir)
    label = _parse_label(activity_label)
    written = []

    for path in map(Path, inputs):
        with open(path, 'rb') as infile:
            is_binary = infile.read(len(CSI_MAGIC)) == CSI_MAGIC

        if is_binary:
            trial = read_trial(path)
            for name, given, found in (('subcarriers', n_subcarriers, trial.n_subcarriers),
                                       ('antennas', n_antennas, trial.n_antennas)):
                if given is not None and given != found:
                    raise InvalidInputError(f'{path}: {found} {name}, expected {given}')
        else:
            if n_subcarriers is None or n_antennas is None:
                raise InvalidInputError(f'{path}: CSV input needs the subcarrier and '
                                        f'antenna counts')
            trial = load_csv_trial(path, n_subcarriers, n_antennas, sample_rate_hz, carrier_hz,
                                   subcarrier_spacing_hz, subject_id=subject_id,
                                   activity_label=label)

        target = output_dir / f'{path.stem}{TRIAL_SUFFIX}'
        write_trial(target, trial)
        LOGGER.info('Ingested %s as %r', path, trial)
        written.append(target)

    print(trial_inventory(sorted(output_dir.glob(f'*{TRIAL_SUFFIX}'))))

    return written


def cmd_synth(cfg: SynthConfig, output_dir: PathLike) -> List[Path]:
    """Writes a synthetic dataset and a matching pipeline configuration

    Every subject gets its own random multipath geometry. Besides the trial
    files, ``pipeline.json`` is written to the output directory, holding a
    pipeline configuration whose bin count matches the number of moving
    paths and whose peak gate suppresses windows with no motion.

    Returns:
        The trial paths written.
    """

    output_dir = Path(output_dir)
    written = []

    for trial_id, trial in synth_dataset(cfg):
        target = output_dir / f'{trial_id}{TRIAL_SUFFIX}'
        write_trial(target, trial)
        written.append(target)

    LOGGER.info('Wrote %d synthetic trials to %s', len(written), output_dir)

    suggested = PipelineConfig(dataset_dir=str(output_dir), seed=cfg.seed,
                               spectrogram=SpectrogramConfig(bin_count=cfg.n_moving_paths,
                                                             min_peak_snr_db=12.0))
    suggested.to_json(output_dir / 'pipeline.json')
    print(trial_inventory(written))

    return written


# Cached per-trial stages


def _group_antenna(group: str) -> int:
    return -1 if group == 'joint' else int(group[1:])


class _TrialStages:
    """Lazily evaluated, cached stages of one trial

    Each stage method returns the stage output as read from the cache. A
    missing entry is first computed from the upstream stage and written, so
    cold and warm runs hand identical values downstream. Failures are
    re-raised as :class:`StageError`.
    """

    def __init__(self, trial_id: str, raw_path: Path, cache_dir: Path, config: PipelineConfig):
        self.trial_id = trial_id
        self.raw_path = raw_path
        self.cache_dir = cache_dir
        self.config = config
        self.header = read_trial_header(raw_path)
        self.raw_digest = file_digest(raw_path)
        self.executed: List[str] = []
        self.timing: Dict[str, float] = {}
        self._loaded = {}

    def key(self, stage: str) -> str:
        return digest(self.raw_digest, self.config.stage_hash(stage))[:16]

    def path(self, stage: str, group: str = '') -> Path:
        name = f'{self.trial_id}-{self.key(stage)}' + (f'-{group}' if group else '')
        return self.cache_dir / stage / (name + CACHE_SUFFIXES[stage])

    @property
    def groups(self) -> List[str]:
        """Factorization groups: one per processed antenna, or one joint group."""

        n_ant = int(self.header['n_antennas'])
        if self.config.antenna >= n_ant:
            raise InvalidInputError(f'Antenna {self.config.antenna} requested but the trial '
                                    f'has {n_ant} antennas')
        if self.config.factorization.mode == 'joint':
            return ['joint']
        antennas = [self.config.antenna] if self.config.antenna >= 0 else range(n_ant)
        return [f'a{ant}' for ant in antennas]

    def _run(self, stage: str, compute, read, write, paths: List[Path]):

        if stage in self._loaded:
            return self._loaded[stage]

        try:
            if not all(path.exists() for path in paths):
                start = time.perf_counter()
                write(compute())
                self.timing[stage] = time.perf_counter() - start
                self.executed.append(stage)
            # Downstream stages only ever see the stored precision
            value = read()
        except StageError:
            raise
        except DorfError as excep:
            raise StageError(self.trial_id, stage, excep)

        self._loaded[stage] = value
        return value

    def sanitized(self):
        path = self.path('sanitize')
        return self._run('sanitize',
                         compute=lambda: sanitize_trial(read_trial(self.raw_path),
                                                        self.config.sanitize),
                         read=lambda: read_trial(path),
                         write=lambda trial: write_trial(path, trial),
                         paths=[path])

    def doppler(self):
        path = self.path('doppler')
        return self._run('doppler',
                         compute=lambda: radial_velocity_matrix(self.sanitized(),
                                                                self.config.spectrogram),
                         read=lambda: read_doppler(path),
                         write=lambda dm: write_doppler(path, dm),
                         paths=[path])

    def _factorize(self):

        dm = self.doppler()
        results = []
        for group in self.groups:
            if group == 'joint':
                antennas = ([self.config.antenna] if self.config.antenna >= 0
                            else dm.antennas)
                part = concatenate_doppler([dm.for_antenna(ant) for ant in antennas])
            else:
                part = dm.for_antenna(int(group[1:]))
            v, r, report = factorize(part, self.config.factorization)
            LOGGER.debug('%s %s: %r', self.trial_id, group, report)
            results.append((v, r, report))

        return results

    def _write_factors(self, results):
        for group, (v, r, report) in zip(self.groups, results):
            path = self.path('factorize', group)
            write_factors(path, v, r)
            path.with_suffix('.fit.txt').write_text(report.to_text() + '\n')

    def _read_factors(self):
        results = []
        for group in self.groups:
            path = self.path('factorize', group)
            v, r = read_factors(path)
            fit_path = path.with_suffix('.fit.txt')
            try:
                report = FitReport.from_text(fit_path.read_text())
            except OSError as excep:
                raise DataFormatError(f'{fit_path}: cannot read fit report ({excep.strerror})')
            results.append((v, r, report))
        return results

    def factors(self):
        return self._run('factorize', compute=self._factorize, read=self._read_factors,
                         write=self._write_factors,
                         paths=[self.path('factorize', group) for group in self.groups])

    def _project(self):

        window_times = self.doppler().window_times
        grid = sphere_grid(self.config.grid_m)
        fields = []
        for antenna, (v, _, _) in zip(self.group_antennas, self.factors()):
            track = VelocityTrack(v.v, window_times)
            fields.append(project_dorf(track, grid, antenna_id=antenna))
        return fields

    def dorfs(self):
        path = self.path('dorf')
        return self._run('dorf', compute=self._project,
                         read=lambda: read_dorfs(path, sphere_grid(self.config.grid_m),
                                                 antenna_ids=self.group_antennas),
                         write=lambda fields: write_dorfs(path, fields),
                         paths=[path])

    @property
    def group_antennas(self) -> List[int]:
        """The antenna of each factorization group, -1 for the joint group."""
        return [_group_antenna(group) for group in self.groups]

    @property
    def final_stage(self) -> str:
        return 'dorf' if self.config.representation == 'dorf' else 'doppler'

    def projections(self):
        """The projection set classified for this trial."""

        if self.config.representation == 'dorf':
            return merge_dorfs(self.dorfs())

        dm = self.doppler()
        if self.config.antenna >= 0:
            dm = dm.for_antenna(self.config.antenna)
        return doppler_projection_set(dm)


def _process_trial(task) -> dict:
    """Runs the cached stages of one trial; the unit of work of the worker pool."""

    trial_id, raw_path, cache_dir, config_data = task
    config = PipelineConfig.from_dict(config_data)
    stages = _TrialStages(trial_id, Path(raw_path), Path(cache_dir), config)

    try:
        projections = stages.projections()
    except StageError:
        raise
    except DorfError as excep:
        raise StageError(trial_id, stages.final_stage, excep)

    return dict(trial_id=trial_id,
                subject=int(stages.header['subject']),
                label=int(stages.header['label']),
                doppler=str(stages.path('doppler')),
                artifact=str(stages.path(stages.final_stage)),
                factors=([str(stages.path('factorize', group)) for group in stages.groups]
                         if config.representation == 'dorf' else []),
                n_windows=projections.n_windows,
                n_channels=projections.n_channels,
                executed=stages.executed,
                timing=stages.timing)


def _map(function, tasks: list, workers: int) -> list:

    if workers > 1 and len(tasks) > 1:
        # torch thread pools do not survive a fork
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks)),
                                 mp_context=get_context('spawn')) as executor:
            return list(executor.map(function, tasks))

    return [function(task) for task in tasks]


def cmd_pipeline(config: PipelineConfig) -> dict:
    """Runs every pipeline stage for every trial of the dataset

    Trials are processed by a pool of ``config.workers`` processes and the
    results are ordered by trial id. A manifest indexing the trials and their
    final artifacts is written to ``<output>/manifest.json``.

    Returns:
        A dictionary with the per-trial results ('trials'), the number of
        times each stage was executed ('executed'), summed stage times
        ('timing') and the manifest path ('manifest').

    Raises:
        StageError: naming the trial and stage of the first failure.
    """

    output_dir = Path(config.output_dir)
    cache_dir = output_dir / 'cache'
    seeded = config.seeded().to_dict()

    tasks = [(path.stem, str(path), str(cache_dir), seeded)
             for path in discover_trials(config.dataset_dir)]

    LOGGER.info('Processing %d trials with %d worker(s)', len(tasks), config.workers)
    results = sorted(_map(_process_trial, tasks, config.workers),
                     key=lambda result: result['trial_id'])

    executed = Counter({stage: 0 for stage in CACHE_SUFFIXES})
    timing = Counter()
    for result in results:
        executed.update(result['executed'])
        timing.update(result['timing'])

    if sum(executed.values()):
        LOGGER.info('Stages executed: %s', ', '.join(f'{stage} x{count}'
                                                      for stage, count in executed.items()))
    else:
        LOGGER.info('All %d trials were cached; no stages executed', len(results))

    manifest = dict(version=MANIFEST_VERSION, representation=config.representation,
                    config_hash=config_hash(config),
                    trials=[{key: result[key] for key in
                             ('trial_id', 'subject', 'label', 'doppler', 'artifact',
                              'factors', 'n_windows', 'n_channels')}
                            for result in results])
    manifest_path = output_dir / 'manifest.json'
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, 'w') as outfile:
        json.dump(manifest, outfile, indent=2)

    return dict(trials=results, executed=dict(executed), timing=dict(timing),
                manifest=manifest_path)


# Leave one subject out evaluation


class LosoReport:
    r"""Results of a leave-one-subject-out evaluation

    The mean and the population standard deviation are computed from the
    per-subject accuracies on construction.

    Args:
        subjects: Held-out subject of each fold.
        accuracies: Accuracy on the held-out subject of each fold.
        n_test: Number of held-out trials of each fold.
        confusions: Confusion matrix of each fold, rows are true classes.
        class_names: Name of each class.
        config_hash: :func:`config_hash` of the run.
        representation: 'dorf' or 'doppler'.
        timing: Wall clock seconds per phase; excluded from
            :meth:`content_digest`.
    """

    def __init__(self, subjects: List[int], accuracies: List[float], n_test: List[int],
                 confusions: List[np.ndarray], class_names: List[str], config_hash: str,
                 representation: str = 'dorf', timing: Optional[Dict[str, float]] = None):

        if not (len(subjects) == len(accuracies) == len(n_test) == len(confusions)):
            raise InvalidInputError('LOSO report fields have different fold counts')
        if not subjects:
            raise InvalidInputError('LOSO report has no folds')

        self.subjects = [int(x) for x in subjects]
        self.accuracies = [float(x) for x in accuracies]
        self.n_test = [int(x) for x in n_test]
        self.confusions = [np.asarray(x, dtype=int) for x in confusions]
        self.class_names = list(class_names)
        self.config_hash = config_hash
        self.representation = representation
        self.timing = dict(timing or {})
        self.mean = float(np.mean(self.accuracies))
        self.std = float(np.std(self.accuracies))

    @property
    def total_confusion(self) -> np.ndarray:
        return np.sum(self.confusions, axis=0)

    def to_dict(self, timing: bool = True) -> dict:
        data = dict(version=REPORT_VERSION,
                    representation=self.representation,
                    config_hash=self.config_hash,
                    class_names=self.class_names,
                    subjects=self.subjects,
                    accuracies=self.accuracies,
                    n_test=self.n_test,
                    confusions=[conf.tolist() for conf in self.confusions],
                    mean=self.mean,
                    std=self.std)
        if timing:
            data['timing'] = self.timing
        return data

    def content_digest(self) -> str:
        """Digest of the report contents, timing excluded."""
        return digest(self.to_dict(timing=False))

    def to_json(self, path: PathLike):
        with open(path, 'w') as outfile:
            json.dump(self.to_dict(), outfile, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: PathLike) -> 'LosoReport':
        """Reads a report written by :meth:`to_json`.

        Raises:
            DataFormatError: for a malformed report or stored aggregates that
                do not match the per-subject accuracies.
        """

        try:
            with open(path) as infile:
                data = json.load(infile)
            report = cls(subjects=data['subjects'], accuracies=data['accuracies'],
                         n_test=data['n_test'], confusions=data['confusions'],
                         class_names=data['class_names'], config_hash=data['config_hash'],
                         representation=data['representation'], timing=data.get('timing'))
        except (KeyError, TypeError, ValueError) as excep:
            raise DataFormatError(f'{path}: malformed LOSO report ({excep})')

        if abs(report.mean - data['mean']) > 1e-12 or abs(report.std - data['std']) > 1e-12:
            raise DataFormatError(f'{path}: stored mean/std do not match the fold accuracies')

        return report

    def to_text(self) -> str:
        """The per-subject accuracies with their mean and standard deviation."""

        rows = [[f'subject {subject}', n_test, f'{100 * acc:.1f}']
                for subject, n_test, acc in zip(self.subjects, self.n_test, self.accuracies)]
        rows.append(['Mean', sum(self.n_test), f'{100 * self.mean:.1f}'])
        rows.append(['Standard Deviation', '', f'{100 * self.std:.1f}'])

        lines = [f'LOSO evaluation, representation {self.representation}, '
                 f'config {self.config_hash[:16]}',
                 tabulate.tabulate(rows, headers=['Held out', 'Trials', 'Accuracy (%)'])]
        if self.timing:
            lines.append('Timing (s): ' + ', '.join(f'{name} {secs:.1f}'
                                                     for name, secs in sorted(self.timing.items())))
        return '\n\n'.join(lines)

    def __repr__(self):
        return (f"LosoReport(folds={len(self.subjects)}, mean={self.mean:.4f}, "
                f"std={self.std:.4f})")


def fold_seed(training_seed: int, subject: int) -> int:
    """The training seed of the fold holding out ``subject``."""
    return int(np.random.SeedSequence([training_seed, subject]).generate_state(1)[0])


def _run_fold(task) -> dict:

    subject, x_train, y_train, x_test, y_test, training_cfg = task
    model = train(x_train, y_train, training_cfg)
    result = evaluate(model, x_test, y_test)
    result.update(subject=subject, model=model, probs=predict(model, x_test))

    return result


def cmd_loso(config: PipelineConfig) -> LosoReport:
    """Leave-one-subject-out evaluation of the pipeline

    The pipeline is run (or read back from the cache), every trial is turned
    into pooled kernel features with one kernel bank, and for each subject a
    classifier is trained on all other subjects and evaluated on that one.
    Folds run one after another unless ``config.parallel_folds`` is set; each
    fold has its own training seed, so both give the same results.

    Per fold, the model, the held-out predictions and a confusion matrix
    figure are written under ``<output>/loso/fold_s<subject>/``; the report
    is written as ``report.txt`` and ``report.json`` in ``<output>/loso``.

    Raises:
        InvalidInputError: with fewer than two subjects, or when a class is
            absent from the training subjects of a fold.
    """

    start = time.perf_counter()
    seeded = config.seeded()
    n_classes = seeded.training.n_classes
    names = class_names(n_classes)

    headers = [read_trial_header(path) for path in discover_trials(config.dataset_dir)]
    subjects = sorted({header['subject'] for header in headers})
    if len(subjects) < 2:
        raise InvalidInputError(f'LOSO requires ≥2 subjects, found {len(subjects)}')

    pipeline = cmd_pipeline(config)
    trials = pipeline['trials']
    timing = dict(pipeline=time.perf_counter() - start)

    mark = time.perf_counter()
    n_windows = min(trial['n_windows'] for trial in trials)
    kernels = seeded.kernels
    bank = build_kernel_bank(kernels.n_kernels, kernels.seed, n_windows, lengths=kernels.lengths)

    cache_dir = Path(config.output_dir) / 'cache'
    pooled = []
    for trial in trials:
        stages = _TrialStages(trial['trial_id'], Path(config.dataset_dir) /
                              f"{trial['trial_id']}{TRIAL_SUFFIX}", cache_dir, seeded)
        pooled.append(pool_features(extract_features(stages.projections(), bank)))
    pooled = np.stack(pooled)
    timing['features'] = time.perf_counter() - mark

    labels = np.array([trial['label'] for trial in trials])
    trial_subjects = np.array([trial['subject'] for trial in trials])
    trial_ids = [trial['trial_id'] for trial in trials]
    if np.any(labels >= n_classes):
        raise InvalidInputError(f'Trial labels exceed the {n_classes} configured classes')

    tasks = []
    for subject in subjects:
        test = trial_subjects == subject
        missing = sorted(set(range(n_classes)) - set(labels[~test].tolist()))
        if missing:
            raise InvalidInputError(f'LOSO fold holding out subject {subject}: class '
                                    f'{names[missing[0]]} is absent from the training subjects')
        training_cfg = TrainingConfig.from_dict(
            {**seeded.training.to_dict(), 'seed': fold_seed(seeded.training.seed, subject)})
        tasks.append((subject, pooled[~test], labels[~test], pooled[test], labels[test],
                      training_cfg))

    mark = time.perf_counter()
    workers = config.workers if config.parallel_folds else 1
    folds = _map(_run_fold, tasks, workers)
    timing['training'] = time.perf_counter() - mark

    loso_dir = Path(config.output_dir) / 'loso'
    for fold in folds:
        subject = fold['subject']
        fold_dir = loso_dir / f'fold_s{subject}'
        model = fold['model']
        model.kernel_bank = bank
        model.kernel_config = kernels
        save_model(fold_dir / 'model.npz', model)
        write_predictions_csv(fold_dir / 'predictions.csv',
                              [tid for tid, subj in zip(trial_ids, trial_subjects)
                               if subj == subject],
                              fold['probs'], class_names=names)
        plot_confusion(fold['confusion'], fold_dir / 'confusion.png',
                       title=f'Held-out subject {subject}', class_names=names)
        LOGGER.info('Fold holding out subject %s: accuracy %.3f (best epoch %d)',
                    subject, fold['accuracy'], model.best_epoch)

    timing['total'] = time.perf_counter() - start
    report = LosoReport(subjects=[fold['subject'] for fold in folds],
                        accuracies=[fold['accuracy'] for fold in folds],
                        n_test=[int(np.sum(trial_subjects == fold['subject'])) for fold in folds],
                        confusions=[fold['confusion'] for fold in folds],
                        class_names=names, config_hash=config_hash(config),
                        representation=config.representation, timing=timing)

    report.to_json(loso_dir / 'report.json')
    (loso_dir / 'report.txt').write_text(report.to_text() + '\n')
    plot_confusion(report.total_confusion, loso_dir / 'confusion.png',
                   title='All folds', class_names=names)
    print(report.to_text())

    return report


def cmd_report(config: PipelineConfig, trial_id: Optional[str] = None) -> List[Path]:
    """Renders figures and CSV tables for one processed trial and, if present, a LOSO run

    Figures are written to ``<output>/report``: the Doppler traces of the
    trial, projection traces of its DoRFs along four example directions, the
    direction grid and the confusion matrices of ``loso/report.json``. The
    trial's Doppler matrix, velocity tracks, directions and DoRFs are also
    exported as CSV files.

    Returns:
        The paths of the files written.
    """

    output_dir = Path(config.output_dir)
    manifest_path = output_dir / 'manifest.json'
    if not manifest_path.exists():
        raise InvalidInputError(f'{manifest_path} not found; run the pipeline first')

    with open(manifest_path) as infile:
        manifest = json.load(infile)
    entries = {entry['trial_id']: entry for entry in manifest['trials']}
    if not entries:
        raise InvalidInputError(f'{manifest_path} lists no trials')

    trial_id = trial_id or sorted(entries)[0]
    if trial_id not in entries:
        raise InvalidInputError(f'Trial {trial_id!r} is not in {manifest_path}')
    entry = entries[trial_id]

    report_dir = output_dir / 'report'
    grid = sphere_grid(config.grid_m)
    dm = read_doppler(entry['doppler'])
    written = [plot_doppler_traces(dm, report_dir / f'{trial_id}_doppler.png', title=trial_id),
               plot_sphere_grid(grid, report_dir / 'grid.png')]
    write_doppler_csv(report_dir / f'{trial_id}_doppler.csv', dm)
    written.append(report_dir / f'{trial_id}_doppler.csv')

    for factor_path in map(Path, entry.get('factors', [])):
        v, r = read_factors(factor_path)
        group = factor_path.stem.rsplit('-', 1)[-1]
        velocity_path = report_dir / f'{trial_id}_velocity_{group}.csv'
        direction_path = report_dir / f'{trial_id}_directions_{group}.csv'
        write_factors_csv(velocity_path, direction_path, v, r)
        written.extend([velocity_path, direction_path])

    if manifest['representation'] == 'dorf':
        groups = [Path(path).stem.rsplit('-', 1)[-1] for path in entry['factors']]
        fields = read_dorfs(entry['artifact'], grid,
                            antenna_ids=[_group_antenna(group) for group in groups])
        for group, field in zip(groups, fields):
            stem = f'{trial_id}_dorf_{group}'
            written.append(plot_dorf_traces(field, report_dir / f'{stem}.png'))
            write_dorf_csv(report_dir / f'{stem}.csv', field)
            written.append(report_dir / f'{stem}.csv')

    loso_path = output_dir / 'loso' / 'report.json'
    if loso_path.exists():
        report = LosoReport.from_json(loso_path)
        for subject, confusion in zip(report.subjects, report.confusions):
            written.append(plot_confusion(confusion, report_dir / f'confusion_s{subject}.png',
                                          title=f'Held-out subject {subject}',
                                          class_names=report.class_names))
        written.append(plot_confusion(report.total_confusion, report_dir / 'confusion.png',
                                      title='All folds', class_names=report.class_names))

    for path in written:
        LOGGER.info('Wrote %s', path)

    return written


# Argument handling


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: error: {message}\n')


def _bins(value: str):
    if value == 'all':
        return value
    try:
        count = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'all', got {value!r}")
    return count


def _add_pipeline_arguments(parser: argparse.ArgumentParser):

    parser.add_argument('--config', type=Path, help='pipeline configuration JSON file')
    parser.add_argument('--dataset', help='directory of canonical trial files')
    parser.add_argument('--output', help='directory for cached intermediates and reports')
    parser.add_argument('--seed', type=int, help='global seed')
    parser.add_argument('--grid-m', type=int, help='latitude rows of the direction grid')
    parser.add_argument('--window', type=int, help='Doppler window length in samples')
    parser.add_argument('--hop', type=int, help='Doppler window hop in samples')
    parser.add_argument('--bins', type=_bins, help="delay bins kept per antenna, or 'all'")
    parser.add_argument('--epsilon', type=float, help='factorization DTW stopping threshold')
    parser.add_argument('--max-iters', type=int, help='factorization iteration limit')
    parser.add_argument('--kernels', type=int, help='number of random convolution kernels')
    parser.add_argument('--epochs', type=int, help='maximum training epochs')
    parser.add_argument('--patience', type=int, help='early stopping patience in epochs')
    parser.add_argument('--antenna', type=int, help='process a single antenna only')
    parser.add_argument('--joint', action='store_true',
                        help='factorize the bins of all antennas together')
    parser.add_argument('--representation', choices=('dorf', 'doppler'),
                        help='classify DoRFs or the raw Doppler projections')
    parser.add_argument('--workers', type=int, help='size of the trial worker pool')
    parser.add_argument('--parallel-folds', action='store_true',
                        help='train LOSO folds in parallel')


# Flag name, then the path of the configuration field it sets
_OVERRIDES = (('dataset', ('dataset_dir',)),
              ('output', ('output_dir',)),
              ('seed', ('seed',)),
              ('grid_m', ('grid_m',)),
              ('window', ('spectrogram', 'window_len')),
              ('hop', ('spectrogram', 'hop')),
              ('epsilon', ('factorization', 'epsilon')),
              ('max_iters', ('factorization', 'max_iters')),
              ('kernels', ('kernels', 'n_kernels')),
              ('epochs', ('training', 'max_epochs')),
              ('patience', ('training', 'patience')),
              ('antenna', ('antenna',)),
              ('representation', ('representation',)),
              ('workers', ('workers',)))


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """The configuration file given by ``--config``, or the defaults, updated
    by the flags that were given."""

    config = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    data = config.to_dict()

    for flag, keys in _OVERRIDES:
        value = getattr(args, flag, None)
        if value is not None:
            target = data
            for key in keys[:-1]:
                target = target[key]
            target[keys[-1]] = value

    bins = getattr(args, 'bins', None)
    if bins == 'all':
        data['spectrogram']['bin_policy'] = 'all'
    elif bins is not None:
        data['spectrogram'].update(bin_policy='top', bin_count=bins)

    if getattr(args, 'joint', False):
        data['factorization']['mode'] = 'joint'
    if getattr(args, 'parallel_folds', False):
        data['parallel_folds'] = True

    return PipelineConfig.from_dict(data)


def _require_dataset(config: PipelineConfig) -> PipelineConfig:
    if not config.dataset_dir:
        raise InvalidInputError('No dataset directory: use --dataset or set dataset_dir')
    return config


def make_parser() -> argparse.ArgumentParser:

    parser = _Parser(prog='pydorf',
                     description='Doppler radiance fields for Wi-Fi activity recognition')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log debug messages')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings only')
    commands = parser.add_subparsers(dest='command', required=True)

    sub = commands.add_parser('config', help='write a pipeline configuration file')
    sub.add_argument('path', type=Path, help='JSON file to write')
    _add_pipeline_arguments(sub)

    sub = commands.add_parser('ingest', help='convert CSI files into trial files')
    sub.add_argument('inputs', nargs='+', type=Path, help='CSV or DORFCSI1 files')
    sub.add_argument('--output', required=True, type=Path, help='dataset directory')
    sub.add_argument('--subcarriers', type=int, help='subcarriers per antenna')
    sub.add_argument('--antennas', type=int, help='receive antennas')
    sub.add_argument('--rate', type=float, default=100.0, help='CSI sampling rate (Hz)')
    sub.add_argument('--carrier', type=float, default=2.4e9, help='carrier frequency (Hz)')
    sub.add_argument('--spacing', type=float, default=312500.0,
                     help='subcarrier spacing (Hz)')
    sub.add_argument('--subject', type=int, default=0, help='subject id')
    sub.add_argument('--label', default='0', help='activity name or integer label')

    sub = commands.add_parser('synth', help='write a synthetic dataset')
    sub.add_argument('--output', required=True, type=Path, help='dataset directory')
    sub.add_argument('--config', type=Path, help='synthetic dataset settings JSON file')
    sub.add_argument('--seed', type=int, help='dataset seed')
    sub.add_argument('--subjects', type=int, help='number of subjects')
    sub.add_argument('--trials', type=int, help='trials per subject and gesture')
    sub.add_argument('--duration', type=float, help='trial duration (s)')

    for name, text in (('pipeline', 'run the processing stages for every trial'),
                       ('loso', 'leave-one-subject-out evaluation'),
                       ('report', 'render figures for a processed dataset')):
        sub = commands.add_parser(name, help=text)
        _add_pipeline_arguments(sub)
        if name == 'report':
            sub.add_argument('--trial', help='trial id to plot, default the first')

    return parser


def _synth_config(args: argparse.Namespace) -> SynthConfig:

    data = SynthConfig.from_json(args.config).to_dict() if args.config else {}
    for flag, key in (('seed', 'seed'), ('subjects', 'n_subjects'),
                      ('trials', 'trials_per_class'), ('duration', 'duration_s')):
        value = getattr(args, flag)
        if value is not None:
            data[key] = value

    return SynthConfig.from_dict(data)


def _dispatch(args: argparse.Namespace):

    if args.command == 'config':
        build_config(args).to_json(args.path)
        LOGGER.info('Wrote %s', args.path)
    elif args.command == 'ingest':
        cmd_ingest(args.inputs, args.output, args.subcarriers, args.antennas, args.rate,
                   args.carrier, args.spacing, args.subject, args.label)
    elif args.command == 'synth':
        cmd_synth(_synth_config(args), args.output)
    elif args.command == 'pipeline':
        cmd_pipeline(_require_dataset(build_config(args)))
    elif args.command == 'loso':
        cmd_loso(_require_dataset(build_config(args)))
    elif args.command == 'report':
        cmd_report(build_config(args), args.trial)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``pydorf`` command; returns the exit code."""

    args = make_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.captureWarnings(True)

    try:
        _dispatch(args)
    except DorfError as excep:
        LOGGER.error('%s', excep)
        return excep.exit_code
    except OSError as excep:
        LOGGER.error('%s', excep)
        return 2

    return 0


if __name__ == '__main__':
    sys.exit(main())
