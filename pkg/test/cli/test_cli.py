import csv
import json
import logging
import shutil
from pathlib import Path

import numpy as np
import pytest

from pydorf.cli import (LosoReport, _TrialStages, build_config, class_names, cmd_ingest,
                        cmd_loso, cmd_pipeline, cmd_report, cmd_synth, config_hash,
                        discover_trials, fold_seed, main, make_parser, trial_inventory)
from pydorf.containers import read_dorfs, read_trial, write_trial
from pydorf.csi_model import CsiTrial
from pydorf.exceptions import DataFormatError, InvalidInputError, NumericError, StageError
from pydorf.param_classes import PipelineConfig, SynthConfig

# A small dataset: three second trials on one antenna give 11 Doppler windows
SMALL_SYNTH = dict(n_subjects=3, trials_per_class=3, duration_s=3.0, n_subcarriers=16,
                   n_antennas=1, n_moving_paths=3, n_static_paths=1, seed=2)

FAST = dict(grid_m=2,
            factorization=dict(max_iters=10),
            kernels=dict(n_kernels=20),
            training=dict(projection_dim=8, hidden_dim=8, max_epochs=20, patience=5,
                          learning_rate=0.01))


@pytest.fixture(scope='module')
def dataset(tmp_path_factory):
    """A synthetic dataset and the pipeline settings written with it."""

    data_dir = tmp_path_factory.mktemp('synth')
    cmd_synth(SynthConfig(**SMALL_SYNTH), data_dir)

    return data_dir


def fast_config(dataset, output_dir, **updates) -> PipelineConfig:

    data = PipelineConfig.from_json(dataset / 'pipeline.json').to_dict()
    for key, value in {**FAST, **updates}.items():
        if isinstance(value, dict):
            data[key].update(value)
        else:
            data[key] = value
    data['output_dir'] = str(output_dir)

    return PipelineConfig.from_dict(data)


# ------------------------------------------
# Testing dataset handling
# ------------------------------------------


def test_synth_writes_dataset(dataset):

    paths = discover_trials(dataset)
    assert len(paths) == 36
    assert paths[0].name == 's0_circle_00.csi'

    suggested = PipelineConfig.from_json(dataset / 'pipeline.json')
    assert suggested.dataset_dir == str(dataset)
    assert suggested.spectrogram.bin_count == 3
    assert suggested.seed == 2

    table = trial_inventory(paths)
    assert 'total' in table
    assert 'push_pull' in table


@pytest.mark.parametrize(
    'ctrl',
    [dict(make=False, match='does not exist'),
     dict(make=True, match='No trial files')]
)
def test_discover_trials_errors(tmp_path, ctrl):

    target = tmp_path / 'data'
    if ctrl['make']:
        target.mkdir()

    with pytest.raises(InvalidInputError, match=ctrl['match']):
        discover_trials(target)


def test_class_names():

    assert class_names(4) == ['circle', 'left_right', 'up_down', 'push_pull']
    assert class_names(2) == ['class0', 'class1']


def test_ingest(tmp_path, capsys):

    csv_path = tmp_path / 'walk.csv'
    with open(csv_path, 'w', newline='') as outfile:
        csv.writer(outfile).writerows([[1, 0, 0, 1, 1, 1, 0, 0]] * 5)

    binary = tmp_path / 'other.dat'
    write_trial(binary, CsiTrial(np.ones((5, 4, 1)), 50.0, 2.4e9, 312500.0, subject_id=1))

    out_dir = tmp_path / 'dataset'
    written = cmd_ingest([csv_path, binary], out_dir, n_subcarriers=4, n_antennas=1,
                         sample_rate_hz=50.0, subject_id=2, activity_label='up_down')

    assert [path.name for path in written] == ['walk.csi', 'other.csi']
    trial = read_trial(written[0])
    assert trial.activity_label == 2 and trial.subject_id == 2
    assert trial.samples[0, 1, 0] == 1j
    assert 'total' in capsys.readouterr().out


@pytest.mark.parametrize(
    'ctrl',
    [dict(args=dict(n_subcarriers=8, n_antennas=1), match='4 subcarriers, expected 8'),
     dict(args=dict(n_subcarriers=4, n_antennas=1, activity_label='jump'),
          match='Unknown activity label')]
)
def test_ingest_errors(tmp_path, ctrl):

    binary = tmp_path / 'trial.csi'
    write_trial(binary, CsiTrial(np.ones((5, 4, 1)), 50.0, 2.4e9, 312500.0))

    with pytest.raises(InvalidInputError, match=ctrl['match']):
        cmd_ingest([binary], tmp_path / 'out', **ctrl['args'])


def test_ingest_csv_needs_shape(tmp_path):

    csv_path = tmp_path / 'walk.csv'
    csv_path.write_text('1,0\n')

    with pytest.raises(InvalidInputError, match='needs the subcarrier'):
        cmd_ingest([csv_path], tmp_path / 'out')


# ------------------------------------------
# Testing configuration handling
# ------------------------------------------


def test_config_hash():

    base = PipelineConfig(dataset_dir='a', output_dir='b')

    assert config_hash(base) == config_hash(PipelineConfig(dataset_dir='c', output_dir='d',
                                                           workers=4, parallel_folds=True))
    assert config_hash(base) != config_hash(PipelineConfig(dataset_dir='a', seed=1))
    assert config_hash(base) != config_hash(PipelineConfig(dataset_dir='a', grid_m=4))


@pytest.mark.parametrize(
    'ctrl',
    [dict(argv=['pipeline', '--bins', 'all'], out=('spectrogram', 'bin_policy'), value='all'),
     dict(argv=['pipeline', '--bins', '5'], out=('spectrogram', 'bin_count'), value=5),
     dict(argv=['pipeline', '--joint'], out=('factorization', 'mode'), value='joint'),
     dict(argv=['pipeline', '--window', '64', '--hop', '8'], out=('spectrogram', 'hop'),
          value=8),
     dict(argv=['loso', '--epochs', '7'], out=('training', 'max_epochs'), value=7),
     dict(argv=['loso', '--parallel-folds'], out=('parallel_folds',), value=True),
     dict(argv=['pipeline', '--grid-m', '4'], out=('grid_m',), value=4)]
)
def test_build_config(ctrl):

    config = build_config(make_parser().parse_args(ctrl['argv']))
    value = config
    for name in ctrl['out']:
        value = getattr(value, name)

    assert value == ctrl['value']


def test_build_config_from_file(tmp_path):

    path = tmp_path / 'pipeline.json'
    PipelineConfig(grid_m=3, seed=9).to_json(path)
    config = build_config(make_parser().parse_args(['pipeline', '--config', str(path),
                                                    '--seed', '4']))

    assert config.grid_m == 3
    assert config.seed == 4


# ------------------------------------------
# Testing the cached pipeline
# ------------------------------------------


def test_pipeline_cache(dataset, tmp_path):

    config = fast_config(dataset, tmp_path / 'run')
    first = cmd_pipeline(config)

    assert first['executed'] == dict(sanitize=36, doppler=36, factorize=36, dorf=36)
    assert len(first['trials']) == 36
    assert all(trial['n_windows'] == 11 for trial in first['trials'])
    assert all(trial['n_channels'] == 8 for trial in first['trials'])

    manifest = json.loads(first['manifest'].read_text())
    assert manifest['config_hash'] == config_hash(config)
    assert [entry['trial_id'] for entry in manifest['trials']] == \
        sorted(entry['trial_id'] for entry in manifest['trials'])

    second = cmd_pipeline(config)
    assert second['executed'] == dict(sanitize=0, doppler=0, factorize=0, dorf=0)

    # Only the stages downstream of a changed setting run again
    regrid = cmd_pipeline(fast_config(dataset, tmp_path / 'run', grid_m=3))
    assert regrid['executed'] == dict(sanitize=0, doppler=0, factorize=0, dorf=36)


def test_pipeline_doppler_representation(dataset, tmp_path):

    result = cmd_pipeline(fast_config(dataset, tmp_path / 'run', representation='doppler'))

    assert result['executed']['factorize'] == 0
    assert result['executed']['dorf'] == 0
    assert all(trial['n_channels'] == 3 for trial in result['trials'])


def test_pipeline_corrupted_intermediate(dataset, tmp_path):

    config = fast_config(dataset, tmp_path / 'run')
    result = cmd_pipeline(config)
    artifact = result['trials'][5]['artifact']
    with open(artifact, 'wb') as outfile:
        outfile.write(b'garbage')

    with pytest.raises(StageError) as excinfo:
        cmd_pipeline(config)

    assert excinfo.value.stage == 'dorf'
    assert excinfo.value.trial_id == result['trials'][5]['trial_id']
    assert isinstance(excinfo.value.cause, DataFormatError)
    assert artifact in str(excinfo.value)


def test_pipeline_warm_cache_identical(dataset, tmp_path):
    """Reusing a cached sanitized trial gives the same downstream bytes."""

    cold = cmd_pipeline(fast_config(dataset, tmp_path / 'cold'))

    warm_dir = tmp_path / 'warm'
    shutil.copytree(tmp_path / 'cold' / 'cache' / 'sanitize', warm_dir / 'cache' / 'sanitize')
    warm = cmd_pipeline(fast_config(dataset, warm_dir))

    assert warm['executed'] == dict(sanitize=0, doppler=36, factorize=36, dorf=36)
    for one, other in zip(cold['trials'], warm['trials']):
        for key in ('doppler', 'artifact'):
            with open(one[key], 'rb') as a_file, open(other[key], 'rb') as b_file:
                assert a_file.read() == b_file.read()


def test_pipeline_missing_fit_report(dataset, tmp_path):

    config = fast_config(dataset, tmp_path / 'run')
    result = cmd_pipeline(config)
    factor_path = Path(result['trials'][3]['factors'][0])
    factor_path.with_suffix('.fit.txt').unlink()

    # A new grid reprojects from the cached factors
    with pytest.raises(StageError) as excinfo:
        cmd_pipeline(fast_config(dataset, tmp_path / 'run', grid_m=3))

    assert excinfo.value.stage == 'factorize'
    assert isinstance(excinfo.value.cause, DataFormatError)
    assert excinfo.value.exit_code == 2


def test_pipeline_antenna_labels(tmp_path):
    """Fields keep the index of the antenna they were built from."""

    data_dir = tmp_path / 'data'
    cmd_synth(SynthConfig(**{**SMALL_SYNTH, 'n_subjects': 1, 'trials_per_class': 1,
                             'n_antennas': 2}), data_dir)
    config = fast_config(data_dir, tmp_path / 'run', antenna=1)
    result = cmd_pipeline(config)

    # The file itself only numbers fields in order
    assert read_dorfs(result['trials'][0]['artifact'])[0].antenna_id == 0

    for _ in range(2):
        stages = _TrialStages('s0_circle_00', data_dir / 's0_circle_00.csi',
                              tmp_path / 'run' / 'cache', config)
        assert [field.antenna_id for field in stages.dorfs()] == [1]
        assert set(stages.projections().provenance[:, 0]) == {1}

    names = {path.name for path in cmd_report(config)}
    assert {'s0_circle_00_dorf_a1.csv', 's0_circle_00_velocity_a1.csv'} <= names
    assert 's0_circle_00_dorf_a0.csv' not in names


def test_pipeline_bad_antenna(dataset, tmp_path):

    with pytest.raises(StageError, match='Antenna 2 requested'):
        cmd_pipeline(fast_config(dataset, tmp_path / 'run', antenna=2))


def test_stage_error_exit_code():

    assert StageError('t', 'factorize', NumericError('singular')).exit_code == 3
    assert StageError('t', 'doppler', InvalidInputError('short')).exit_code == 2


# ------------------------------------------
# Testing LOSO evaluation and its report
# ------------------------------------------


def test_fold_seed():

    assert fold_seed(0, 1) == fold_seed(0, 1)
    assert fold_seed(0, 1) != fold_seed(0, 2)
    assert fold_seed(0, 1) != fold_seed(1, 1)


def test_loso_report(tmp_path):

    report = LosoReport(subjects=[0, 1, 2], accuracies=[0.5, 0.75, 1.0], n_test=[4, 4, 4],
                        confusions=[np.eye(2, dtype=int) * 2] * 3, class_names=['a', 'b'],
                        config_hash='f' * 64, timing=dict(total=1.5))

    assert report.mean == pytest.approx(0.75)
    assert report.std == pytest.approx(np.sqrt(1 / 24))
    assert np.array_equal(report.total_confusion, np.eye(2) * 6)

    text = report.to_text()
    assert 'Mean' in text and 'Standard Deviation' in text and '75.0' in text

    path = tmp_path / 'report.json'
    report.to_json(path)
    restored = LosoReport.from_json(path)
    assert restored.content_digest() == report.content_digest()

    retimed = LosoReport(report.subjects, report.accuracies, report.n_test, report.confusions,
                         report.class_names, report.config_hash, timing=dict(total=99.0))
    assert retimed.content_digest() == report.content_digest()


@pytest.mark.parametrize(
    'ctrl',
    [dict(edit=lambda data: data.update(mean=0.5), match='do not match'),
     dict(edit=lambda data: data.pop('subjects'), match='malformed'),
     dict(edit=lambda data: data.update(subjects=[0]), match='malformed')]
)
def test_loso_report_errors(tmp_path, ctrl):

    report = LosoReport([0, 1], [0.5, 1.0], [2, 2], [np.eye(2, dtype=int)] * 2, ['a', 'b'], 'h')
    path = tmp_path / 'report.json'
    data = report.to_dict()
    ctrl['edit'](data)
    path.write_text(json.dumps(data))

    with pytest.raises(DataFormatError, match=ctrl['match']):
        LosoReport.from_json(path)


def test_loso_one_subject(tmp_path):

    data_dir = tmp_path / 'data'
    cmd_synth(SynthConfig(**{**SMALL_SYNTH, 'n_subjects': 1, 'trials_per_class': 1}), data_dir)

    with pytest.raises(InvalidInputError, match='≥2 subjects, found 1'):
        cmd_loso(fast_config(data_dir, tmp_path / 'run'))


def test_loso_missing_class(dataset, tmp_path):

    data_dir = tmp_path / 'data'
    data_dir.mkdir()
    for path in discover_trials(dataset):
        if not (path.name.startswith('s1_') or path.name.startswith('s2_')) or \
                'circle' not in path.name:
            (data_dir / path.name).write_bytes(path.read_bytes())

    with pytest.raises(InvalidInputError, match='subject 0: class circle is absent'):
        cmd_loso(fast_config(dataset, tmp_path / 'run', dataset_dir=str(data_dir)))


def test_loso_deterministic(dataset, tmp_path):

    first = cmd_loso(fast_config(dataset, tmp_path / 'first'))
    second = cmd_loso(fast_config(dataset, tmp_path / 'second'))

    assert first.subjects == [0, 1, 2]
    assert first.n_test == [12, 12, 12]
    assert first.content_digest() == second.content_digest()

    loso_dir = tmp_path / 'first' / 'loso'
    for name in ('report.json', 'report.txt', 'confusion.png', 'fold_s1/model.npz',
                 'fold_s1/predictions.csv', 'fold_s1/confusion.png'):
        assert (loso_dir / name).exists()

    written = cmd_report(fast_config(dataset, tmp_path / 'first'))
    names = {path.name for path in written}
    assert {'s0_circle_00_doppler.png', 'grid.png', 's0_circle_00_dorf_a0.png',
            'confusion_s2.png', 'confusion.png', 's0_circle_00_doppler.csv',
            's0_circle_00_velocity_a0.csv', 's0_circle_00_directions_a0.csv',
            's0_circle_00_dorf_a0.csv'} <= names

    with open(tmp_path / 'first' / 'report' / 's0_circle_00_dorf_a0.csv', newline='') as infile:
        rows = list(csv.reader(infile))
    # Window time plus the 8 directions of a two row grid
    assert len(rows[0]) == 9
    assert len(rows) == 12


def test_report_needs_manifest(tmp_path):

    with pytest.raises(InvalidInputError, match='run the pipeline first'):
        cmd_report(PipelineConfig(output_dir=str(tmp_path)))


# ------------------------------------------
# Testing the command line entry point
# ------------------------------------------


def test_main_config(tmp_path):

    path = tmp_path / 'pipeline.json'

    assert main(['-q', 'config', str(path), '--grid-m', '4', '--kernels', '50']) == 0
    config = PipelineConfig.from_json(path)
    assert config.grid_m == 4
    assert config.kernels.n_kernels == 50


@pytest.mark.parametrize(
    'ctrl',
    [dict(argv=['-q', 'pipeline'], out=2),
     dict(argv=['-q', 'pipeline', '--dataset', 'no/such/dir'], out=2),
     dict(argv=['-q', 'config', 'x.json', '--grid-m', '0'], out=2),
     dict(argv=['-q', 'report', '--output', 'no/such/dir'], out=2)]
)
def test_main_exit_codes(ctrl):

    assert main(ctrl['argv']) == ctrl['out']


@pytest.mark.parametrize(
    'argv',
    [['pipeline', '--bins', 'some'],
     ['unknown'],
     ['synth']]
)
def test_main_usage_errors(argv):

    with pytest.raises(SystemExit) as excinfo:
        main(argv)

    assert excinfo.value.code == 1


def test_main_pipeline(dataset, tmp_path, caplog):

    caplog.set_level(logging.INFO)

    config_path = tmp_path / 'pipeline.json'
    fast_config(dataset, tmp_path / 'run').to_json(config_path)

    assert main(['pipeline', '--config', str(config_path)]) == 0
    assert main(['pipeline', '--config', str(config_path)]) == 0
    assert 'no stages executed' in caplog.text


@pytest.mark.slow
def test_pipeline_workers(dataset, tmp_path):
    """A worker pool gives the same artifacts as a serial run."""

    serial = cmd_pipeline(fast_config(dataset, tmp_path / 'serial'))
    pooled = cmd_pipeline(fast_config(dataset, tmp_path / 'pooled', workers=2))

    for one, other in zip(serial['trials'], pooled['trials']):
        with open(one['artifact'], 'rb') as a_file, open(other['artifact'], 'rb') as b_file:
            assert a_file.read() == b_file.read()


@pytest.mark.slow
def test_synthetic_loso(tmp_path):
    """Full size synthetic LOSO with the default settings."""

    data_dir = tmp_path / 'synth'
    cmd_synth(SynthConfig(), data_dir)
    config = PipelineConfig.from_json(data_dir / 'pipeline.json').to_dict()
    config['output_dir'] = str(tmp_path / 'run')
    report = cmd_loso(PipelineConfig.from_dict(config))

    assert len(report.subjects) == 6
    assert report.mean >= 0.9
