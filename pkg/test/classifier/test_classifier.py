from contextlib import contextmanager

import numpy as np
import pytest
import torch
from torch import nn

from pydorf.classifier import (PARAM_NAMES, FeatureMatrix, KernelBank, Model, ShallowNetwork,
                               build_kernel_bank, evaluate, extract_features, make_optimiser,
                               pool_features, predict, train)
from pydorf.dorf import ProjectionSet
from pydorf.exceptions import InvalidInputError
from pydorf.param_classes import TrainingConfig

# ------------------------------------------
# Null context manager to include exception testing in test paramaterisation
# ------------------------------------------


@contextmanager
def does_not_raise():
    yield


@pytest.fixture(scope='module')
def clusters():
    """Three well separated Gaussian clusters of pooled features."""

    rng = np.random.default_rng(8)
    centres = rng.normal(0, 3, (3, 12))
    labels = np.repeat(np.arange(3), 30)
    pooled = centres[labels] + rng.normal(0, 0.5, (90, 12))

    return pooled, labels


SMALL_NET = dict(projection_dim=8, hidden_dim=16, n_classes=3)

# ------------------------------------------
# Testing the kernel bank
# ------------------------------------------


def test_kernel_bank_reproducible():

    bank = build_kernel_bank(200, 7, 24)

    assert bank.same_as(build_kernel_bank(200, 7, 24))
    assert not bank.same_as(build_kernel_bank(200, 8, 24))
    assert bank.n_features == 400


def test_kernel_bank_draws():

    bank = build_kernel_bank(500, 3, 30, lengths=(7, 9, 11))

    assert set(bank.lengths.tolist()) <= {7, 9, 11}
    assert np.all(bank.receptive_fields <= 30)
    assert np.all(np.abs(bank.biases) <= 1)
    assert np.all(np.log2(bank.dilations) % 1 == 0)
    for k_idx in range(bank.n_kernels):
        assert abs(bank.kernel(k_idx).mean()) < 1e-12
    # Roughly half of the kernels are padded
    assert 150 < np.count_nonzero(bank.padded) < 350


@pytest.mark.parametrize(
    'ctrl',
    [dict(args=(0, 1, 10), cmng=pytest.raises(InvalidInputError)),
     dict(args=(10, 1, 0), cmng=pytest.raises(InvalidInputError)),
     dict(args=(10, 1, 4), cmng=does_not_raise())]
)
def test_kernel_bank_errors(ctrl):

    with ctrl['cmng']:
        build_kernel_bank(*ctrl['args'])


def test_kernel_bank_shape_check():

    with pytest.raises(InvalidInputError):
        KernelBank(np.zeros(3), [2], [0.0], [1], [0], seed=0, input_length=4)


# ------------------------------------------
# Testing extract_features and pool_features
# ------------------------------------------


@pytest.mark.parametrize(
    'ctrl',
    [dict(bank=([1.0, -1.0], 0.0, 1, 0), series=[0.0, 1.0, 3.0], out=[-1.0, 0.0]),
     dict(bank=([1.0, 1.0], 0.5, 1, 1), series=[1.0, 2.0], out=[3.5, 1.0]),
     dict(bank=([1.0, 0.0, -1.0], 0.0, 2, 0), series=[0.0, 0.0, 0.0, 0.0, 4.0, 1.0],
          out=[-1.0, 0.0])]
)
def test_single_kernel(ctrl):

    weights, bias, dilation, padding = ctrl['bank']
    bank = KernelBank(weights, [len(weights)], [bias], [dilation], [padding],
                      seed=0, input_length=len(ctrl['series']))
    features = extract_features(np.array(ctrl['series'])[:, np.newaxis], bank)

    assert np.allclose(features.f, [ctrl['out']])


def test_extract_features():

    rng = np.random.default_rng(4)
    projections = ProjectionSet(rng.standard_normal((40, 6)), np.zeros((6, 3)))
    bank = build_kernel_bank(50, 1, 40)
    features = extract_features(projections, bank)

    assert features.f.shape == (6, 100)
    assert np.all((features.ppv_features >= 0) & (features.ppv_features <= 1))
    assert np.array_equal(features.max_features, features.f[:, 0::2])

    # Channels are transformed independently
    single = extract_features(projections.values[:, [2]], bank)
    assert np.array_equal(single.f[0], features.f[2])


@pytest.mark.parametrize(
    'ctrl',
    [dict(values=np.zeros((1, 3)), bank=(5, 0, 20)),
     dict(values=np.zeros(10), bank=(5, 0, 10)),
     dict(values=np.full((10, 2), np.nan), bank=(5, 0, 10))]
)
def test_extract_features_errors(ctrl):

    with pytest.raises(InvalidInputError):
        extract_features(ctrl['values'], build_kernel_bank(*ctrl['bank']))


def test_extract_features_unpadded_too_long():

    bank = KernelBank([1.0, 0.0, -1.0], [3], [0.0], [4], [0], seed=0, input_length=9)

    with pytest.raises(InvalidInputError):
        extract_features(np.zeros((8, 1)), bank)


def test_pool_invariance():
    """Pooling ignores the order and repetition of channels."""

    rng = np.random.default_rng(0)

    for _ in range(10000):
        n_channels = rng.integers(1, 7)
        features = rng.standard_normal((n_channels, rng.integers(1, 9)))
        picks = np.concatenate([rng.permutation(n_channels),
                                rng.integers(0, n_channels, rng.integers(0, 4))])

        assert np.array_equal(pool_features(FeatureMatrix(features)),
                              pool_features(FeatureMatrix(features[picks])))


def test_pool_projection_order():

    rng = np.random.default_rng(2)
    values = rng.standard_normal((32, 5))
    bank = build_kernel_bank(40, 9, 32)

    forward = pool_features(extract_features(values, bank))
    shuffled = pool_features(extract_features(values[:, [3, 0, 4, 1, 2]], bank))

    assert np.array_equal(forward, shuffled)


def test_pool_empty():

    with pytest.raises(InvalidInputError):
        pool_features(FeatureMatrix(np.zeros((0, 4))))


# ------------------------------------------
# Testing the network
# ------------------------------------------


def test_initialise():

    cfg = TrainingConfig(projection_dim=4, hidden_dim=5, n_classes=3)
    network = ShallowNetwork.initialise(6, cfg, np.random.default_rng(9))
    again = ShallowNetwork.initialise(6, cfg, np.random.default_rng(9)).to_arrays()
    arrays = network.to_arrays()

    assert (network.n_features, network.n_classes) == (6, 3)
    assert arrays['hidden_weight'].shape == (5, 4)
    for name in PARAM_NAMES:
        assert arrays[name].dtype == np.float64
        assert np.array_equal(arrays[name], again[name])
    for layer in network.layers:
        fan_out, fan_in = layer.weight.shape
        assert layer.weight.abs().max().item() <= np.sqrt(6.0 / (fan_in + fan_out))
        assert not layer.bias.any()


@pytest.mark.parametrize('alpha', [0.0, 0.1, 0.3])
def test_label_smoothing_floor(clusters, alpha):
    """No logits fall below the entropy of the smoothed targets."""

    targets = np.full(3, alpha / 3)
    targets[0] += 1 - alpha
    floor = -np.sum(targets * np.log(np.where(targets > 0, targets, 1.0)))
    criterion = nn.CrossEntropyLoss(label_smoothing=alpha)

    logits = torch.log(torch.as_tensor(targets) + 1e-300)[None]
    assert criterion(logits, torch.tensor([0])).item() == pytest.approx(floor, abs=1e-9)

    pooled, labels = clusters
    cfg = TrainingConfig(learning_rate=1e-2, max_epochs=40, patience=40,
                         label_smoothing=alpha, **SMALL_NET)
    model = train(pooled, labels, cfg)
    assert all(train_loss >= floor - 1e-9 and val_loss >= floor - 1e-9
               for train_loss, val_loss in model.history)


def test_gradient_check():
    """Autograd gradients of the smoothed loss match finite differences."""

    cfg = TrainingConfig(projection_dim=4, hidden_dim=5, n_classes=3)
    rng = np.random.default_rng(123)
    criterion = nn.CrossEntropyLoss(label_smoothing=0.1)
    n_checked = 0

    while n_checked < 5:
        network = ShallowNetwork.initialise(6, cfg, rng)
        with torch.no_grad():
            for layer in network.layers:
                layer.bias.copy_(torch.from_numpy(rng.normal(0, 0.1, tuple(layer.bias.shape))))
        x = torch.as_tensor(rng.standard_normal((8, 6)))
        labels = torch.as_tensor(rng.integers(0, 3, 8))

        # Stay clear of the ReLU kinks
        with torch.no_grad():
            if network.hidden(network.projection(x)).abs().min().item() < 1e-3:
                continue

        names = [name for name, _ in network.named_parameters()]
        params = tuple(param.detach().clone().requires_grad_(True)
                       for param in network.parameters())

        def loss(*values):
            logits = torch.func.functional_call(network, dict(zip(names, values)), (x,))
            return criterion(logits, labels)

        assert torch.autograd.gradcheck(loss, params, eps=1e-6, atol=1e-4)
        n_checked += 1


@pytest.mark.parametrize(
    'ctrl',
    [dict(edit={'hidden_weight': np.zeros((3, 2))}, cmng=pytest.raises(InvalidInputError)),
     dict(edit={'output_bias': np.zeros(4)}, cmng=pytest.raises(InvalidInputError)),
     dict(edit={'projection_weight': np.zeros(8)}, cmng=pytest.raises(InvalidInputError)),
     dict(edit={'hidden_bias': None}, cmng=pytest.raises(InvalidInputError)),
     dict(edit={}, cmng=does_not_raise())]
)
def test_network_from_arrays(ctrl):

    cfg = TrainingConfig(projection_dim=4, hidden_dim=5, n_classes=3)
    network = ShallowNetwork.initialise(6, cfg, np.random.default_rng(2))
    arrays = network.to_arrays()
    for name, value in ctrl['edit'].items():
        if value is None:
            del arrays[name]
        else:
            arrays[name] = value

    with ctrl['cmng']:
        rebuilt = ShallowNetwork.from_arrays(arrays)
        x = np.random.default_rng(3).standard_normal((4, 6))
        assert np.array_equal(rebuilt.predict_proba(x), network.predict_proba(x))


def test_make_optimiser():

    cfg = TrainingConfig(learning_rate=3e-3, betas=(0.8, 0.99), adam_eps=1e-7,
                         weight_decay=0.05, projection_dim=4, hidden_dim=5, n_classes=3)
    network = ShallowNetwork.initialise(6, cfg, np.random.default_rng(0))
    optimiser = make_optimiser(network, cfg)

    assert isinstance(optimiser, torch.optim.AdamW)
    group = optimiser.param_groups[0]
    assert group['lr'] == 3e-3 and tuple(group['betas']) == (0.8, 0.99)
    assert group['eps'] == 1e-7 and group['weight_decay'] == 0.05
    assert len(group['params']) == len(PARAM_NAMES)


def test_optimiser_decoupled_decay():
    """With zero gradients only the decoupled weight decay acts."""

    cfg = TrainingConfig(learning_rate=0.1, weight_decay=0.5, projection_dim=4, hidden_dim=5,
                         n_classes=3)
    network = ShallowNetwork.initialise(6, cfg, np.random.default_rng(0))
    before = network.to_arrays()
    optimiser = make_optimiser(network, cfg)
    for param in network.parameters():
        param.grad = torch.zeros_like(param)
    optimiser.step()

    after = network.to_arrays()
    for name in PARAM_NAMES:
        assert np.allclose(after[name], 0.95 * before[name])


# ------------------------------------------
# Testing train, predict and evaluate
# ------------------------------------------


def test_train_separable(clusters):

    pooled, labels = clusters
    cfg = TrainingConfig(learning_rate=1e-2, max_epochs=200, patience=30, batch_size=16,
                         **SMALL_NET)
    model = train(pooled, labels, cfg)

    assert isinstance(model, Model)
    assert 1 <= model.best_epoch <= len(model.history) <= 200
    assert evaluate(model, pooled, labels)['accuracy'] >= 0.95


def test_train_deterministic(clusters):

    pooled, labels = clusters
    cfg = TrainingConfig(learning_rate=1e-2, max_epochs=20, patience=5, seed=3, **SMALL_NET)

    first = train(pooled, labels, cfg)
    second = train(pooled, labels, cfg)

    first_arrays, second_arrays = first.network.to_arrays(), second.network.to_arrays()
    for name in PARAM_NAMES:
        assert np.array_equal(first_arrays[name], second_arrays[name])
    assert first.history == second.history


def test_train_early_stopping(clusters):

    pooled, labels = clusters
    cfg = TrainingConfig(learning_rate=1e-2, max_epochs=500, patience=3, **SMALL_NET)
    model = train(pooled, labels, cfg, validation=(pooled[::10], labels[::10]))

    assert len(model.history) - model.best_epoch <= 3
    best_val = min(val for _, val in model.history)
    assert model.history[model.best_epoch - 1][1] == best_val


@pytest.mark.parametrize(
    'ctrl',
    [dict(labels=np.zeros(90, dtype=int)),
     dict(labels=np.full(90, 3)),
     dict(labels=np.linspace(0, 2, 90))]
)
def test_train_errors(clusters, ctrl):

    pooled, _ = clusters

    with pytest.raises(InvalidInputError):
        train(pooled, ctrl['labels'], TrainingConfig(max_epochs=2, **SMALL_NET))


def test_train_empty():

    with pytest.raises(InvalidInputError):
        train(np.zeros((0, 4)), np.zeros(0, dtype=int), TrainingConfig(**SMALL_NET))


def test_predict(clusters):

    pooled, labels = clusters
    model = train(pooled, labels, TrainingConfig(max_epochs=5, **SMALL_NET))

    single = predict(model, pooled[0])
    assert single.shape == (3,)
    assert single.sum() == pytest.approx(1.0)
    assert predict(model, pooled[:7]).shape == (7, 3)

    with pytest.raises(InvalidInputError):
        predict(model, pooled[:, :5])

    result = evaluate(model, pooled, labels)
    assert result['confusion'].shape == (3, 3)
    assert result['confusion'].sum() == 90


def test_model_attention_hook():

    rng = np.random.default_rng(1)
    values = rng.standard_normal((24, 4))
    bank = build_kernel_bank(10, 2, 24)
    pooled = pool_features(extract_features(values, bank))

    model = train(np.tile(pooled, (20, 1)) + rng.normal(0, 0.1, (20, 20)),
                  np.repeat([0, 1], 10), TrainingConfig(max_epochs=2, n_classes=2),
                  kernel_bank=bank)
    assert np.array_equal(model.pooled_features(values), pooled)

    model.attention_hook = lambda features: features[:1]
    first_channel = extract_features(values[:, :1], bank).f[0]
    assert np.array_equal(model.pooled_features(values), first_channel)


def test_predictions_channel_invariant():
    """Permuting and duplicating channels leaves predictions bit-identical."""

    rng = np.random.default_rng(31)
    bank = build_kernel_bank(16, 5, 24)
    trials = [rng.standard_normal((24, 5)) for _ in range(12)]
    pooled = np.stack([pool_features(extract_features(values, bank)) for values in trials])
    model = train(pooled, np.repeat([0, 1, 2], 4), TrainingConfig(max_epochs=5, **SMALL_NET),
                  kernel_bank=bank)

    for values in trials:
        picks = np.concatenate([rng.permutation(5), rng.integers(0, 5, 3)])
        assert np.array_equal(predict(model, model.pooled_features(values)),
                              predict(model, model.pooled_features(values[:, picks])))
