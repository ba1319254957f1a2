r"""The :mod:`~pydorf.classifier` module maps projection sets to activity
labels. It provides:

* a bank of random dilated convolutional kernels (:func:`build_kernel_bank`)
  applied independently to every projection channel
  (:func:`extract_features`), giving two statistics per kernel: the maximum
  activation and the proportion of positive activations,
* element-wise max pooling of the per-channel features over the channel axis
  (:func:`pool_features`), which makes the representation blind to the order
  and repetition of the projections, and
* a shallow :class:`torch.nn.Module` (linear projection, one rectified
  hidden layer and a softmax output) trained with :class:`torch.optim.AdamW`
  on a label smoothed :class:`torch.nn.CrossEntropyLoss` with early stopping
  on a validation split (:func:`train`).

Feature layout
--------------

For a bank of :math:`D` kernels, feature ``2k`` of a channel is the maximum
activation of kernel ``k`` and feature ``2k + 1`` is its proportion of
positive activations, so the feature dimension is :math:`d = 2D`.
"""

import copy
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from numba import njit, prange
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler
from torch import nn

from pydorf.dorf import ProjectionSet
from pydorf.exceptions import InvalidInputError, TrainingError
from pydorf.param_classes import KernelConfig, TrainingConfig
from pydorf.utilities import check_finite


class KernelBank:
    """A set of random dilated convolutional kernels

    The weights of all kernels are stored end to end in ``weights``; kernel
    ``k`` uses ``lengths[k]`` values starting at ``offsets[k]``.

    Attributes:
        weights: Concatenated kernel weights.
        lengths: Kernel lengths.
        biases: Kernel biases.
        dilations: Kernel dilations, powers of two.
        paddings: Zero padding applied at each end of the series, zero for
            unpadded kernels.
        seed: The seed the bank was drawn from.
        input_length: The series length the dilations were drawn for.
    """

    def __init__(self, weights: np.ndarray, lengths: np.ndarray, biases: np.ndarray,
                 dilations: np.ndarray, paddings: np.ndarray, seed: int,
                 input_length: int):

        self.weights = np.asarray(weights, dtype=np.float64)
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.biases = np.asarray(biases, dtype=np.float64)
        self.dilations = np.asarray(dilations, dtype=np.int64)
        self.paddings = np.asarray(paddings, dtype=np.int64)
        self.seed = seed
        self.input_length = input_length

        n_kernels = self.lengths.shape[0]
        for name in ('biases', 'dilations', 'paddings'):
            if getattr(self, name).shape != (n_kernels,):
                raise InvalidInputError(f'Kernel {name} do not match {n_kernels} kernels')
        if self.weights.shape != (int(self.lengths.sum()),):
            raise InvalidInputError('Kernel weights do not match the kernel lengths')

        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)

    @property
    def n_kernels(self) -> int:
        return self.lengths.shape[0]

    @property
    def n_features(self) -> int:
        return 2 * self.n_kernels

    @property
    def padded(self) -> np.ndarray:
        return self.paddings > 0

    @property
    def receptive_fields(self) -> np.ndarray:
        return (self.lengths - 1) * self.dilations + 1

    def kernel(self, k_idx: int) -> np.ndarray:
        """The weights of kernel ``k_idx``."""
        return self.weights[self.offsets[k_idx]:self.offsets[k_idx] + self.lengths[k_idx]]

    def same_as(self, other: 'KernelBank') -> bool:
        """True when both banks hold identical parameters."""
        return (self.input_length == other.input_length and
                all(np.array_equal(getattr(self, name), getattr(other, name))
                    for name in ('weights', 'lengths', 'biases', 'dilations', 'paddings')))

    def __repr__(self):
        return (f"KernelBank(D={self.n_kernels}, seed={self.seed}, "
                f"input_length={self.input_length})")


def build_kernel_bank(n_kernels: int, seed: int, input_length: int,
                      lengths: Tuple[int, ...] = (7, 9, 11)) -> KernelBank:
    """Draws a reproducible bank of random kernels

    For each kernel, in order: the length is drawn uniformly from ``lengths``,
    the weights from a standard normal and then mean centred, the bias
    uniformly from [-1, 1], the dilation as :math:`2^a` with integer :math:`a`
    uniform over the values keeping the receptive field within
    ``input_length``, and padding is switched on with probability one half.

    Args:
        n_kernels: The number of kernels :math:`D \\ge 1`.
        seed: Seed for the whole bank.
        input_length: The length :math:`T'` of the series to be transformed.
        lengths: Candidate kernel lengths.

    Returns:
        A :class:`KernelBank`.

    Examples:

        >>> bank = build_kernel_bank(100, 42, 24)
        >>> bank.same_as(build_kernel_bank(100, 42, 24))
        True
        >>> bool(np.all(bank.receptive_fields <= 24))
        True
    """

    if n_kernels < 1:
        raise InvalidInputError(f'n_kernels must be at least 1, got {n_kernels}')
    if input_length < 1:
        raise InvalidInputError(f'input_length must be at least 1, got {input_length}')

    rng = np.random.default_rng(seed)

    kernel_lengths = rng.choice(np.asarray(lengths, dtype=np.int64), n_kernels)
    weights = np.zeros(int(kernel_lengths.sum()), dtype=np.float64)
    biases = np.zeros(n_kernels, dtype=np.float64)
    dilations = np.zeros(n_kernels, dtype=np.int64)
    paddings = np.zeros(n_kernels, dtype=np.int64)

    start = 0
    for k_idx in range(n_kernels):
        length = int(kernel_lengths[k_idx])
        kernel = rng.normal(0, 1, length)
        weights[start:start + length] = kernel - kernel.mean()
        start += length

        biases[k_idx] = rng.uniform(-1, 1)

        max_exponent = 0
        if input_length > length:
            max_exponent = int(np.floor(np.log2((input_length - 1) / (length - 1))))
        dilation = 2 ** int(rng.integers(0, max_exponent + 1))
        dilations[k_idx] = dilation

        if rng.integers(2) == 1:
            paddings[k_idx] = ((length - 1) * dilation) // 2

    return KernelBank(weights, kernel_lengths, biases, dilations, paddings,
                      seed=seed, input_length=input_length)


@njit
def _apply_kernel(series, weights, length, bias, dilation, padding):
    """Maximum and proportion of positive values of one dilated convolution."""

    n_times = series.shape[0]
    output_length = (n_times + 2 * padding) - (length - 1) * dilation
    end = (n_times + padding) - (length - 1) * dilation

    max_value = -np.inf
    n_positive = 0

    for i in range(-padding, end):
        total = bias
        index = i
        for j in range(length):
            if -1 < index < n_times:
                total += weights[j] * series[index]
            index += dilation

        if total > max_value:
            max_value = total
        if total > 0:
            n_positive += 1

    return max_value, n_positive / output_length


@njit(parallel=True)
def _apply_kernels(channels, weights, lengths, offsets, biases, dilations, paddings):

    n_channels = channels.shape[0]
    n_kernels = lengths.shape[0]
    features = np.zeros((n_channels, 2 * n_kernels))

    for c_idx in prange(n_channels):
        for k_idx in range(n_kernels):
            start = offsets[k_idx]
            max_value, ppv = _apply_kernel(channels[c_idx],
                                           weights[start:start + lengths[k_idx]],
                                           lengths[k_idx], biases[k_idx],
                                           dilations[k_idx], paddings[k_idx])
            features[c_idx, 2 * k_idx] = max_value
            features[c_idx, 2 * k_idx + 1] = ppv

    return features


class FeatureMatrix:
    """Per-channel kernel features of one trial

    Attributes:
        f: Features ``(C, 2D)`` in the layout described in the module notes.
    """

    def __init__(self, f: np.ndarray):
        f = np.asarray(f, dtype=float)
        if f.ndim != 2:
            raise InvalidInputError(f'Feature matrix must be 2D, got shape {f.shape}')
        self.f = f

    @property
    def n_channels(self) -> int:
        return self.f.shape[0]

    @property
    def max_features(self) -> np.ndarray:
        return self.f[:, 0::2]

    @property
    def ppv_features(self) -> np.ndarray:
        return self.f[:, 1::2]

    def __repr__(self):
        return f"FeatureMatrix(C={self.n_channels}, d={self.f.shape[1]})"


def extract_features(projections, bank: KernelBank) -> FeatureMatrix:
    """Applies every kernel to every projection channel

    Args:
        projections: A :class:`~pydorf.dorf.ProjectionSet` or ``(T', C)`` array.
        bank: The :class:`KernelBank`.

    Returns:
        A :class:`FeatureMatrix` with one row per channel, in channel order.

    Raises:
        InvalidInputError: if :math:`T' < 2`, or an unpadded kernel has a
            receptive field longer than the series.
    """

    values = projections.values if isinstance(projections, ProjectionSet) else projections
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidInputError(f'Projections must be 2D (T, C), got shape {values.shape}')
    check_finite(values, 'projections')

    n_times = values.shape[0]
    if n_times < 2:
        raise InvalidInputError(f'Feature extraction needs at least 2 windows, got {n_times}')

    too_long = ~bank.padded & (bank.receptive_fields > n_times)
    if np.any(too_long):
        raise InvalidInputError(f'{np.count_nonzero(too_long)} unpadded kernel(s) have a '
                                f'receptive field longer than the {n_times} window series')

    features = _apply_kernels(np.ascontiguousarray(values.T), bank.weights, bank.lengths,
                              bank.offsets, bank.biases, bank.dilations, bank.paddings)

    return FeatureMatrix(features)


def pool_features(features: FeatureMatrix) -> np.ndarray:
    """Element-wise maximum of the feature rows over the channel axis

    Examples:

        >>> pool_features(FeatureMatrix(np.array([[1.0, 0.2], [0.5, 0.7]])))
        array([1. , 0.7])
    """

    f = features.f if isinstance(features, FeatureMatrix) else np.asarray(features)
    if f.ndim != 2 or f.shape[0] == 0:
        raise InvalidInputError('Cannot pool a feature matrix with no channels')

    return f.max(axis=0)


LAYER_NAMES = ('projection', 'hidden', 'output')
PARAM_NAMES = tuple(f'{layer}_{kind}' for layer in LAYER_NAMES for kind in ('weight', 'bias'))


class ShallowNetwork(nn.Module):
    r"""A linear projection, one rectified hidden layer and a linear output

    .. math::

        z = x W_p^\top + b_p, \quad a = \max(0, z W_h^\top + b_h), \quad
        \mathrm{logits} = a W_o^\top + b_o

    The layers hold ``float64`` parameters. Class probabilities are the
    softmax of the logits.

    Args:
        n_features: The pooled feature dimension :math:`d`.
        projection_dim: The projection dimension :math:`D'`.
        hidden_dim: Width of the hidden layer.
        n_classes: Number of output classes.
    """

    def __init__(self, n_features: int, projection_dim: int, hidden_dim: int, n_classes: int):

        super().__init__()
        self.projection = nn.Linear(n_features, projection_dim, dtype=torch.float64)
        self.hidden = nn.Linear(projection_dim, hidden_dim, dtype=torch.float64)
        self.output = nn.Linear(hidden_dim, n_classes, dtype=torch.float64)

    @classmethod
    def initialise(cls, n_features: int, cfg: TrainingConfig,
                   rng: np.random.Generator) -> 'ShallowNetwork':
        """Glorot uniform weights drawn from ``rng`` and zero biases."""

        network = cls(n_features, cfg.projection_dim, cfg.hidden_dim, cfg.n_classes)
        with torch.no_grad():
            for layer in network.layers:
                fan_out, fan_in = layer.weight.shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                layer.weight.copy_(torch.from_numpy(rng.uniform(-limit, limit, (fan_out, fan_in))))
                layer.bias.zero_()

        return network

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> 'ShallowNetwork':
        """Rebuilds a network from the arrays returned by :meth:`to_arrays`."""

        missing = set(PARAM_NAMES) - set(arrays)
        if missing:
            raise InvalidInputError(f'Missing network parameters: {sorted(missing)}')

        values = {name: np.asarray(arrays[name], dtype=np.float64) for name in PARAM_NAMES}
        shapes = [values[f'{layer}_weight'].shape for layer in LAYER_NAMES]
        if (any(len(shape) != 2 for shape in shapes) or
                shapes[1][1] != shapes[0][0] or shapes[2][1] != shapes[1][0] or
                any(values[f'{layer}_bias'].shape != (shape[0],)
                    for layer, shape in zip(LAYER_NAMES, shapes))):
            raise InvalidInputError(f'Inconsistent layer shapes {shapes}')

        network = cls(shapes[0][1], shapes[0][0], shapes[1][0], shapes[2][0])
        with torch.no_grad():
            for layer in LAYER_NAMES:
                module = getattr(network, layer)
                module.weight.copy_(torch.from_numpy(values[f'{layer}_weight']))
                module.bias.copy_(torch.from_numpy(values[f'{layer}_bias']))

        return network

    @property
    def layers(self) -> Tuple[nn.Linear, nn.Linear, nn.Linear]:
        return self.projection, self.hidden, self.output

    @property
    def n_features(self) -> int:
        return self.projection.in_features

    @property
    def n_classes(self) -> int:
        return self.output.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(torch.relu(self.hidden(self.projection(x))))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax class probabilities for a ``(B, d)`` array."""

        with torch.no_grad():
            logits = self(torch.as_tensor(x, dtype=torch.float64))
            return torch.softmax(logits, dim=1).numpy()

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Copies of the parameters keyed by the names in ``PARAM_NAMES``."""

        return {f'{layer}_{kind}': getattr(getattr(self, layer), kind).detach().numpy().copy()
                for layer in LAYER_NAMES for kind in ('weight', 'bias')}


def make_optimiser(network: ShallowNetwork, cfg: TrainingConfig) -> torch.optim.AdamW:
    """AdamW over the network parameters with the settings of ``cfg``."""

    return torch.optim.AdamW(network.parameters(), lr=cfg.learning_rate,
                             betas=tuple(cfg.betas), eps=cfg.adam_eps,
                             weight_decay=cfg.weight_decay)


class Model:
    """A trained classifier

    Attributes:
        network: The trained :class:`ShallowNetwork`.
        scaler: The fitted :class:`~sklearn.preprocessing.StandardScaler`
            applied to pooled features before the network.
        training_config: The :class:`~pydorf.param_classes.TrainingConfig` used.
        kernel_bank: The :class:`KernelBank` the features come from, if any.
        kernel_config: The :class:`~pydorf.param_classes.KernelConfig` of the bank.
        history: Mean training and validation loss per epoch.
        best_epoch: The epoch whose weights were retained.
        attention_hook: Optional callable mapping a ``(C, d)`` feature array to
            a re-weighted ``(C', d)`` array before pooling.
    """

    def __init__(self, network: ShallowNetwork, scaler: StandardScaler,
                 training_config: TrainingConfig,
                 kernel_bank: Optional[KernelBank] = None,
                 kernel_config: Optional[KernelConfig] = None,
                 history: Optional[List[Tuple[float, float]]] = None,
                 best_epoch: int = 0):
        self.network = network
        self.scaler = scaler
        self.training_config = training_config
        self.kernel_bank = kernel_bank
        self.kernel_config = kernel_config
        self.history = history or []
        self.best_epoch = best_epoch
        self.attention_hook: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def n_features(self) -> int:
        return self.network.n_features

    def pooled_features(self, projections) -> np.ndarray:
        """Kernel features of a projection set, pooled over channels."""

        if self.kernel_bank is None:
            raise InvalidInputError('Model has no kernel bank to extract features with')

        features = extract_features(projections, self.kernel_bank).f
        if self.attention_hook is not None:
            features = self.attention_hook(features)

        return pool_features(features)

    def __repr__(self):
        return (f"Model(d={self.n_features}, classes={self.network.n_classes}, "
                f"best_epoch={self.best_epoch})")


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:

    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidInputError(f'Labels must be integers, got {labels.dtype}')
    if np.any((labels < 0) | (labels >= n_classes)):
        raise InvalidInputError(f'Labels must lie in [0, {n_classes})')

    return labels.astype(np.int64)


def train(pooled: np.ndarray, labels: np.ndarray,
          cfg: TrainingConfig = TrainingConfig(),
          kernel_bank: Optional[KernelBank] = None,
          kernel_config: Optional[KernelConfig] = None,
          validation: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Model:
    """Trains the shallow network on pooled features

    Unless a validation set is given, ``cfg.validation_fraction`` of the
    trials is held out, stratified by class. Features are standardised with
    statistics from the remaining training trials. The network is trained
    with :func:`make_optimiser` on mini-batches in a seeded random order, the validation loss
    is evaluated after every epoch, and training stops after ``cfg.patience``
    epochs without improvement or after ``cfg.max_epochs``. The weights with
    the lowest validation loss are retained.

    Initialisation, validation split and batch order are all derived from
    ``cfg.seed``, so identical inputs give identical weights.

    Args:
        pooled: Pooled features ``(n_trials, d)``.
        labels: Integer class labels ``(n_trials,)``.
        cfg: A :class:`~pydorf.param_classes.TrainingConfig` instance.
        kernel_bank: The bank the features were extracted with, stored in the
            model.
        kernel_config: The settings of that bank, stored in the model.
        validation: Optional ``(pooled, labels)`` validation set.

    Returns:
        A :class:`Model`.

    Raises:
        InvalidInputError: for an empty training or validation split, or fewer
            than two classes.
        TrainingError: if the loss becomes non-finite.
    """

    pooled = np.asarray(pooled, dtype=float)
    labels = _check_labels(labels, cfg.n_classes)

    if pooled.ndim != 2 or pooled.shape[0] == 0:
        raise InvalidInputError('Training split is empty')
    if pooled.shape[0] != labels.shape[0]:
        raise InvalidInputError(f'{pooled.shape[0]} feature rows but {labels.shape[0]} labels')
    check_finite(pooled, 'pooled features')

    init_seq, split_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(3)

    if validation is None:
        try:
            x_train, x_val, y_train, y_val = train_test_split(
                pooled, labels, test_size=cfg.validation_fraction, stratify=labels,
                random_state=int(split_seq.generate_state(1)[0]))
        except ValueError as excep:
            raise InvalidInputError(f'Cannot make a stratified validation split: {excep}')
    else:
        x_train, y_train = pooled, labels
        x_val = np.asarray(validation[0], dtype=float)
        y_val = _check_labels(validation[1], cfg.n_classes)

    if x_val.shape[0] == 0:
        raise InvalidInputError('Validation split is empty')
    if np.unique(y_train).size < 2:
        raise InvalidInputError(f'Training split needs at least 2 classes, '
                                f'found {np.unique(y_train).tolist()}')

    scaler = StandardScaler().fit(x_train)
    x_train = scaler.transform(x_train)
    x_val = scaler.transform(x_val)

    network = ShallowNetwork.initialise(x_train.shape[1], cfg, np.random.default_rng(init_seq))
    optimiser = make_optimiser(network, cfg)
    criterion = nn.CrossEntropyLoss(label_smoothing=cfg.label_smoothing)
    batch_rng = np.random.default_rng(batch_seq)

    inputs, targets = torch.as_tensor(x_train), torch.as_tensor(y_train)
    val_inputs, val_targets = torch.as_tensor(x_val), torch.as_tensor(y_val)

    best_loss = np.inf
    best_state = copy.deepcopy(network.state_dict())
    best_epoch = 0
    history = []
    n_train = x_train.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):

        order = torch.as_tensor(batch_rng.permutation(n_train))
        epoch_loss = 0.0
        for batch in torch.split(order, cfg.batch_size):
            optimiser.zero_grad()
            loss = criterion(network(inputs[batch]), targets[batch])
            if not torch.isfinite(loss):
                raise TrainingError('Training loss is not finite', epoch=epoch)
            loss.backward()
            optimiser.step()
            epoch_loss += loss.item() * batch.shape[0]

        with torch.no_grad():
            val_loss = criterion(network(val_inputs), val_targets).item()
        if not np.isfinite(val_loss):
            raise TrainingError('Validation loss is not finite', epoch=epoch)
        history.append((epoch_loss / n_train, val_loss))

        if val_loss < best_loss:
            best_loss = val_loss
            best_state = copy.deepcopy(network.state_dict())
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            break

    network.load_state_dict(best_state)

    return Model(network, scaler, cfg, kernel_bank=kernel_bank, kernel_config=kernel_config,
                 history=history, best_epoch=best_epoch)


def predict(model: Model, pooled: np.ndarray) -> np.ndarray:
    """Class probabilities for one pooled vector ``(d,)`` or a batch ``(n, d)``.

    Raises:
        InvalidInputError: if the feature dimension does not match the model.
    """

    pooled = np.asarray(pooled, dtype=float)
    single = pooled.ndim == 1
    batch = pooled[np.newaxis] if single else pooled

    if batch.ndim != 2 or batch.shape[1] != model.n_features:
        raise InvalidInputError(f'Model expects {model.n_features} features, '
                                f'got shape {pooled.shape}')

    probs = model.network.predict_proba(model.scaler.transform(batch))

    return probs[0] if single else probs


def evaluate(model: Model, pooled: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy and confusion matrix of a model on labelled pooled features.

    Returns:
        A dictionary with 'accuracy', 'confusion' (rows are true classes) and
        'predicted'.
    """

    labels = _check_labels(labels, model.network.n_classes)
    predicted = np.argmax(predict(model, np.atleast_2d(pooled)), axis=1)

    return dict(accuracy=float(np.mean(predicted == labels)),
                confusion=confusion_matrix(labels, predicted,
                                           labels=np.arange(model.network.n_classes)),
                predicted=predicted)
