r"""The :mod:`~pydorf.velocity_factorization` module recovers a 3D velocity
track and a set of unit arrival directions from a matrix of Doppler radial
velocity projections.

The Doppler matrix is modelled as :math:`V_r = V R^\top + N`, where
:math:`V \in \mathbb{R}^{T' \times 3}` holds the velocity of the moving
centre of mass in each analysis window, :math:`R \in \mathbb{R}^{N \times 3}`
holds one unit direction per delay bin and :math:`N` is the residual. The
factors are found by minimising

.. math::

    \frac{1}{2} \left( \| V_r - V R^\top \|_F^2 + \lambda \|V\|_F^2
        + \gamma \|R\|_F^2 \right)
    \quad \text{subject to} \quad \|r_i\| = 1

by alternating ridge solves for :math:`V` and :math:`R`, with the rows of
:math:`R` renormalised after each direction solve. The product
:math:`V R^\top` is unchanged when both factors are rotated by the same
orthogonal matrix, so only the product is identifiable. Each iterate is
rotated onto the previous one (:func:`procrustes_align`) to stop the
orientation drifting, and iteration stops when the dynamic time warping loss
between observed and predicted projections (:func:`dtw_loss`) falls below
the tolerance.

The updates minimise the squared loss while the stopping rule uses DTW; the
two differ on purpose, since DTW tolerates small timing misalignments that the
squared loss would penalise.
"""

import warnings
from typing import List, Optional, Tuple, Union

import numpy as np
from numba import njit

from pydorf.delay_doppler import DopplerMatrix, concatenate_doppler
from pydorf.exceptions import InvalidInputError, NumericError
from pydorf.param_classes import FactorizationConfig
from pydorf.utilities import check_finite, random_unit_vectors, summarize_attrs

# Pre-normalisation direction norms at or below this are treated as zero
ZERO_NORM_TOL = 1e-12

DopplerLike = Union[DopplerMatrix, np.ndarray]


class VelocityTrack:
    """A 3D velocity per analysis window

    Args:
        v: Velocities ``(T', 3)`` in m/s.
        times: Window times in seconds; defaults to the window index.
    """

    def __init__(self, v: np.ndarray, times: Optional[np.ndarray] = None):

        v = np.asarray(v, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidInputError(f'Velocity track must have shape (T, 3), got {v.shape}')
        check_finite(v, 'velocity track')

        times = np.arange(v.shape[0], dtype=float) if times is None else np.asarray(times, dtype=float)
        if times.shape != (v.shape[0],):
            raise InvalidInputError(f'{times.shape[0]} times for {v.shape[0]} velocities')

        self.v = v
        self.times = times

    @property
    def n_windows(self) -> int:
        return self.v.shape[0]

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.v, axis=1)

    def __repr__(self):
        return f"VelocityTrack(T={self.n_windows}, peak_speed={self.speed.max():.4f} m/s)"

    def summarize(self, dp=3):
        summarize_attrs(self, ['v', 'speed'], dp=dp)


class DirectionSet:
    """Unit arrival directions, one per Doppler matrix column

    Args:
        r: Directions ``(N, 3)``; every row must have unit norm within 1e-9.
        fallback_mask: Rows that were replaced by a random unit vector because
            their ridge solution had zero norm.
    """

    def __init__(self, r: np.ndarray, fallback_mask: Optional[np.ndarray] = None):

        r = np.asarray(r, dtype=float)
        if r.ndim != 2 or r.shape[1] != 3:
            raise InvalidInputError(f'Direction set must have shape (N, 3), got {r.shape}')
        check_finite(r, 'direction set')

        norms = np.linalg.norm(r, axis=1)
        n_bad = np.count_nonzero(np.abs(norms - 1) > 1e-9)
        if n_bad:
            raise InvalidInputError(f'{n_bad} direction(s) do not have unit norm')

        self.r = r
        self.fallback_mask = (np.zeros(r.shape[0], dtype=bool) if fallback_mask is None
                              else np.asarray(fallback_mask, dtype=bool))

    @property
    def n_directions(self) -> int:
        return self.r.shape[0]

    def __repr__(self):
        return f"DirectionSet(N={self.n_directions})"


class FitReport:
    """Diagnostics of one :func:`factorize` run

    Attributes:
        losses: DTW loss after each iteration.
        objectives: Regularised squared objective after each iteration.
        iterations: Iterations run.
        stop_reason: 'tolerance' or 'max_iters'.
        fallback_count: Zero-norm direction replacements over the run.
        residual_rms: RMS of :math:`V_r - V R^\\top`.
        residual_max_abs: Largest absolute residual.
    """

    def __init__(self, losses: List[float], objectives: List[float],
                 stop_reason: str, fallback_count: int,
                 residual_rms: float, residual_max_abs: float):
        self.losses = losses
        self.objectives = objectives
        self.stop_reason = stop_reason
        self.fallback_count = fallback_count
        self.residual_rms = residual_rms
        self.residual_max_abs = residual_max_abs

    @property
    def iterations(self) -> int:
        return len(self.losses)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_text(self) -> str:
        """Renders the report as ``key = value`` lines.

        Examples:

            >>> print(FitReport([0.5, 0.004], [2.0, 1.0], 'tolerance', 0, 0.01, 0.03).to_text())
            iterations = 2
            stop_reason = tolerance
            final_loss = 0.004
            fallback_count = 0
            residual_rms = 0.01
            residual_max_abs = 0.03
            losses = 0.5,0.004
            objectives = 2.0,1.0
        """
        lines = [f'iterations = {self.iterations}',
                 f'stop_reason = {self.stop_reason}',
                 f'final_loss = {self.final_loss!r}',
                 f'fallback_count = {self.fallback_count}',
                 f'residual_rms = {self.residual_rms!r}',
                 f'residual_max_abs = {self.residual_max_abs!r}',
                 'losses = ' + ','.join(repr(float(x)) for x in self.losses),
                 'objectives = ' + ','.join(repr(float(x)) for x in self.objectives)]

        return '\n'.join(lines)

    @classmethod
    def from_text(cls, text: str) -> 'FitReport':
        """Parses the output of :meth:`to_text`."""

        fields = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition(' = ')
            fields[key.strip()] = value.strip()

        try:
            return cls(losses=[float(x) for x in fields['losses'].split(',')],
                       objectives=[float(x) for x in fields['objectives'].split(',')],
                       stop_reason=fields['stop_reason'],
                       fallback_count=int(fields['fallback_count']),
                       residual_rms=float(fields['residual_rms']),
                       residual_max_abs=float(fields['residual_max_abs']))
        except (KeyError, ValueError) as excep:
            raise InvalidInputError(f'Malformed fit report: {excep}')

    def __repr__(self):
        return (f"FitReport(iterations={self.iterations}, stop_reason={self.stop_reason!r}, "
                f"final_loss={self.final_loss:.4g})")


def _as_array(v_r: DopplerLike) -> np.ndarray:

    if isinstance(v_r, DopplerMatrix):
        return v_r.v_r

    v_r = np.asarray(v_r, dtype=float)
    if v_r.ndim != 2:
        raise InvalidInputError(f'Doppler matrix must be 2D, got shape {v_r.shape}')
    check_finite(v_r, 'Doppler matrix')

    return v_r


def _window_times(v_r: DopplerLike) -> Optional[np.ndarray]:
    return v_r.window_times if isinstance(v_r, DopplerMatrix) else None


def velocity_update(v_r: DopplerLike, r: DirectionSet, lam: float) -> VelocityTrack:
    r"""Ridge solution for the velocities with the directions held fixed

    For every window :math:`s`:

    .. math::

        v(s) = \left( R^\top R + \lambda I_3 \right)^{-1} R^\top V_r(s,:)^\top

    Args:
        v_r: A :class:`~pydorf.delay_doppler.DopplerMatrix` or ``(T', N)`` array.
        r: The current :class:`DirectionSet`.
        lam: The ridge weight :math:`\lambda \ge 0`.

    Returns:
        A :class:`VelocityTrack`.

    Raises:
        NumericError: if :math:`R^\top R + \lambda I` is singular, which can only
            happen when ``lam`` is 0 and the directions span fewer than three
            dimensions.
    """

    values = _as_array(v_r)
    if values.shape[1] != r.n_directions:
        raise InvalidInputError(f'{values.shape[1]} Doppler columns but '
                                f'{r.n_directions} directions')
    if lam < 0:
        raise InvalidInputError(f'lam must be non-negative, got {lam}')

    gram = r.r.T @ r.r + lam * np.eye(3)
    if np.linalg.matrix_rank(gram) < 3:
        raise NumericError(f'R^T R + lambda I is singular (lambda={lam}, directions '
                           f'span {np.linalg.matrix_rank(r.r)} dimension(s))')

    v = np.linalg.solve(gram, r.r.T @ values.T).T

    return VelocityTrack(v, _window_times(v_r))


def direction_update(v_r: DopplerLike, v: VelocityTrack, gamma: float,
                     rng: Optional[np.random.Generator] = None) -> DirectionSet:
    r"""Ridge solution for the directions with the velocities held fixed

    For every column :math:`i`:

    .. math::

        r_i = \left( V^\top V + \gamma I_3 \right)^{-1} V^\top V_r(:, i),
        \qquad r_i \leftarrow r_i / \|r_i\|

    When ``gamma`` is 0 and :math:`V^\top V` is singular the minimum norm least
    squares solution is used. A direction whose solution has zero norm cannot
    be normalised: it is replaced by a random unit vector drawn from ``rng``
    and a warning is issued, so that the number of directions never changes.

    Args:
        v_r: A :class:`~pydorf.delay_doppler.DopplerMatrix` or ``(T', N)`` array.
        v: The current :class:`VelocityTrack`.
        gamma: The ridge weight :math:`\gamma \ge 0`.
        rng: Generator for replacement directions (seed 0 if not given).

    Returns:
        A :class:`DirectionSet` with its ``fallback_mask`` set.
    """

    values = _as_array(v_r)
    if values.shape[0] != v.n_windows:
        raise InvalidInputError(f'{values.shape[0]} Doppler windows but '
                                f'{v.n_windows} velocities')
    if gamma < 0:
        raise InvalidInputError(f'gamma must be non-negative, got {gamma}')

    gram = v.v.T @ v.v + gamma * np.eye(3)
    if gamma == 0 and np.linalg.matrix_rank(gram) < 3:
        r = np.linalg.lstsq(v.v, values, rcond=None)[0].T
    else:
        r = np.linalg.solve(gram, v.v.T @ values).T

    norms = np.linalg.norm(r, axis=1)
    fallback = norms <= ZERO_NORM_TOL

    if np.any(fallback):
        rng = np.random.default_rng(0) if rng is None else rng
        r[fallback] = random_unit_vectors(np.count_nonzero(fallback), rng)
        norms[fallback] = 1.0
        warnings.warn(f'{np.count_nonzero(fallback)} direction(s) with zero norm '
                      f'replaced by random unit vectors', category=RuntimeWarning)

    return DirectionSet(r / norms[:, np.newaxis], fallback_mask=fallback)


def procrustes_rotation(v: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """The rotation ``Q`` (``det(Q) = +1``) minimising ``|v Q - reference|_F``.

    The sign of the factor belonging to the smallest singular value is flipped
    when needed to exclude reflections, which also gives a deterministic
    answer when ``v`` has rank below 3.

    Examples:

        >>> v = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0]])
        >>> np.round(procrustes_rotation(v, v), 12) + 0.0
        array([[1., 0., 0.],
               [0., 1., 0.],
               [0., 0., 1.]])
    """

    v = np.asarray(v, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if v.shape != reference.shape:
        raise InvalidInputError(f'Cannot align shape {v.shape} to {reference.shape}')

    u_mat, _, vt_mat = np.linalg.svd(v.T @ reference)
    if np.linalg.det(u_mat @ vt_mat) < 0:
        u_mat[:, -1] = -u_mat[:, -1]

    return u_mat @ vt_mat


def procrustes_align(v: VelocityTrack, r: DirectionSet,
                     reference: VelocityTrack) -> Tuple[VelocityTrack, DirectionSet]:
    r"""Rotates both factors onto a reference velocity track

    Returns :math:`(VQ, RQ)` where :math:`Q` is the rotation minimising
    :math:`\|VQ - V_{ref}\|_F`. The product is unchanged because
    :math:`(VQ)(RQ)^\top = V Q Q^\top R^\top = V R^\top`.

    Args:
        v: The velocity track to align.
        r: The directions paired with ``v``.
        reference: The target velocity track, same shape as ``v``.

    Returns:
        The aligned :class:`VelocityTrack` and :class:`DirectionSet`.
    """

    rotation = procrustes_rotation(v.v, reference.v)
    r_rot = r.r @ rotation
    # Renormalise to absorb rounding from the rotation
    r_rot /= np.linalg.norm(r_rot, axis=1, keepdims=True)

    return (VelocityTrack(v.v @ rotation, v.times),
            DirectionSet(r_rot, fallback_mask=r.fallback_mask))


@njit
def _banded_dtw(x, y, band):
    """Sakoe-Chiba banded DTW with absolute difference cost.

    Returns the accumulated cost and the length of the optimal path. Ties in
    cost between predecessors are broken by the shorter path, which keeps the
    result symmetric in x and y.
    """

    n_x = x.shape[0]
    n_y = y.shape[0]
    width = max(band, abs(n_x - n_y))

    cost = np.full((n_x + 1, n_y + 1), np.inf)
    length = np.zeros((n_x + 1, n_y + 1), dtype=np.int64)
    cost[0, 0] = 0.0

    for i in range(1, n_x + 1):
        for j in range(max(1, i - width), min(n_y, i + width) + 1):
            best_cost = cost[i - 1, j - 1]
            best_len = length[i - 1, j - 1]

            if (cost[i - 1, j] < best_cost or
                    (cost[i - 1, j] == best_cost and length[i - 1, j] < best_len)):
                best_cost = cost[i - 1, j]
                best_len = length[i - 1, j]

            if (cost[i, j - 1] < best_cost or
                    (cost[i, j - 1] == best_cost and length[i, j - 1] < best_len)):
                best_cost = cost[i, j - 1]
                best_len = length[i, j - 1]

            cost[i, j] = best_cost + abs(x[i - 1] - y[j - 1])
            length[i, j] = best_len + 1

    return cost[n_x, n_y], length[n_x, n_y]


def dtw_loss(v_r: DopplerLike, predicted: np.ndarray,
             band: Optional[int] = None) -> float:
    """Mean banded DTW distance between observed and predicted columns

    Each column pair is aligned by dynamic time warping with absolute
    difference cost inside a Sakoe-Chiba band of half-width ``band`` (widened
    to the length difference when the series differ in length), and the
    accumulated cost is divided by the warping path length. The loss is the
    mean over columns and is symmetric in its two arguments.

    Args:
        v_r: Observed projections, ``(T1, N)``.
        predicted: Predicted projections, ``(T2, N)``.
        band: Band half-width in windows; ``None`` leaves warping unconstrained.

    Returns:
        The loss in the units of the projections (m/s).

    Examples:

        >>> dtw_loss(np.array([[0.0], [1.0], [0.0]]),
        ...          np.array([[0.0], [0.0], [1.0], [0.0]]))
        0.0
        >>> dtw_loss(np.array([[0.0], [1.0]]), np.array([[1.0], [1.0]]), band=0)
        0.5
    """

    observed = _as_array(v_r)
    predicted = np.asarray(predicted, dtype=float)

    if predicted.ndim != 2 or predicted.shape[1] != observed.shape[1]:
        raise InvalidInputError(f'Column counts differ: observed {observed.shape}, '
                                f'predicted {predicted.shape}')
    if band is None:
        band = max(observed.shape[0], predicted.shape[0])
    if band < 0:
        raise InvalidInputError(f'DTW band must be non-negative, got {band}')

    total = 0.0
    for col in range(observed.shape[1]):
        cost, length = _banded_dtw(np.ascontiguousarray(observed[:, col]),
                                   np.ascontiguousarray(predicted[:, col]), int(band))
        total += cost / length

    return float(total / observed.shape[1])


def objective(v_r: DopplerLike, v: VelocityTrack, r: DirectionSet,
              lam: float, gamma: float) -> float:
    r"""The regularised squared objective minimised by the alternating updates

    .. math::

        \frac{1}{2} \left( \| V_r - V R^\top \|_F^2 + \lambda \|V\|_F^2
            + \gamma \|R\|_F^2 \right)
    """

    values = _as_array(v_r)
    residual = values - v.v @ r.r.T

    return 0.5 * float(np.sum(residual ** 2) + lam * np.sum(v.v ** 2) +
                       gamma * np.sum(r.r ** 2))


def factorize(v_r: DopplerLike,
              cfg: FactorizationConfig = FactorizationConfig()
              ) -> Tuple[VelocityTrack, DirectionSet, FitReport]:
    """Alternating estimation of the velocity track and arrival directions

    Starting from seeded random unit directions, each iteration runs
    :func:`velocity_update`, :func:`direction_update`, aligns the new iterate
    to the previous velocity track with :func:`procrustes_align` (not on the
    first iteration) and evaluates :func:`dtw_loss` on the reconstruction.
    The loop stops when the loss drops below ``cfg.epsilon`` or after
    ``cfg.max_iters`` iterations; the latter is reported, with a warning, but
    is not an error.

    While the velocity track is identically zero the directions carry no
    information and the direction update is skipped, so an all-zero Doppler
    matrix returns the initial directions.

    Args:
        v_r: A :class:`~pydorf.delay_doppler.DopplerMatrix` or ``(T', N)`` array.
        cfg: A :class:`~pydorf.param_classes.FactorizationConfig` instance.

    Returns:
        A tuple of :class:`VelocityTrack`, :class:`DirectionSet` and
        :class:`FitReport`. Repeated calls with the same inputs return
        identical arrays.
    """

    values = _as_array(v_r)
    n_windows, n_bins = values.shape
    if n_windows < 1 or n_bins < 1:
        raise InvalidInputError(f'Cannot factorize a Doppler matrix of shape {values.shape}')

    rng = np.random.default_rng(cfg.seed)
    band = cfg.band_for(n_windows)

    r = DirectionSet(random_unit_vectors(n_bins, rng))
    v = VelocityTrack(np.zeros((n_windows, 3)), _window_times(v_r))
    previous = None

    losses, objectives = [], []
    fallback_count = 0
    stop_reason = 'max_iters'

    for _ in range(cfg.max_iters):

        before = objective(values, v, r, cfg.lam, cfg.gamma)
        v = velocity_update(v_r, r, cfg.lam)
        if __debug__:
            after = objective(values, v, r, cfg.lam, cfg.gamma)
            assert after <= before + 1e-9 * max(1.0, abs(before)), \
                f'velocity update increased the objective: {before} -> {after}'

        if np.any(v.v):
            r = direction_update(v_r, v, cfg.gamma, rng)
            fallback_count += int(np.count_nonzero(r.fallback_mask))

        if previous is not None:
            v, r = procrustes_align(v, r, previous)
        previous = v

        losses.append(dtw_loss(values, v.v @ r.r.T, band))
        objectives.append(objective(values, v, r, cfg.lam, cfg.gamma))

        if not np.isfinite(losses[-1]):
            raise NumericError(f'Non-finite DTW loss at iteration {len(losses)}')

        if losses[-1] < cfg.epsilon:
            stop_reason = 'tolerance'
            break

    if stop_reason == 'max_iters':
        warnings.warn(f'Factorization stopped after max_iters={cfg.max_iters} with '
                      f'loss {losses[-1]:.4g}', category=RuntimeWarning)

    residual = values - v.v @ r.r.T
    report = FitReport(losses=losses, objectives=objectives, stop_reason=stop_reason,
                       fallback_count=fallback_count,
                       residual_rms=float(np.sqrt(np.mean(residual ** 2))),
                       residual_max_abs=float(np.max(np.abs(residual))))

    return v, r, report


def factorize_joint(matrices: List[DopplerMatrix],
                    cfg: FactorizationConfig = FactorizationConfig()
                    ) -> Tuple[VelocityTrack, DirectionSet, FitReport]:
    """Runs one factorization over the concatenated bins of several antennas."""

    return factorize(concatenate_doppler(matrices), cfg)


def aligned_rmse(v: Union[VelocityTrack, np.ndarray],
                 reference: Union[VelocityTrack, np.ndarray]) -> float:
    """RMS velocity error after the best orthogonal alignment onto a reference.

    The factorization only determines the velocities up to an orthogonal
    transform, reflections included, so reflections are allowed here.

    Examples:

        >>> ref = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 1.0, 0]])
        >>> round(aligned_rmse(ref[:, [1, 0, 2]], ref), 12)
        0.0
    """

    v = v.v if isinstance(v, VelocityTrack) else np.asarray(v, dtype=float)
    reference = reference.v if isinstance(reference, VelocityTrack) else np.asarray(reference, dtype=float)
    if v.shape != reference.shape:
        raise InvalidInputError(f'Cannot compare shape {v.shape} to {reference.shape}')

    u_mat, _, vt_mat = np.linalg.svd(v.T @ reference)
    aligned = v @ (u_mat @ vt_mat)

    return float(np.sqrt(np.mean(np.sum((aligned - reference) ** 2, axis=1))))
