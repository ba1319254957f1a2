r"""The :mod:`~pydorf.dorf` module resamples a velocity track onto a fixed grid
of directions on the unit sphere, giving the Doppler radiance field (DoRF).

The grid has :math:`M` rows of latitude and :math:`2M` columns of longitude:

.. math::

    \theta_m = \frac{(m + 0.5)\pi}{M}, \quad
    \phi_n = \frac{(n + 0.5) 2\pi}{2M}, \quad
    d_{mn} = (\sin\theta_m \cos\phi_n, \sin\theta_m \sin\phi_n, \cos\theta_m)

and the field is the projection of the velocity onto every grid direction,
:math:`P(s, m, n) = v(s)^\top d_{mn}`. Whatever the unknown arrival
directions of a trial were, the DoRF views the motion from the same set of
directions, so DoRFs of different trials and subjects are comparable.

The grid is equiangular rather than area-uniform, so directions crowd towards
the poles.
"""

from typing import List, Optional, Tuple

import numpy as np

from pydorf.bounds_checker import input_bounds_checker
from pydorf.delay_doppler import DopplerMatrix
from pydorf.exceptions import InvalidInputError
from pydorf.utilities import summarize_attrs
from pydorf.velocity_factorization import VelocityTrack


class SphereGrid:
    """An equiangular grid of unit directions

    Instances are created by :func:`sphere_grid`.

    Attributes:
        m_rows: The number of latitude rows :math:`M`.
        thetas: Polar angles, length :math:`M`, radians.
        phis: Azimuths, length :math:`2M`, radians.
        directions: Unit vectors, shape ``(M, 2M, 3)``.
    """

    def __init__(self, m_rows: int, thetas: np.ndarray, phis: np.ndarray,
                 directions: np.ndarray):
        self.m_rows = m_rows
        self.thetas = thetas
        self.phis = phis
        self.directions = directions

    @property
    def n_directions(self) -> int:
        return 2 * self.m_rows ** 2

    @property
    def flat_directions(self) -> np.ndarray:
        """The directions as a ``(2M^2, 3)`` array, row-major over (m, n)."""
        return self.directions.reshape(-1, 3)

    def antipode(self, m_idx: int, n_idx: int) -> Tuple[int, int]:
        """Index of the grid direction opposite to direction ``(m, n)``.

        Examples:

            >>> sphere_grid(8).antipode(0, 0)
            (7, 8)
        """
        if not (0 <= m_idx < self.m_rows and 0 <= n_idx < 2 * self.m_rows):
            raise InvalidInputError(f'Grid index ({m_idx}, {n_idx}) outside '
                                    f'{self.m_rows} x {2 * self.m_rows}')

        return self.m_rows - 1 - m_idx, (n_idx + self.m_rows) % (2 * self.m_rows)

    def __repr__(self):
        return f"SphereGrid(M={self.m_rows}, directions={self.n_directions})"


def sphere_grid(m_rows: int) -> SphereGrid:
    """Builds the equiangular direction grid with ``m_rows`` latitude rows

    Args:
        m_rows: The number of rows :math:`M \\ge 1`.

    Returns:
        A :class:`SphereGrid` of :math:`2M^2` directions.

    Examples:

        >>> grid = sphere_grid(1)
        >>> np.round(grid.flat_directions, 12) + 0.0
        array([[ 0.,  1.,  0.],
               [ 0., -1.,  0.]])
        >>> sphere_grid(8).n_directions
        128
    """

    if isinstance(m_rows, bool) or not isinstance(m_rows, (int, np.integer)):
        raise InvalidInputError(f'Grid size must be an integer, got {m_rows!r}')
    input_bounds_checker(m_rows, 1, np.inf, '[)', label='grid rows M')

    m_rows = int(m_rows)
    thetas = (np.arange(m_rows) + 0.5) * np.pi / m_rows
    phis = (np.arange(2 * m_rows) + 0.5) * 2 * np.pi / (2 * m_rows)

    theta_grid, phi_grid = np.meshgrid(thetas, phis, indexing='ij')
    directions = np.stack([np.sin(theta_grid) * np.cos(phi_grid),
                           np.sin(theta_grid) * np.sin(phi_grid),
                           np.cos(theta_grid)], axis=-1)

    return SphereGrid(m_rows, thetas, phis, directions)


class DoRF:
    """A Doppler radiance field for one antenna

    Attributes:
        p: Projections ``(T', M, 2M)`` in m/s.
        grid: The :class:`SphereGrid` used.
        antenna_id: The antenna the field was built from.
        times: Window times in seconds.
    """

    def __init__(self, p: np.ndarray, grid: SphereGrid, antenna_id: int = 0,
                 times: Optional[np.ndarray] = None):

        expected = (grid.m_rows, 2 * grid.m_rows)
        if p.ndim != 3 or p.shape[1:] != expected:
            raise InvalidInputError(f'DoRF shape {p.shape} does not match a grid '
                                    f'of {expected[0]} x {expected[1]}')

        self.p = p
        self.grid = grid
        self.antenna_id = antenna_id
        self.times = np.arange(p.shape[0], dtype=float) if times is None else times

    @property
    def n_windows(self) -> int:
        return self.p.shape[0]

    def flat(self) -> np.ndarray:
        """The field as a ``(T', 2M^2)`` array, row-major over (m, n)."""
        return self.p.reshape(self.n_windows, -1)

    def __repr__(self):
        return (f"DoRF(T={self.n_windows}, M={self.grid.m_rows}, "
                f"antenna={self.antenna_id})")

    def summarize(self, dp=3):
        summarize_attrs(self, ['p'], dp=dp)


def project_dorf(v: VelocityTrack, grid: SphereGrid, antenna_id: int = 0) -> DoRF:
    r"""Projects a velocity track onto every grid direction

    :math:`P(s, m, n) = v(s)^\top d_{mn}`.

    Args:
        v: The :class:`~pydorf.velocity_factorization.VelocityTrack`.
        grid: A :class:`SphereGrid`.
        antenna_id: Antenna label carried by the field.

    Returns:
        A :class:`DoRF` with shape ``(T', M, 2M)``.

    Examples:

        >>> grid = sphere_grid(2)
        >>> field = project_dorf(VelocityTrack(np.array([[0.0, 0.0, 1.0]])), grid)
        >>> bool(np.allclose(field.p[0], np.cos(grid.thetas)[:, None]))
        True
    """

    p = np.einsum('sk,mnk->smn', v.v, grid.directions)

    return DoRF(p, grid, antenna_id=antenna_id, times=v.times)


def recover_velocity(p_slice: np.ndarray, grid: SphereGrid) -> np.ndarray:
    """Least squares velocity from DoRF slices

    Args:
        p_slice: One slice ``(M, 2M)`` or a stack ``(T', M, 2M)``.
        grid: The :class:`SphereGrid` the slices were projected on.

    Returns:
        The velocity ``(3,)`` or the track ``(T', 3)``.

    Raises:
        InvalidInputError: for a single row grid, whose directions all lie in
            the equatorial plane and cannot determine the vertical component.
    """

    if grid.m_rows < 2:
        raise InvalidInputError('Velocity is not recoverable from a grid with M < 2')

    p_slice = np.asarray(p_slice, dtype=float)
    single = p_slice.ndim == 2
    stack = p_slice[np.newaxis] if single else p_slice
    if stack.shape[1:] != grid.directions.shape[:2]:
        raise InvalidInputError(f'Slice shape {p_slice.shape} does not match {grid}')

    rhs = stack.reshape(stack.shape[0], -1).T
    velocity = np.linalg.lstsq(grid.flat_directions, rhs, rcond=None)[0].T

    return velocity[0] if single else velocity


class ProjectionSet:
    """Projection time series from one trial, ready for classification

    Attributes:
        values: Projections ``(T', C)``, one column per channel.
        provenance: Integer ``(C, 3)`` array. For DoRF channels each row is
            (antenna, m, n); for raw Doppler channels it is (antenna, delay
            bin, -1).
    """

    def __init__(self, values: np.ndarray, provenance: np.ndarray):

        values = np.asarray(values, dtype=float)
        provenance = np.asarray(provenance, dtype=int)
        if values.ndim != 2 or provenance.shape != (values.shape[1], 3):
            raise InvalidInputError(f'Provenance {provenance.shape} does not match '
                                    f'projections {values.shape}')

        self.values = values
        self.provenance = provenance

    @property
    def n_windows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __repr__(self):
        return f"ProjectionSet(T={self.n_windows}, C={self.n_channels})"


MERGE_POLICIES = ('concat',)


def merge_dorfs(fields: List[DoRF], policy: str = 'concat') -> ProjectionSet:
    """Merges per-antenna fields into one projection set

    Each field is flattened over its grid directions and the fields are
    concatenated along the channel axis in the order given, so three antennas
    on an :math:`M = 8` grid give 384 channels.

    Args:
        fields: One :class:`DoRF` per antenna, sharing the number of windows.
        policy: The merge policy; only 'concat' is defined.

    Returns:
        A :class:`ProjectionSet` with (antenna, m, n) provenance.

    Raises:
        InvalidInputError: if no fields are given, or the window counts differ.
    """

    if policy not in MERGE_POLICIES:
        raise InvalidInputError(f'Unknown merge policy {policy!r}')
    if not fields:
        raise InvalidInputError('No DoRFs to merge')

    n_windows = fields[0].n_windows
    for field in fields[1:]:
        if field.n_windows != n_windows:
            raise InvalidInputError(f'DoRFs have different window counts: '
                                    f'{n_windows} and {field.n_windows}')

    values, provenance = [], []
    for field in fields:
        m_idx, n_idx = np.meshgrid(np.arange(field.grid.m_rows),
                                   np.arange(2 * field.grid.m_rows), indexing='ij')
        values.append(field.flat())
        provenance.append(np.column_stack([np.full(m_idx.size, field.antenna_id),
                                           m_idx.ravel(), n_idx.ravel()]))

    return ProjectionSet(np.concatenate(values, axis=1), np.concatenate(provenance))


def doppler_projection_set(dm: DopplerMatrix) -> ProjectionSet:
    """Wraps the raw Doppler projections of a trial as a projection set.

    This skips factorization and resampling entirely and lets the classifier
    run on the radial velocities as observed.
    """

    provenance = np.column_stack([dm.antenna_ids, dm.bins, np.full(dm.n_bins, -1)])

    return ProjectionSet(dm.v_r, provenance)
