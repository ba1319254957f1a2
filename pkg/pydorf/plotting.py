"""Static figures for the ``report`` and ``loso`` commands.

Figures are built with :class:`matplotlib.figure.Figure` directly rather than
through ``pyplot``, so no interactive backend or global figure state is
involved and the functions can run in worker processes.
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.figure import Figure

from pydorf import ACTIVITIES
from pydorf.delay_doppler import DopplerMatrix
from pydorf.dorf import DoRF, SphereGrid

PathLike = Union[str, Path]


def _save(fig: Figure, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches='tight')
    return path


def plot_doppler_traces(dm: DopplerMatrix, path: PathLike, title: str = '') -> Path:
    """Radial velocity of every retained delay bin against window time."""

    fig = Figure(figsize=(8, 4))
    ax = fig.add_subplot()
    for col in range(dm.n_bins):
        ax.plot(dm.window_times, dm.v_r[:, col], lw=1,
                label=f'bin {dm.bins[col]}, ant {dm.antenna_ids[col]}')
    ax.set_xlabel('Time (s)')
    ax.set_ylabel('Radial velocity (m/s)')
    ax.set_title(title or 'Doppler projections')
    if dm.n_bins <= 12:
        ax.legend(fontsize='small', ncol=2)

    return _save(fig, path)


def example_directions(grid: SphereGrid) -> Sequence[Tuple[int, int]]:
    """Four spread-out grid directions used to illustrate a DoRF."""

    m_rows = grid.m_rows
    last_row = m_rows - 1
    return [(0, 0), (last_row // 2, m_rows // 2),
            ((last_row + 1) // 2, m_rows), (last_row, (3 * m_rows) // 2)]


def plot_dorf_traces(field: DoRF, path: PathLike,
                     directions: Optional[Sequence[Tuple[int, int]]] = None) -> Path:
    """Projection traces of a DoRF along a few grid directions, one panel each."""

    directions = list(directions or example_directions(field.grid))
    fig = Figure(figsize=(8, 2 * len(directions)))
    axes = fig.subplots(len(directions), 1, sharex=True, squeeze=False)[:, 0]

    for ax, (m_idx, n_idx) in zip(axes, directions):
        d_mn = field.grid.directions[m_idx, n_idx]
        ax.plot(field.times, field.p[:, m_idx, n_idx], lw=1.2)
        ax.set_ylabel('m/s')
        ax.set_title(f'd = ({d_mn[0]:.2f}, {d_mn[1]:.2f}, {d_mn[2]:.2f})', fontsize='small')
    axes[-1].set_xlabel('Time (s)')
    fig.suptitle(f'DoRF projections, antenna {field.antenna_id}')

    return _save(fig, path)


def plot_sphere_grid(grid: SphereGrid, path: PathLike,
                     highlight: Optional[Sequence[Tuple[int, int]]] = None) -> Path:
    """The grid directions on the unit sphere, with optional highlighted points."""

    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot(projection='3d')
    points = grid.flat_directions
    ax.scatter(points[:, 0], points[:, 1], points[:, 2], s=8, c='tab:blue')

    for m_idx, n_idx in highlight or example_directions(grid):
        x, y, z = grid.directions[m_idx, n_idx]
        ax.scatter([x], [y], [z], s=40, c='tab:red')

    ax.set_box_aspect((1, 1, 1))
    ax.set_title(f'Direction grid, M = {grid.m_rows}')

    return _save(fig, path)


def plot_confusion(confusion: np.ndarray, path: PathLike, title: str = '',
                   class_names: Sequence[str] = ACTIVITIES) -> Path:
    """A confusion matrix with counts annotated; rows are true classes."""

    confusion = np.asarray(confusion)
    fig = Figure(figsize=(5, 4.5))
    ax = fig.add_subplot()
    image = ax.imshow(confusion, cmap='Blues')
    fig.colorbar(image, ax=ax)

    ticks = np.arange(len(class_names))
    ax.set_xticks(ticks, labels=class_names, rotation=45, ha='right')
    ax.set_yticks(ticks, labels=class_names)
    ax.set_xlabel('Predicted')
    ax.set_ylabel('True')
    ax.set_title(title or 'Confusion matrix')

    threshold = confusion.max() / 2 if confusion.size else 0
    for (row, col), count in np.ndenumerate(confusion):
        ax.text(col, row, str(count), ha='center', va='center',
                color='white' if count > threshold else 'black')

    return _save(fig, path)
