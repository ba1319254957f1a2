import hashlib
import json

import numpy as np
import tabulate

from pydorf.exceptions import InvalidInputError

"""
This module provides utility functions shared by the pydorf modules: input
checks, attribute summaries, content hashing and a few small pieces
of rotation algebra used by the oracle and the tests.
"""


def check_finite(values: np.ndarray, label: str) -> np.ndarray:
    """Raises InvalidInputError if an array contains NaN or infinite values.

    Args:
        values: An array, real or complex.
        label: Name used in the error message.

    Returns:
        The input array.
    """

    n_bad = np.count_nonzero(~np.isfinite(values))
    if n_bad:
        raise InvalidInputError(f'{label} contains {n_bad} non-finite value(s)')

    return values


def summarize_attrs(obj, attrs, dp=2, repr_head=True) -> str:
    """Prints a table of the shape, mean, range and NaN count of array attributes

    Complex attributes are summarised by their magnitudes. The table is used
    by the ``summarize()`` methods of the trial, Doppler, factor and DoRF
    classes.

    Args:
        obj: The object to summarise.
        attrs: Attribute names, in table order.
        dp: Decimal places of the summary statistics.
        repr_head: Print the object representation above the table.

    Returns:
        The table text.
    """

    rows = []
    for attr in attrs:
        data = np.asarray(getattr(obj, attr))
        if np.iscomplexobj(data):
            data = np.abs(data)
        data = data.astype(float)
        rows.append([attr, 'x'.join(str(size) for size in data.shape) or '1',
                     np.round(np.nanmean(data), dp),
                     np.round(np.nanmin(data), dp),
                     np.round(np.nanmax(data), dp),
                     np.count_nonzero(np.isnan(data))])

    table = tabulate.tabulate(rows, headers=['Attr', 'Shape', 'Mean', 'Min', 'Max', 'NaN'])

    if repr_head:
        print(obj)
    print(table)

    return table


def digest(*parts) -> str:
    """Returns a hex SHA-256 digest of a sequence of JSON-able objects or bytes.

    Dictionaries are serialised with sorted keys so the digest only depends
    on content.

    Examples:

        >>> digest({'a': 1, 'b': 2}) == digest({'b': 2, 'a': 1})
        True
    """

    hasher = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            hasher.update(part)
        else:
            hasher.update(json.dumps(part, sort_keys=True).encode('utf-8'))
        # Separator so that ('ab', 'c') and ('a', 'bc') differ
        hasher.update(b'\x00')

    return hasher.hexdigest()


def file_digest(path, chunk_size: int = 1 << 20) -> str:
    """Returns the hex SHA-256 digest of a file's contents."""

    hasher = hashlib.sha256()
    with open(path, 'rb') as infile:
        for chunk in iter(lambda: infile.read(chunk_size), b''):
            hasher.update(chunk)

    return hasher.hexdigest()


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    r"""Returns the 3x3 rotation matrix for a rotation of ``angle`` radians
    about ``axis``, using the Rodrigues formula:

    .. math::

        Q = I + \sin\alpha K + (1 - \cos\alpha) K^2

    where :math:`K` is the cross-product matrix of the unit axis.

    Examples:

        >>> q = rotation_from_axis_angle([0, 0, 1], np.pi / 2)
        >>> np.round(q @ np.array([1.0, 0.0, 0.0]), 12) + 0.0
        array([0., 1., 0.])
    """

    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise InvalidInputError('Rotation axis has zero length')

    k_x, k_y, k_z = axis / norm
    cross = np.array([[0.0, -k_z, k_y],
                      [k_z, 0.0, -k_x],
                      [-k_y, k_x, 0.0]])

    return np.eye(3) + np.sin(angle) * cross + (1 - np.cos(angle)) * (cross @ cross)


def random_unit_vectors(n_vectors: int, rng: np.random.Generator) -> np.ndarray:
    """Draws unit vectors uniformly on the sphere by normalising Gaussian draws.

    Args:
        n_vectors: Number of vectors.
        rng: A seeded numpy Generator.

    Returns:
        An array of shape ``(n_vectors, 3)``.
    """

    vecs = rng.standard_normal((n_vectors, 3))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)

    # Redraw zero vectors
    while np.any(norms == 0):
        zero = norms[:, 0] == 0
        vecs[zero] = rng.standard_normal((np.count_nonzero(zero), 3))
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)

    return vecs / norms
