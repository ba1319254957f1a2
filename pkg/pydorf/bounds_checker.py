import numpy as np
from numbers import Number
from typing import Union

from pydorf.exceptions import InvalidInputError

# DESIGN NOTES:
#
# Out of bounds inputs raise InvalidInputError rather than being replaced with
# np.nan: a grid with zero rows or a negative ridge weight has no meaningful
# output. Non-finite values are always rejected, whatever the bounds.

# Interval type -> (below lower bound, above upper bound) tests
_OUTSIDE = {'[]': (np.less, np.greater),
            '()': (np.less_equal, np.greater_equal),
            '[)': (np.less, np.greater_equal),
            '(]': (np.less_equal, np.greater)}


def _notation(lower: Number, upper: Number, interval_type: str) -> str:
    return f'{interval_type[0]}{lower}, {upper}{interval_type[1]}'


def input_bounds_checker(inputs: Union[np.ndarray, Number],
                         lower: Number = -np.inf,
                         upper: Number = np.inf,
                         interval_type: str = '[]',
                         label: str = ''):
    r"""Raises unless every input value is finite and inside an interval

    Parameters:

        inputs: A number or numeric array.
        lower: Lower end of the interval.
        upper: Upper end of the interval.
        interval_type: One of '[]', '()', '[)' and '(]', giving whether each
            end is included.
        label: Name and units of the quantity, used in error messages.

    Returns:

        ``inputs``, unchanged.

    Raises:

        InvalidInputError: for non-numeric, non-finite or out of bounds values.

    Examples:

        >>> input_bounds_checker(3, 1, 4, label='hop (samples)')
        3
        >>> input_bounds_checker(np.array([0.0, 1.0]), 0, 1, '(]', label='alpha')
        Traceback (most recent call last):
        ...
        pydorf.exceptions.InvalidInputError: 1 value(s) outside (0, 1] for alpha
    """

    if interval_type not in _OUTSIDE:
        raise InvalidInputError(f'Unknown interval type: {interval_type}')

    values = np.asarray(inputs)
    if not np.issubdtype(values.dtype, np.number):
        raise InvalidInputError(f'Non-numeric input for {label}: {values.dtype}')

    n_bad = np.count_nonzero(~np.isfinite(values))
    if n_bad:
        raise InvalidInputError(f'{n_bad} non-finite value(s) for {label}')

    below, above = _OUTSIDE[interval_type]
    n_outside = np.count_nonzero(below(values, lower) | above(values, upper))
    if n_outside:
        raise InvalidInputError(f'{n_outside} value(s) outside '
                                f'{_notation(lower, upper, interval_type)} for {label}')

    return inputs


class InputBoundsCheckerFactory:
    r"""A reusable bounds check for one labelled quantity

    Calling an instance runs :func:`input_bounds_checker` with the stored
    interval and label.

    Examples:

        >>> rate_constraint = InputBoundsCheckerFactory(0, label='sample rate (Hz)',
        ...                                             interval_type='(]')
        >>> rate_constraint
        InputBoundsCheckerFactory: sample rate (Hz) constrained to (0, inf]
        >>> rate_constraint(100.0)
        100.0
    """

    def __init__(self,
                 lower: Number = -np.inf,
                 upper: Number = np.inf,
                 interval_type: str = '[]',
                 label: str = ''):

        if interval_type not in _OUTSIDE:
            raise InvalidInputError(f'Unknown interval type: {interval_type}')

        self.lower = lower
        self.upper = upper
        self.interval_type = interval_type
        self.label = label

    def __call__(self, inputs):

        return input_bounds_checker(inputs, self.lower, self.upper, self.interval_type,
                                    self.label)

    def __repr__(self):

        return (f'InputBoundsCheckerFactory: {self.label} constrained to '
                f'{_notation(self.lower, self.upper, self.interval_type)}')
