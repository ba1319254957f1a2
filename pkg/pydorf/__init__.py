"""Doppler radiance fields from Wi-Fi channel state information.

The package reconstructs a 3D velocity track from the Doppler projections
carried by CSI delay bins, resamples it onto a uniform grid of directions and
classifies the resulting field.
"""

from pydorf.version import __version__

ACTIVITIES = ('circle', 'left_right', 'up_down', 'push_pull')
