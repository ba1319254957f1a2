# Sphinx configuration for the pydorf documentation.

import os
import sys

sys.path.insert(0, os.path.abspath('..'))

from pydorf.version import __version__

project = 'pydorf: Doppler radiance fields from Wi-Fi CSI'
copyright = '2026, pydorf developers'
author = 'pydorf developers'
version = release = __version__

extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.autosummary',
              'sphinx.ext.mathjax',
              'sphinx.ext.napoleon',
              'autodocsumm',
              'myst_nb',
              'sphinx_rtd_theme']

autodoc_default_options = {'members': True}
autosummary_generate = True
napoleon_use_ivar = True

templates_path = ['_templates']
exclude_patterns = ['_build']

html_theme = 'sphinx_rtd_theme'
html_theme_options = {'navigation_depth': 3, 'collapse_navigation': False}
html_static_path = ['_static']
