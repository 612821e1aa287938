# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import datetime
import os
import sys
sys.path.insert(0, os.path.abspath(os.path.join(os.pardir, os.pardir)))
from hmlet import __version__ as release  # noqa


# -- Project information -----------------------------------------------------

project = 'django-hmlet'
copyright = datetime.date.today().strftime(' Copyright %Y, the django-hmlet developers')
author = 'the django-hmlet developers'

# -- General configuration ---------------------------------------------------

extensions = [
	'sphinx.ext.mathjax',
]

templates_path = ['_templates']

exclude_patterns = []


# -- Options for HTML output -------------------------------------------------

html_theme = 'alabaster'

html_static_path = ['_static']
