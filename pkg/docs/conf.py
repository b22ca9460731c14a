#!/usr/bin/env python
#
# posestream documentation build configuration file.

import os
import sys
sys.path.insert(0, os.path.abspath('..'))

import posestream  # noqa: E402

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.viewcode',
              'sphinx.ext.napoleon', 'sphinx.ext.mathjax']
napoleon_numpy_docstring = True
napoleon_google_docstring = False
autodoc_member_order = 'bysource'

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'posestream'
copyright = "2023, Nael Aqel"
author = "Nael Aqel"
version = posestream.__version__
release = posestream.__version__

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'

html_theme = 'sphinx_rtd_theme'
htmlhelp_basename = 'posestreamdoc'

man_pages = [
    (master_doc, 'posestream', 'posestream Documentation', [author], 1)
]
