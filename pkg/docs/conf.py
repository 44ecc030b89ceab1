# -*- coding: utf-8 -*-
#
# pimgpt Sphinx configuration. Build with `fab doc` or `sphinx-build -b html . _build/html`.

import sys
import os

sys.path.insert(0, os.path.abspath('../'))

from pimgpt import __version__


extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.viewcode',
]
autodoc_member_order = 'bysource'

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'pimgpt'
copyright = u'2026, pimgpt developers'
version = __version__
release = __version__

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'default'
htmlhelp_basename = 'pimgptdoc'

man_pages = [
    ('index', 'pimgpt', u'pimgpt Documentation', [u'pimgpt developers'], 1)
]
