# -*- coding: utf-8 -*-
#
# dagen documentation build configuration file

import os
import re
import sys

with open('../dagen/__init__.py', 'r') as fd:
    read_version = re.search(r'^__version__\s*=\s*[\'"]([^\'"]*)[\'"]',
                             fd.read(), re.MULTILINE).group(1)

if not read_version:
    raise RuntimeError('Cannot find version information')

# the numerical stack is not needed to render the API pages
autodoc_mock_imports = ['torch', 'numpy', 'scipy', 'PIL']

sys.path.insert(0, os.path.abspath('..'))

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.viewcode']

source_suffix = '.rst'
master_doc = 'index'
exclude_patterns = ['_build']

project = u'dagen'
copyright = u'2026, the dagen developers'
version = read_version
release = version

pygments_style = 'sphinx'
html_theme = 'default'
htmlhelp_basename = 'dagendoc'

man_pages = [
    ('index', 'dagen', u'dagen Documentation', [u'the dagen developers'], 1)
]
