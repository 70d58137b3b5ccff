import os
import re

from setuptools import setup, find_packages

here = os.path.abspath(os.path.dirname(__file__))
with open(os.path.join(here, 'README.txt')) as f:
    README = f.read()
with open(os.path.join(here, 'CHANGES.txt')) as f:
    CHANGES = f.read()

requires = [
    'pyramid',
    'PasteDeploy',
    'SQLAlchemy>=1.4',
    'dogpile.cache',
    'mock',
    'raven',
    'jsl',
    'jsonschema',
    'pyparsing',
    'torch',
    'numpy',
    'scipy',
    'Pillow',
]

version = ''
with open('dagen/__init__.py', 'r') as fd:
    version = re.search(r'^__version__\s*=\s*[\'"]([^\'"]*)[\'"]',
                        fd.read(), re.MULTILINE).group(1)

if not version:
    raise RuntimeError('Cannot find version information')

setup(name='dagen',
      version=version,
      description='Domain adaptive generation: condition-controlled diffusion that synthesizes adverse-condition '
                  'training images for unsupervised domain adaptation of semantic segmentation.',
      long_description=README + '\n\n' + CHANGES,
      classifiers=[
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "License :: OSI Approved :: MIT License"
        ],
      license='MIT',
      keywords='diffusion controlnet domain adaptation semantic segmentation',
      packages=find_packages()+["dagen_quickstart_template",],
      include_package_data=True,
      zip_safe=False,
      test_suite='dagen',
      install_requires=requires,
      entry_points="""\
      [paste.app_factory]
      main = dagen:main
      [console_scripts]
      dagen = dagen.maintenance.scripts.pipeline:main
      initialize_dagen_store = dagen.maintenance.scripts.initializedb:main
      dagen_quickstart = dagen.maintenance.scripts.quickstart:main
      """,
     )
