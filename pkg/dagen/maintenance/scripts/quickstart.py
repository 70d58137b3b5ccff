# -*- coding: utf-8 -*-
import os
import re
import shutil
import sys

from pyramid.paster import get_appsettings

import dagen

RUN_DIRS = ("checkpoints", "manifests", "generated", "logs", "reports")


def usage(argv):
    cmd = os.path.basename(argv[0])
    print('usage: %s <directory>\n' % (cmd,))
    sys.exit(1)


def point_at(ini_path, out):
    """rewrite paths.out and the store url of a copied ini to ``out``"""
    with open(ini_path, "r", encoding="utf-8") as f:
        text = f.read()
    text = re.sub(r"(?m)^paths\.out\s*=.*$", "paths.out = %s" % out, text)
    text = re.sub(r"(?m)^sqlalchemy\.url\s*=.*$",
                  "sqlalchemy.url = sqlite:///%s" % os.path.join(out, "store.sqlite"), text)
    with open(ini_path, "w", encoding="utf-8") as f:
        f.write(text)


def create_project(directory):
    """a production.ini pointing at ``<directory>/run`` and an empty condition and checkpoint store"""
    from dagen.maintenance.scripts.initializedb import initialize

    template = os.path.join(os.path.dirname(dagen.__path__[0]), "dagen_quickstart_template")
    shutil.copytree(template, directory, ignore=shutil.ignore_patterns("__init__.py", "__pycache__"))
    ini_path = os.path.join(directory, "production.ini")
    out = os.path.join(os.path.abspath(directory), "run")
    point_at(ini_path, out)
    for name in RUN_DIRS:
        os.makedirs(os.path.join(out, name), exist_ok=True)
    initialize(get_appsettings(ini_path), {})
    return ini_path


def main(argv=sys.argv):
    if len(argv) < 2:
        usage(argv)

    directory = argv[1]

    if os.path.exists(directory):
        print("directory already exists")
        return
    try:
        ini_path = create_project(directory)
    except (shutil.Error, OSError) as e:
        print('Error: %s' % e)
        return
    print("created %s" % ini_path)
