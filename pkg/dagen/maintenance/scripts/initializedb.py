# -*- coding: utf-8 -*-
import sys

import os
from pyramid.paster import (
    get_appsettings,
    setup_logging,
    )
from pyramid.scripts.common import parse_vars
from pyramid.settings import asbool

from dagen.app.cache import init_caches
from dagen.base.settings import set_settings


def usage(argv):
    cmd = os.path.basename(argv[0])
    print('usage: %s <config_uri> [var=value]\n'
          '(example: "%s production.ini reset_db=true")' % (cmd, cmd))
    sys.exit(1)


def main(argv=sys.argv):
    if len(argv) < 2:
        usage(argv)
    config_uri = argv[1]
    options = parse_vars(argv[2:])
    setup_logging(config_uri)
    settings = get_appsettings(config_uri)

    durl = os.environ.get("DAGEN_STORE_URL")
    if durl:
        settings['sqlalchemy.url'] = durl

    initialize(settings, options)


def initialize(settings, options):
    """create the condition store tables; ``reset_db`` drops them first"""
    from dagen.app.config import load_config
    from dagen.app.pipeline import open_store
    from dagen.metadata import metadata

    set_settings(settings)
    config = load_config(settings)
    init_caches()
    engine = open_store(config)

    if asbool(options.get("reset_db", False)):
        metadata.drop_all(engine)
        metadata.create_all(engine)
    return engine
