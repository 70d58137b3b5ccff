# -*- coding: utf-8 -*-
import os

from dagen.base.settings import set_settings

__version__ = '0.1.0'


def main(global_config, **settings):
    """ This function returns the configured pipeline.
    """
    durl = os.environ.get("DAGEN_STORE_URL")
    if durl:
        settings['sqlalchemy.url'] = durl

    set_settings(settings)

    from dagen.app.config import load_config
    config = load_config(settings)

    from dagen.app.cache import init_caches
    init_caches()

    from dagen.app.pipeline import Pipeline, open_store
    open_store(config)

    return Pipeline(config)
