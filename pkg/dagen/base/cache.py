import warnings

from dogpile.cache import make_region

from dagen.base.settings import get_settings


def my_key_mangler(prefix):
    def s(o):
        if type(o) == dict:
            return "_".join(["%s=%s" % (str(k), str(v)) for k, v in o.items()])
        if type(o) in (tuple, list):
            return "_".join([str(v) for v in o])
        else:
            return str(o)

    def generate_key(key):
        return prefix + s(key).replace(" ", "")

    return generate_key


def create_cache(name):
    """create a dogpile region from the dogpile_cache.<name>.* settings.

    Falls back to an in-memory region when the region is not configured.
    """
    settings = get_settings() or {}
    prefix = "dogpile_cache.%s." % name
    if prefix + "backend" in settings:
        ch = make_region().configure_from_config(settings, prefix)
    else:
        ch = make_region().configure('dogpile.cache.memory')
        if settings:
            warnings.warn("cache region %s is not configured, using memory" % name)

    ch.key_mangler = my_key_mangler(name)
    return ch
