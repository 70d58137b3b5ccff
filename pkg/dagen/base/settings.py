_settings = {}


def set_settings(settings):
    global _settings
    _settings = settings


def get_settings():
    global _settings
    return _settings
