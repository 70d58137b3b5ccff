import hashlib
import json


class DictObjectProxy:
    """attribute access to a (nested) settings dictionary, e.g. config.dm.lr_control"""

    def __init__(self, obj=None):
        super().__setattr__("obj", obj if obj is not None else {})

    def __getattr__(self, name):
        obj = super().__getattribute__("obj")
        if name not in obj:
            raise AttributeError(name)
        value = obj[name]
        if isinstance(value, dict):
            return DictObjectProxy(value)
        return value

    def __setattr__(self, key, value):
        super().__getattribute__("obj")[key] = value

    def __getitem__(self, key):
        return self.__getattr__(key)

    def __contains__(self, key):
        return key in super().__getattribute__("obj")

    def as_dict(self):
        return super().__getattribute__("obj")


class Proxy(object):
    def __init__(self):
        self.target = None

    def __getattr__(self, name):
        return getattr(self.target, name)

    def __setattr__(self, name, value):
        if name == "target":
            return object.__setattr__(self, name, value)
        else:
            setattr(self.target, name, value)

    def __call__(self, *args, **kwargs):
        return self.target(*args, **kwargs)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def sha256_json(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def sha256_files(paths):
    """hash the bytes of several files in order; missing files hash as their path only"""
    h = hashlib.sha256()
    for path in paths:
        h.update(str(path).encode("utf-8").split(b"/")[-1])
        try:
            with open(path, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 16), b""):
                    h.update(chunk)
        except FileNotFoundError:
            h.update(b"<missing>")
    return h.hexdigest()


def derive_seed(*parts):
    """a stable 63 bit seed from arbitrary parts"""
    digest = hashlib.sha256(canonical_json(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)
