# -*- coding: utf-8 -*-
"""the pipeline configuration document.

Settings arrive flat from the ini file (``dm.lr_control = 1e-5``), are
nested on the dots, coerced to the types declared below and validated with
jsonschema. Every section rejects keys it does not know.
"""
import copy
import logging

import jsl
import jsonschema
from pyramid.settings import asbool, aslist

from dagen.base.errors import ConfigError
from dagen.base.util import DictObjectProxy, sha256_json

log = logging.getLogger(__name__)

IGNORED_KEYS = ("here", "__file__")


class PathsDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    data = jsl.StringField(default="data")
    out = jsl.StringField(default="runs")
    segmentor_checkpoint = jsl.StringField(default="")


class DatasetDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    kind = jsl.StringField(enum=["synthetic", "cityscapes_acdc"], default="synthetic")
    size = jsl.IntField(minimum=16, default=128)
    native_width = jsl.IntField(minimum=1, default=128)
    native_height = jsl.IntField(minimum=1, default=128)
    source_count = jsl.IntField(minimum=1, default=256)
    source_val_count = jsl.IntField(minimum=0, default=32)
    target_count = jsl.IntField(minimum=1, default=512)
    val_count = jsl.IntField(minimum=0, default=64)
    seed = jsl.IntField(default=7)
    cityscapes_root = jsl.StringField(default="")
    acdc_root = jsl.StringField(default="")


class ClassesDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    names = jsl.ArrayField(jsl.StringField(), default=["road", "building", "vegetation", "sky", "car", "person"])
    ignore = jsl.IntField(minimum=0, default=255)


class SubdomainsDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    names = jsl.ArrayField(jsl.StringField(), default=["night", "foggy", "rainy", "snowy"])


class ConditionsDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    train_width = jsl.IntField(minimum=64, default=64)
    train_height = jsl.IntField(minimum=64, default=64)
    sketch_threshold = jsl.NumberField(minimum=0, maximum=0.99, default=0.1)


class PromptDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    caption = jsl.StringField(default="a photo of a street scene")
    dropout = jsl.NumberField(minimum=0, maximum=1, default=0.01)
    min_fraction = jsl.NumberField(minimum=0, maximum=1, default=0.0)
    label_guidance = jsl.BooleanField(default=True)
    embedding_width = jsl.IntField(minimum=1, default=64)
    embedding_buckets = jsl.IntField(minimum=1, default=1024)
    embedding_seed = jsl.IntField(default=0)


class RCFDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    feature_channels = jsl.IntField(minimum=1, default=32)
    hidden_channels = jsl.IntField(minimum=1, default=16)
    zero_init_mix = jsl.BooleanField(default=True)
    use_structure = jsl.BooleanField(default=True)
    use_attention = jsl.BooleanField(default=True)


class DMDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    timesteps = jsl.IntField(minimum=1, default=1000)
    beta_start = jsl.NumberField(default=1e-4)
    beta_end = jsl.NumberField(default=2e-2)
    schedule = jsl.StringField(enum=["linear", "cosine"], default="linear")
    latent_channels = jsl.IntField(minimum=1, default=4)
    latent_stride = jsl.IntField(enum=[1, 2, 4, 8], default=2)
    model_channels = jsl.IntField(minimum=4, default=32)
    pretrain_steps = jsl.IntField(minimum=0, default=2000)
    pretrain_lr = jsl.NumberField(minimum=0, default=2e-4)
    steps = jsl.IntField(minimum=1, default=2000)
    micro_batch = jsl.IntField(minimum=1, default=4)
    accumulation = jsl.IntField(minimum=1, default=4)
    lr_control = jsl.NumberField(minimum=0, default=1e-5)
    lr_decoder = jsl.NumberField(minimum=0, default=5e-6)
    weight_decay = jsl.NumberField(minimum=0, default=0.01)
    multiscale = jsl.BooleanField(default=True)
    initial_checkpoint = jsl.StringField(default="2*epoch")
    checkpoint_every = jsl.IntField(minimum=1, default=250)
    log_every = jsl.IntField(minimum=1, default=50)
    device = jsl.StringField(default="cpu")


class SamplingDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    steps = jsl.IntField(minimum=1, default=50)
    seed = jsl.IntField(default=0)
    policy = jsl.StringField(enum=["uniform", "round_robin", "each"], default="uniform")
    per_label = jsl.IntField(minimum=1, default=1)
    limit = jsl.IntField(minimum=0, default=0)
    resolution = jsl.StringField(enum=["native", "train"], default="native")


class SegmentorDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    channels = jsl.IntField(minimum=4, default=32)
    steps = jsl.IntField(minimum=1, default=1500)
    lr = jsl.NumberField(minimum=0, default=6e-5)
    batch_size = jsl.IntField(minimum=1, default=8)
    log_every = jsl.IntField(minimum=1, default=50)


class RefineDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    lambda_ = jsl.NumberField(name="lambda", minimum=0, maximum=1, default=0.85)
    steps = jsl.IntField(minimum=1, default=1000)
    lr = jsl.NumberField(minimum=0, default=6e-5)
    batch_size = jsl.IntField(minimum=1, default=4)
    pseudo_threshold = jsl.NumberField(minimum=0, maximum=1, default=0.9)
    use_target = jsl.BooleanField(default=True)
    use_s2t = jsl.BooleanField(default=True)
    use_final = jsl.BooleanField(default=True)
    use_init = jsl.BooleanField(default=True)
    ratio_source = jsl.IntField(minimum=0, default=1)
    ratio_target = jsl.IntField(minimum=0, default=1)
    ratio_s2t = jsl.IntField(minimum=0, default=1)
    sweep = jsl.ArrayField(jsl.StringField(), default=["none", "0.65", "0.75", "0.85", "0.95"])
    log_every = jsl.IntField(minimum=1, default=50)


class MetricsDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    labels = jsl.IntField(minimum=1, default=30)
    images_per_label = jsl.IntField(minimum=1, default=10)
    ms_ssim_levels = jsl.IntField(minimum=1, maximum=5, default=5)
    checkpoint = jsl.StringField(default="dm-final")


class PipelineConfigDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    seed = jsl.IntField(default=0)
    paths = jsl.DocumentField(PathsDocument)
    sqlalchemy = jsl.DictField(additional_properties=True)
    dogpile_cache = jsl.DictField(additional_properties=True)
    dataset = jsl.DocumentField(DatasetDocument)
    classes = jsl.DocumentField(ClassesDocument)
    subdomains = jsl.DocumentField(SubdomainsDocument)
    conditions = jsl.DocumentField(ConditionsDocument)
    prompt = jsl.DocumentField(PromptDocument)
    rcf = jsl.DocumentField(RCFDocument)
    dm = jsl.DocumentField(DMDocument)
    sampling = jsl.DocumentField(SamplingDocument)
    segmentor = jsl.DocumentField(SegmentorDocument)
    refine = jsl.DocumentField(RefineDocument)
    metrics = jsl.DocumentField(MetricsDocument)


# the sections each artifact depends on, used for its config hash
STORE_SECTIONS = ("seed", "dataset", "classes", "subdomains", "conditions", "prompt")
SEGMENTOR_SECTIONS = ("seed", "dataset", "classes", "segmentor")
BASE_DM_SECTIONS = STORE_SECTIONS + ("dm",)
DM_SECTIONS = STORE_SECTIONS + ("rcf", "dm")
GENERATION_SECTIONS = DM_SECTIONS + ("sampling",)
REFINE_SECTIONS = GENERATION_SECTIONS + ("segmentor", "refine")

_schema = None


def get_schema():
    global _schema
    if _schema is None:
        _schema = PipelineConfigDocument.get_schema()
    return _schema


def nest(flat):
    nested = {}
    for key, value in flat.items():
        if key in IGNORED_KEYS:
            continue
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("key %s collides with a value" % key)
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError("key %s collides with a section" % key)
        node[parts[-1]] = value
    return nested


def _coerce(value, schema, path):
    kind = schema.get("type")
    try:
        if kind == "object":
            if not isinstance(value, dict):
                raise ConfigError("%s must be a section" % ".".join(path))
            value = dict(value)
            for name, sub in schema.get("properties", {}).items():
                if name in value:
                    value[name] = _coerce(value[name], sub, path + [name])
                elif "default" in sub:
                    value[name] = copy.deepcopy(sub["default"])
                elif sub.get("type") == "object":
                    value[name] = _coerce({}, sub, path + [name])
            return value
        if kind == "array":
            if isinstance(value, str):
                value = aslist(value)
            return [_coerce(v, schema.get("items", {}), path) for v in value]
        if kind == "integer" and isinstance(value, str):
            return int(value)
        if kind == "number" and isinstance(value, str):
            return float(value)
        if kind == "boolean" and isinstance(value, str):
            return asbool(value)
        if kind == "string" and not isinstance(value, str):
            return str(value)
    except ValueError:
        raise ConfigError("%s: cannot read %r as %s" % (".".join(path), value, kind))
    return value


def parse_config(settings):
    """nest, coerce and validate flat settings; returns the nested dictionary"""
    schema = get_schema()
    document = _coerce(nest(settings), schema, [])
    try:
        jsonschema.validate(document, schema)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "config"
        raise ConfigError("%s: %s" % (where, e.message))
    _check_invariants(document)
    return document


def _check_invariants(document):
    from dagen.app.conditions import validate_resolution

    names = document["classes"]["names"]
    if len(names) < 2:
        raise ConfigError("at least two classes are required")
    if len(set(names)) != len(names):
        raise ConfigError("class names must be unique")
    if 0 <= document["classes"]["ignore"] < len(names):
        raise ConfigError("ignore id %s collides with a class id" % document["classes"]["ignore"])
    if len(set(document["subdomains"]["names"])) != len(document["subdomains"]["names"]):
        raise ConfigError("subdomain names must be unique")
    cond = document["conditions"]
    ds = document["dataset"]
    decision = validate_resolution(cond["train_width"], cond["train_height"],
                                   float(ds["native_width"]) / ds["native_height"])
    if not decision:
        raise ConfigError("training resolution %sx%s rejected: %s" % (cond["train_width"], cond["train_height"], decision.reason))
    dm = document["dm"]
    if not 0 < dm["beta_start"] <= dm["beta_end"] < 1:
        raise ConfigError("dm.beta_start and dm.beta_end must satisfy 0 < start <= end < 1")
    if cond["train_width"] % dm["latent_stride"] or cond["train_height"] % dm["latent_stride"]:
        raise ConfigError("training resolution must be divisible by dm.latent_stride")
    for value in document["refine"]["sweep"]:
        if value != "none":
            try:
                lam = float(value)
            except ValueError:
                raise ConfigError("refine.sweep: %r is neither 'none' nor a number" % value)
            if not 0 <= lam <= 1:
                raise ConfigError("refine.sweep: %s outside [0, 1]" % value)


def load_config(settings, overrides=None):
    """parse settings (and optional flat overrides) into an attribute proxy"""
    merged = dict(settings)
    merged.update(overrides or {})
    return DictObjectProxy(parse_config(merged))


def config_hash(config, sections):
    document = config.as_dict() if isinstance(config, DictObjectProxy) else config
    return sha256_json({s: document.get(s) for s in sections})
