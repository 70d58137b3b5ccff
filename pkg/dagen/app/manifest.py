# -*- coding: utf-8 -*-
"""the append-only generation manifest: one JSON record per line, paths
relative to the manifest file"""
import json
import logging
import os

import jsl
import jsonschema

from dagen.base.errors import ManifestCollisionError, PipelineError
from dagen.base.util import canonical_json

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_DECODE_FAILED = "decode_failed"


class SamplerDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    kind = jsl.StringField(enum=["ddim"], required=True)
    steps = jsl.IntField(minimum=1, required=True)
    eta = jsl.NumberField(enum=[0], required=True)
    resolution = jsl.ArrayField(jsl.IntField(minimum=1), min_items=2, max_items=2, required=True)


class ManifestRecordDocument(jsl.Document):
    class Options(object):
        additional_properties = False

    record_id = jsl.StringField(required=True)
    item_id = jsl.StringField(required=True)
    condition_source = jsl.StringField(enum=["source_labels", "target_prior"], required=True)
    label_path = jsl.StringField(required=True)
    gt_label_path = jsl.OneOfField([jsl.StringField(), jsl.NullField()], required=True)
    sketch_path = jsl.StringField(required=True)
    prompt = jsl.StringField(required=True)
    subdomain = jsl.StringField(required=True)
    seed = jsl.IntField(minimum=0, required=True)
    checkpoint = jsl.StringField(required=True)
    checkpoint_hash = jsl.StringField(required=True)
    config_hash = jsl.StringField(required=True)
    sampler = jsl.DocumentField(SamplerDocument, required=True)
    status = jsl.StringField(enum=[STATUS_OK, STATUS_DECODE_FAILED], required=True)
    image_path = jsl.OneOfField([jsl.StringField(), jsl.NullField()], required=True)
    image_hash = jsl.OneOfField([jsl.StringField(), jsl.NullField()], required=True)
    error = jsl.OneOfField([jsl.StringField(), jsl.NullField()])


_record_schema = None


def record_schema():
    global _record_schema
    if _record_schema is None:
        _record_schema = ManifestRecordDocument.get_schema()
    return _record_schema


def validate_record(record):
    try:
        jsonschema.validate(record, record_schema())
    except jsonschema.ValidationError as e:
        raise PipelineError("invalid manifest record %s: %s" % (record.get("record_id"), e.message))


def record_key(record):
    return (record["seed"], record["label_path"], record["checkpoint"], record["subdomain"])


class GenerationManifest(object):
    """records are only ever appended; every (seed, label, checkpoint, subdomain)
    tuple has at most one ``ok`` record. A later line for the same tuple
    supersedes a failed one, so ``records`` holds the latest record per tuple."""

    def __init__(self, path):
        self.path = path
        self.root = os.path.dirname(os.path.abspath(path))
        self.records = []
        self._keys = {}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                for n, line in enumerate(f, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = json.loads(line)
                    except ValueError:
                        raise PipelineError("%s:%s is not a JSON record" % (path, n))
                    validate_record(record)
                    self._remember(record)

    def _superseded(self, record):
        """the failed record ``record`` retries, None for a new tuple"""
        previous = self._keys.get(record_key(record))
        if previous is not None and previous["status"] == STATUS_OK:
            raise ManifestCollisionError("manifest %s already holds seed %s for %s (%s, %s)"
                                         % (self.path, record["seed"], record["label_path"],
                                            record["checkpoint"], record["subdomain"]))
        return previous

    def _remember(self, record):
        previous = self._superseded(record)
        if previous is not None:
            self.records.remove(previous)
        self._keys[record_key(record)] = record
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def relative(self, path):
        return os.path.relpath(os.path.abspath(path), self.root)

    def resolve(self, relative_path):
        return os.path.join(self.root, relative_path)

    def lookup(self, seed, label_path, checkpoint, subdomain):
        return self._keys.get((seed, label_path, checkpoint, subdomain))

    def ok_records(self):
        return [r for r in self.records if r["status"] == STATUS_OK]

    def append(self, record):
        validate_record(record)
        self._superseded(record)
        referenced = [record["label_path"], record["sketch_path"]]
        if record["gt_label_path"]:
            referenced.append(record["gt_label_path"])
        if record["status"] == STATUS_OK:
            referenced.append(record["image_path"])
        missing = [p for p in referenced if not os.path.exists(self.resolve(p))]
        if missing:
            raise PipelineError("manifest record %s references missing files: %s"
                                % (record["record_id"], ", ".join(missing)))
        os.makedirs(self.root, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(canonical_json(record) + "\n")
            f.flush()
            os.fsync(f.fileno())
        self._remember(record)
