# -*- coding: utf-8 -*-
"""checkpoint containers: one immutable torch archive per checkpoint holding
the named parameters, the noise schedule and a metadata record, stored under
a content hashed file name and indexed in the checkpoint registry."""
import hashlib
import io
import logging
import os

import torch

from dagen.app.cache import get_cache
from dagen.app.diffusion import NoiseSchedule
from dagen.app.model import Checkpoint
from dagen.base.errors import CheckpointError, StageRefusedError

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"


def _cpu_state(state_dict):
    return {k: v.detach().cpu().clone() for k, v in state_dict.items()}


def save_checkpoint(out_dir, name, kind, state_dict, config_hash, step=0, schedule=None, metadata=None):
    """write (or reuse) the archive and register it under ``name``; returns the registry row"""
    meta = dict(metadata or {})
    meta.update({"name": name, "kind": kind, "step": step, "config_hash": config_hash})
    archive = {
        "parameters": _cpu_state(state_dict),
        "schedule": schedule.as_dict() if schedule is not None else None,
        "metadata": meta,
    }
    buffer = io.BytesIO()
    torch.save(archive, buffer)
    payload = buffer.getvalue()
    content_hash = hashlib.sha256(payload).hexdigest()
    relative = os.path.join(CHECKPOINT_DIR, "%s-%s.pt" % (name, content_hash[:16]))
    path = os.path.join(out_dir, relative)
    if not os.path.exists(path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    return Checkpoint.register(name, kind, relative, content_hash, config_hash, step, meta)


def resolve_checkpoint(reference):
    """registry row for a checkpoint name or (a prefix of) its content hash"""
    row = Checkpoint.get_by_name(reference)
    if row is None and len(reference) >= 8:
        row = Checkpoint.get_by_hash(reference)
    if row is None:
        raise CheckpointError("unknown checkpoint %r" % reference)
    return row


def _read(path, content_hash):
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError("cannot read checkpoint %s: %s" % (path, e))
    if hashlib.sha256(payload).hexdigest() != content_hash:
        raise CheckpointError("checkpoint %s does not match its content hash" % path)
    archive = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)
    if archive.get("schedule") is not None:
        archive["schedule"] = NoiseSchedule.from_dict(archive["schedule"])
    return archive


def load_checkpoint(out_dir, reference, kind=None, expected_config_hash=None):
    """the archive of a registered checkpoint, verified against its content hash.

    Raises StageRefusedError when the checkpoint was written under another
    config hash than ``expected_config_hash``.
    """
    row = resolve_checkpoint(reference)
    if kind is not None and row["kind"] != kind:
        raise CheckpointError("checkpoint %s is a %s checkpoint, not %s" % (reference, row["kind"], kind))
    if expected_config_hash is not None and row["config_hash"] != expected_config_hash:
        raise StageRefusedError("checkpoint %s was written with config hash %s, current config has %s"
                                % (reference, row["config_hash"][:12], expected_config_hash[:12]))
    path = os.path.join(out_dir, row["path"])
    archive = get_cache("checkpoints").get_or_create(row["content_hash"], lambda: _read(path, row["content_hash"]))
    return row, archive
