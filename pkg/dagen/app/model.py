# -*- coding: utf-8 -*-
"""the condition store index and the checkpoint registry.

Files live on disk; rows hold their paths relative to the output directory,
content hashes and the config hash of the run that wrote them.
"""
import datetime
import logging

import sqlalchemy.types as ty
from sqlalchemy import Column, Table, UniqueConstraint, func, select

from dagen.metadata import DBSession, metadata

log = logging.getLogger(__name__)


def utcnow():
    return datetime.datetime.now(datetime.timezone.utc).replace(tzinfo=None)


t_conditions = Table("conditions", metadata,
    Column("id", ty.Integer, primary_key=True),
    Column("item_id", ty.String(255), nullable=False, unique=True),
    Column("domain", ty.Enum("source", "target", name="condition_domains"), nullable=False, index=True),
    Column("subdomain", ty.String(64), nullable=False, default=""),
    Column("image_path", ty.String(), nullable=False),
    Column("gt_label_path", ty.String(), nullable=True),
    Column("label_path", ty.String(), nullable=False),
    Column("sketch_path", ty.String(), nullable=False),
    Column("confidence_path", ty.String(), nullable=True),
    Column("caption", ty.String(), nullable=False, default=""),
    Column("guidance", ty.JSON(), nullable=False),
    Column("input_hash", ty.String(64), nullable=False),
    Column("content_hash", ty.String(64), nullable=False),
    Column("config_hash", ty.String(64), nullable=False),
    Column("segmentor_checkpoint", ty.String(64), nullable=True),
    Column("created_at", ty.DateTime, nullable=False, default=utcnow),
)

t_checkpoints = Table("checkpoints", metadata,
    Column("id", ty.Integer, primary_key=True),
    Column("name", ty.String(64), nullable=False, index=True),
    Column("kind", ty.Enum("dm", "segmentor", name="checkpoint_kinds"), nullable=False),
    Column("path", ty.String(), nullable=False),
    Column("content_hash", ty.String(64), nullable=False),
    Column("config_hash", ty.String(64), nullable=False),
    Column("step", ty.Integer, nullable=False, default=0),
    Column("meta", ty.JSON(), nullable=True),
    Column("created_at", ty.DateTime, nullable=False, default=utcnow),
    UniqueConstraint("name", "content_hash"),
)


class ConditionItem(object):
    """one prepared conditioning item: image, (fused) label, sketch, caption"""

    @classmethod
    def get(cls, item_id):
        return DBSession.execute(t_conditions.select().where(t_conditions.c.item_id == item_id)).mappings().fetchone()

    @classmethod
    def all(cls, domain=None, subdomain=None):
        q = t_conditions.select()
        if domain is not None:
            q = q.where(t_conditions.c.domain == domain)
        if subdomain is not None:
            q = q.where(t_conditions.c.subdomain == subdomain)
        return DBSession.execute(q.order_by(t_conditions.c.item_id)).mappings().fetchall()

    @classmethod
    def count(cls, domain=None):
        q = select(func.count()).select_from(t_conditions)
        if domain is not None:
            q = q.where(t_conditions.c.domain == domain)
        return DBSession.execute(q).scalar()

    @classmethod
    def upsert(cls, **values):
        existing = cls.get(values["item_id"])
        values.setdefault("created_at", utcnow())
        if existing:
            DBSession.execute(t_conditions.update().where(t_conditions.c.item_id == values["item_id"]).values(**values))
        else:
            DBSession.execute(t_conditions.insert().values(**values))
        DBSession.commit()


class Checkpoint(object):

    @classmethod
    def register(cls, name, kind, path, content_hash, config_hash, step=0, meta=None):
        existing = DBSession.execute(t_checkpoints.select().where(
            (t_checkpoints.c.name == name) & (t_checkpoints.c.content_hash == content_hash))).mappings().fetchone()
        if existing:
            return existing
        DBSession.execute(t_checkpoints.insert().values(
            name=name, kind=kind, path=path, content_hash=content_hash, config_hash=config_hash,
            step=step, meta=meta or {}, created_at=utcnow()))
        DBSession.commit()
        log.info("registered checkpoint %s (%s) at step %s", name, content_hash[:12], step)
        return cls.get_by_name(name)

    @classmethod
    def get_by_name(cls, name):
        """the most recently registered checkpoint of that name"""
        q = t_checkpoints.select().where(t_checkpoints.c.name == name).order_by(t_checkpoints.c.id.desc())
        return DBSession.execute(q).mappings().fetchone()

    @classmethod
    def get_by_hash(cls, content_hash):
        q = t_checkpoints.select().where(t_checkpoints.c.content_hash.startswith(content_hash))
        return DBSession.execute(q.order_by(t_checkpoints.c.id.desc())).mappings().fetchone()

    @classmethod
    def all(cls, kind=None):
        q = t_checkpoints.select()
        if kind is not None:
            q = q.where(t_checkpoints.c.kind == kind)
        return DBSession.execute(q.order_by(t_checkpoints.c.id)).mappings().fetchall()
