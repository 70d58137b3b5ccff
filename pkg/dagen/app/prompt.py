# -*- coding: utf-8 -*-
"""enhanced prompts: "<subdomain>, <caption>, with <classes>." plus dropout and
the text encoder turning prompts into fixed width embeddings."""
import hashlib
import logging
import re
import zlib

import torch

from dagen.app.cache import get_cache
from dagen.base.errors import PromptError

log = logging.getLogger(__name__)

EMPTY_PROMPT = ""


class PromptRecord(object):
    def __init__(self, subdomain, caption, label_guidance, composed):
        self.subdomain = subdomain
        self.caption = caption
        self.label_guidance = list(label_guidance)
        self.composed = composed

    def as_dict(self):
        return {
            "subdomain": self.subdomain,
            "caption": self.caption,
            "label_guidance": self.label_guidance,
            "composed": self.composed,
        }

    def __repr__(self):
        return "<PromptRecord %r>" % self.composed


def label_guidance(label, class_names, min_fraction=0.0):
    """class names present in the label, most frequent first (ties by class index)"""
    if len(class_names) != label.num_classes:
        raise PromptError("%s class names for %s classes" % (len(class_names), label.num_classes))
    valid = label.classes[label.valid]
    total = valid.numel()
    if total == 0:
        return []
    counts = torch.bincount(valid.flatten(), minlength=label.num_classes).tolist()
    present = [c for c, n in enumerate(counts) if n > 0 and float(n) / total >= min_fraction]
    present.sort(key=lambda c: (-counts[c], c))
    return [class_names[c] for c in present]


def canonical_caption(caption):
    """captions may not contain commas; they are replaced by spaces"""
    return re.sub(r"\s+", " ", (caption or "").replace(",", " ")).strip()


def compose_prompt(subdomain, caption, guidance):
    parts = []
    if subdomain:
        parts.append(subdomain)
    caption = canonical_caption(caption)
    if caption:
        parts.append(caption)
    if guidance:
        parts.append("with " + ", ".join(guidance))
    if not parts:
        return EMPTY_PROMPT
    return ", ".join(parts) + "."


def make_prompt_record(subdomain, caption, guidance, subdomains, class_names):
    if subdomain and subdomain not in subdomains:
        raise PromptError("unknown subdomain %r" % subdomain)
    unknown = [c for c in guidance if c not in class_names]
    if unknown:
        raise PromptError("unknown class names in label guidance: %s" % ", ".join(unknown))
    if len(set(guidance)) != len(guidance):
        raise PromptError("duplicate class names in label guidance")
    return PromptRecord(subdomain or "", canonical_caption(caption), guidance,
                        compose_prompt(subdomain, caption, guidance))


def apply_prompt_dropout(text, p, generator=None):
    """the empty prompt with probability p, else the text unchanged"""
    if not 0 <= p <= 1:
        raise PromptError("prompt dropout must lie in [0, 1], got %s" % p)
    draw = float(torch.rand((), generator=generator))
    return EMPTY_PROMPT if draw < p else text


class ConstantCaptionProvider(object):
    """stands in for an image captioning model"""

    def __init__(self, caption="a photo of a street scene"):
        self.caption = caption

    def __call__(self, image):
        return self.caption


class HashedBagOfTokensEncoder(object):
    """a text encoder: lower-cased word tokens are hashed into buckets, each bucket
    owns a fixed random vector, the prompt embedding is their mean.

    The empty prompt encodes to the zero vector.
    """

    def __init__(self, width=64, buckets=1024, seed=0):
        self.width = width
        self.buckets = buckets
        self.seed = seed
        generator = torch.Generator().manual_seed(seed)
        self.table = torch.randn(buckets, width, generator=generator) / width ** 0.5

    @property
    def encoder_id(self):
        return "hashed-bag-%s-%s-%s" % (self.width, self.buckets, self.seed)

    def tokens(self, text):
        return re.findall(r"[a-z0-9]+", text.lower())

    def _encode(self, text):
        ids = [zlib.crc32(t.encode("utf-8")) % self.buckets for t in self.tokens(text)]
        if not ids:
            return torch.zeros(self.width)
        return self.table[torch.tensor(ids)].mean(dim=0)

    def encode(self, text):
        key = "%s:%s" % (self.encoder_id, hashlib.sha1(text.encode("utf-8")).hexdigest())
        return get_cache("prompt_embeddings").get_or_create(key, lambda: self._encode(text)).clone()

    def encode_batch(self, texts):
        return torch.stack([self.encode(t) for t in texts])


def text_encoder_from_config(config):
    return HashedBagOfTokensEncoder(width=config.prompt.embedding_width,
                                    buckets=config.prompt.embedding_buckets,
                                    seed=config.prompt.embedding_seed)
