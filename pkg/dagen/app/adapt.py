# -*- coding: utf-8 -*-
"""target prior acquisition and the selective supervision of generated images"""
import logging

import torch
import torch.nn.functional as F

from dagen.app.conditions import IGNORE, LabelMap
from dagen.base.errors import AdaptationError, ConditionError

log = logging.getLogger(__name__)


class PriorRecord(object):

    def __init__(self, sample_id, label, confidence, checkpoint_id=None, subdomain=""):
        self.sample_id = sample_id
        self.label = label
        self.confidence = confidence
        self.checkpoint_id = checkpoint_id
        self.subdomain = subdomain


def generate_target_prior(dataset, segmentor, checkpoint_id=None):
    """one predicted label and confidence map per readable target image"""
    priors = []
    for sample in dataset:
        try:
            image = dataset.load_image(sample)
        except ConditionError as e:
            log.warning("skipping %s: %s", sample.sample_id, e.message)
            continue
        label, confidence = segmentor.predict(image)
        priors.append(PriorRecord(sample.sample_id, label, confidence, checkpoint_id, sample.subdomain))
    if not priors:
        raise AdaptationError("no target prior could be generated")
    log.info("generated %s target priors with %s", len(priors), checkpoint_id)
    return priors


class SelectionMask(object):

    def __init__(self, mask, stats):
        self.mask = mask
        self.stats = stats

    def __repr__(self):
        return "<SelectionMask %s>" % self.stats


def build_selection_mask(y_s, y_pred, confidence, lam):
    """pixels of the source label that supervise an image generated from it.

    Agreeing pixels are kept. Disagreeing pixels are kept when the segmentor is
    unsure (confidence < lam) and dropped as false generation otherwise.
    IGNORE pixels never supervise.
    """
    if not 0 <= lam <= 1:
        raise AdaptationError("lambda must lie in [0, 1], got %s" % lam)
    gt = y_s.classes if isinstance(y_s, LabelMap) else y_s
    pred = y_pred.classes if isinstance(y_pred, LabelMap) else y_pred
    ignore = y_s.ignore if isinstance(y_s, LabelMap) else IGNORE
    confidence = torch.as_tensor(confidence)
    if gt.shape != pred.shape or gt.shape != confidence.shape:
        raise AdaptationError("selection inputs differ in shape: %s, %s, %s"
                              % (tuple(gt.shape), tuple(pred.shape), tuple(confidence.shape)))
    valid = gt != ignore
    agree = valid & (pred == gt)
    disagree = valid & ~agree
    low = disagree & (confidence < lam)
    high = disagree & ~low
    stats = {
        "agree": int(agree.sum()),
        "low_conf_disagree": int(low.sum()),
        "high_conf_disagree": int(high.sum()),
        "ignore": int((~valid).sum()),
    }
    return SelectionMask(agree | low, stats)


def masked_cross_entropy(logits, y_s, mask):
    """mean cross entropy over masked pixels; an empty mask gives 0 with zero gradient

    :param logits: (B,K,H,W) or (K,H,W)
    :param y_s: class ids (B,H,W) or (H,W), or a LabelMap
    :param mask: boolean, same shape as y_s
    """
    target = y_s.classes if isinstance(y_s, LabelMap) else y_s
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
        mask = mask.unsqueeze(0)
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:] or mask.shape != target.shape:
        raise AdaptationError("logits %s do not align with targets %s" % (tuple(logits.shape), tuple(target.shape)))
    if not bool(torch.isfinite(logits).all()):
        raise AdaptationError("non-finite logits")
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        return (logits * 0).sum()
    safe = torch.where(mask, target, torch.zeros_like(target)).clamp(0, logits.shape[1] - 1)
    ce = F.cross_entropy(logits, safe, reduction="none")
    return (ce * mask).sum() / mask.sum()


def total_uda_loss(base_loss, s2t_loss):
    return base_loss + s2t_loss


def pseudo_labels(logits, threshold):
    """on-the-fly pseudo labels and the mask of confident pixels"""
    probs = F.softmax(logits.detach(), dim=1)
    confidence, labels = probs.max(dim=1)
    return labels, confidence >= threshold


def baseline_terms(segmentor, source_batch, target_batch, pseudo_threshold=0.9, ignore=IGNORE):
    """(supervised source term, self-training target term)"""
    images, labels = source_batch
    source = masked_cross_entropy(segmentor(images), labels, labels != ignore)
    if target_batch is None or target_batch.shape[0] == 0:
        return source, source.new_zeros(())
    logits = segmentor(target_batch)
    labels_t, confident = pseudo_labels(logits, pseudo_threshold)
    return source, masked_cross_entropy(logits, labels_t, confident)


def baseline_loss(segmentor, source_batch, target_batch, pseudo_threshold=0.9, ignore=IGNORE):
    """stand-in for the baseline UDA objective: source cross entropy plus
    confidence thresholded self-training on target images"""
    source, target = baseline_terms(segmentor, source_batch, target_batch, pseudo_threshold, ignore)
    loss = source + target
    if not bool(torch.isfinite(loss)):
        raise AdaptationError("non-finite baseline loss (source %s, target %s)" % (float(source), float(target)))
    return loss
