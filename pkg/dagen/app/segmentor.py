# -*- coding: utf-8 -*-
"""the toy segmentor and mIoU evaluation"""
import logging

import torch
import torch.nn.functional as F
from torch import nn

from dagen.app.conditions import IGNORE, LabelMap
from dagen.base.errors import AdaptationError

log = logging.getLogger(__name__)


def _block(in_channels, out_channels):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.GroupNorm(4 if out_channels % 4 == 0 else 1, out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class ToySegmentor(nn.Module):
    """small encoder-decoder producing K channel logits at input resolution.

    ``predict`` is the segmentor interface the pipeline relies on; any model
    offering it (and ``forward`` for training) can replace this one.
    """

    def __init__(self, num_classes, channels=32):
        super().__init__()
        c = channels
        self.num_classes = num_classes
        self.enc1 = _block(3, c)
        self.enc2 = _block(c, 2 * c)
        self.enc3 = _block(2 * c, 4 * c)
        self.dec2 = _block(4 * c + 2 * c, 2 * c)
        self.dec1 = _block(2 * c + c, c)
        self.head = nn.Conv2d(c, num_classes, 1)

    @property
    def trainable(self):
        return any(p.requires_grad for p in self.parameters())

    def forward(self, images):
        x = images * 2 - 1
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, size=e2.shape[-2:], mode="bilinear", align_corners=False), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False), e1], dim=1))
        return self.head(d1)

    @torch.no_grad()
    def predict(self, image):
        """(LabelMap, confidence) of one (3,H,W) image; confidence is the max softmax"""
        was_training = self.training
        self.eval()
        try:
            probs = F.softmax(self(image.unsqueeze(0)), dim=1)[0]
        finally:
            self.train(was_training)
        confidence, classes = probs.max(dim=0)
        return LabelMap(classes, self.num_classes), confidence


def build_segmentor(config):
    return ToySegmentor(len(config.classes.names), config.segmentor.channels)


def confusion_matrix(prediction, target, num_classes, ignore=IGNORE):
    valid = target != ignore
    index = target[valid] * num_classes + prediction[valid]
    return torch.bincount(index.flatten(), minlength=num_classes * num_classes).view(num_classes, num_classes)


def iou_from_confusion(confusion, class_names):
    """per-class IoU; classes absent from both prediction and ground truth are left out"""
    confusion = confusion.double()
    tp = confusion.diag()
    union = confusion.sum(dim=0) + confusion.sum(dim=1) - tp
    per_class = {}
    for k, name in enumerate(class_names):
        if union[k] > 0:
            per_class[name] = float(tp[k] / union[k])
    miou = sum(per_class.values()) / len(per_class) if per_class else 0.0
    return per_class, miou


def evaluate_miou(segmentor, dataset, class_names):
    """mIoU (in percent) over a labelled dataset split"""
    if not dataset.labelled:
        raise AdaptationError("mIoU needs a labelled dataset")
    K = len(class_names)
    confusion = torch.zeros(K, K, dtype=torch.long)
    for sample in dataset:
        label = dataset.load_label(sample)
        predicted, _ = segmentor.predict(dataset.load_image(sample))
        confusion += confusion_matrix(predicted.classes, label.classes, K, label.ignore)
    per_class, miou = iou_from_confusion(confusion, class_names)
    return {
        "miou": 100.0 * miou,
        "per_class": {name: 100.0 * v for name, v in per_class.items()},
        "images": len(dataset),
    }
