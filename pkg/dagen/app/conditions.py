# -*- coding: utf-8 -*-
"""spatial input conditions: label maps, one-hot semantics, sketches,
label fusion and the two-view (global + local) training batches."""
import logging

import torch
import torch.nn.functional as F

from dagen.base.errors import ConditionError, FrameTooSmallError

log = logging.getLogger(__name__)

IGNORE = 255
RESOLUTION_MULTIPLE = 64
ASPECT_TOLERANCE = 1e-3


class LabelMap(object):
    """a 2-D grid of class indices in [0, K) or IGNORE.

    :param classes: integer tensor of shape (H, W)
    :param num_classes: K
    """

    def __init__(self, classes, num_classes, ignore=IGNORE):
        classes = torch.as_tensor(classes)
        if classes.dim() != 2:
            raise ConditionError("a label map is two dimensional, got shape %s" % (tuple(classes.shape),))
        if classes.is_floating_point():
            raise ConditionError("label maps hold integer class ids")
        if 0 <= ignore < num_classes:
            raise ConditionError("ignore id %s collides with class ids" % ignore)
        classes = classes.long()
        invalid = (classes != ignore) & ((classes < 0) | (classes >= num_classes))
        if bool(invalid.any()):
            raise ConditionError("class index %s outside [0, %s)" % (int(classes[invalid][0]), num_classes))
        self.classes = classes
        self.num_classes = num_classes
        self.ignore = ignore

    @property
    def height(self):
        return self.classes.shape[0]

    @property
    def width(self):
        return self.classes.shape[1]

    @property
    def valid(self):
        return self.classes != self.ignore

    def crop(self, top, left, height, width):
        return LabelMap(self.classes[top:top + height, left:left + width], self.num_classes, self.ignore)

    def __eq__(self, other):
        return isinstance(other, LabelMap) and self.num_classes == other.num_classes \
            and torch.equal(self.classes, other.classes)

    def __repr__(self):
        return "<LabelMap %sx%s K=%s>" % (self.height, self.width, self.num_classes)


class ResolutionDecision(object):
    def __init__(self, accepted, reason=""):
        self.accepted = accepted
        self.reason = reason

    def __bool__(self):
        return self.accepted

    def __repr__(self):
        return "<ResolutionDecision %s %s>" % ("accepted" if self.accepted else "rejected", self.reason)


class View(object):
    """one aligned training view: image (3,h,w), label, one-hot (K,h,w), sketch (1,h,w)"""

    def __init__(self, image, label, one_hot, sketch):
        self.image = image
        self.label = label
        self.one_hot = one_hot
        self.sketch = sketch


class MultiScaleBatch(object):
    def __init__(self, global_view, local_view, crop_offset):
        self.global_view = global_view
        self.local_view = local_view
        self.crop_offset = crop_offset

    @property
    def views(self):
        return [self.global_view, self.local_view]


def one_hot_encode(label, num_classes=None):
    """K channel semantic condition; IGNORE pixels are zero in every channel"""
    K = label.num_classes if num_classes is None else num_classes
    classes = label.classes
    valid = classes != label.ignore
    if bool((classes[valid] >= K).any()):
        raise ConditionError("class index >= %s" % K)
    safe = torch.where(valid, classes, torch.zeros_like(classes))
    encoded = F.one_hot(safe, K).permute(2, 0, 1).to(torch.float32)
    return encoded * valid.unsqueeze(0).to(torch.float32)


def argmax_decode(one_hot, ignore=IGNORE):
    """inverse of one_hot_encode on valid pixels; all-zero pixels decode to IGNORE"""
    classes = one_hot.argmax(dim=0)
    classes[one_hot.sum(dim=0) == 0] = ignore
    return LabelMap(classes, one_hot.shape[0], ignore)


_SOBEL_X = torch.tensor([[-1., 0., 1.], [-2., 0., 2.], [-1., 0., 1.]])


class SketchExtractor(object):
    """reference structure extractor: Sobel gradient magnitude normalized to [0, 1]
    by its maximum, then soft-thresholded. Any callable image -> (1,H,W) in [0,1]
    can replace it."""

    def __init__(self, threshold=0.1):
        if not 0 <= threshold < 1:
            raise ConditionError("sketch threshold must lie in [0, 1)")
        self.threshold = threshold

    def __call__(self, image):
        return extract_sketch(image, self.threshold)


def extract_sketch(image, threshold=0.1):
    image = torch.as_tensor(image, dtype=torch.float32)
    if image.dim() == 2:
        image = image.unsqueeze(0)
    if image.dim() != 3 or image.numel() == 0 or image.shape[0] < 1:
        raise ConditionError("cannot extract a sketch from an empty image")
    gray = image.clamp(0, 1).mean(dim=0, keepdim=True).unsqueeze(0)
    padded = F.pad(gray, (1, 1, 1, 1), mode="replicate")
    kx = _SOBEL_X.view(1, 1, 3, 3)
    ky = _SOBEL_X.t().contiguous().view(1, 1, 3, 3)
    gx = F.conv2d(padded, kx)
    gy = F.conv2d(padded, ky)
    magnitude = torch.sqrt(gx ** 2 + gy ** 2)[0]
    peak = magnitude.max()
    if peak <= 0:
        return torch.zeros_like(magnitude)
    normalized = magnitude / peak
    return ((normalized - threshold) / (1 - threshold)).clamp(0, 1)


def fuse_labels(gt, predicted):
    """fill the IGNORE pixels of a ground-truth label with a segmentor prediction"""
    if gt.classes.shape != predicted.classes.shape:
        raise ConditionError("cannot fuse labels of shape %s and %s" % (tuple(gt.classes.shape), tuple(predicted.classes.shape)))
    if gt.num_classes != predicted.num_classes:
        raise ConditionError("cannot fuse labels with %s and %s classes" % (gt.num_classes, predicted.num_classes))
    fused = torch.where(gt.classes == gt.ignore, predicted.classes, gt.classes)
    return LabelMap(fused, gt.num_classes, gt.ignore)


def validate_resolution(w, h, native_aspect):
    """decide whether (w, h) is a usable training resolution for frames of the given aspect.

    Both sides must be multiples of 64. The aspect matches when it lies within
    a relative 1e-3 of the native one, or when w is the multiple of 64 closest
    to h * native_aspect (1344x768 for 16:9 frames).
    """
    if w <= 0 or h <= 0:
        return ResolutionDecision(False, "resolution must be positive")
    if w % RESOLUTION_MULTIPLE or h % RESOLUTION_MULTIPLE:
        return ResolutionDecision(False, "not a multiple of %s" % RESOLUTION_MULTIPLE)
    aspect = float(w) / h
    if abs(aspect - native_aspect) <= ASPECT_TOLERANCE * native_aspect:
        return ResolutionDecision(True)
    nearest = RESOLUTION_MULTIPLE * round(h * native_aspect / RESOLUTION_MULTIPLE)
    if w == nearest:
        return ResolutionDecision(True, "nearest multiple of %s to the native aspect" % RESOLUTION_MULTIPLE)
    return ResolutionDecision(False, "aspect mismatch: %.4f vs native %.4f" % (aspect, native_aspect))


def resize_image(image, height, width):
    if image.shape[-2:] == (height, width):
        return image.clone()
    return F.interpolate(image.unsqueeze(0), size=(height, width), mode="area")[0]


def resize_label(label, height, width):
    if (label.height, label.width) == (height, width):
        return LabelMap(label.classes.clone(), label.num_classes, label.ignore)
    classes = F.interpolate(label.classes[None, None].float(), size=(height, width), mode="nearest")[0, 0]
    return LabelMap(classes.long(), label.num_classes, label.ignore)


def make_view(image, label, sketch):
    return View(image, label, one_hot_encode(label), sketch)


def build_multiscale_batch(image, label, sketch, train_res, generator=None):
    """a resized full frame and a native-scale random crop, both at train_res.

    :param image: (C,H,W) in [0,1]
    :param label: LabelMap of the frame
    :param sketch: (1,H,W) or (H,W) sketch of the frame
    :param train_res: (width, height)
    :param generator: torch.Generator driving the crop offset
    """
    tw, th = train_res
    H, W = image.shape[-2:]
    if sketch.dim() == 2:
        sketch = sketch.unsqueeze(0)
    if (label.height, label.width) != (H, W) or tuple(sketch.shape[-2:]) != (H, W):
        raise ConditionError("image, label and sketch must share one spatial size")
    decision = validate_resolution(tw, th, float(W) / H)
    if not decision:
        raise ConditionError("training resolution %sx%s rejected: %s" % (tw, th, decision.reason))
    if H < th or W < tw:
        raise FrameTooSmallError("frame %sx%s is smaller than the %sx%s crop" % (W, H, tw, th))

    global_view = make_view(resize_image(image, th, tw), resize_label(label, th, tw), resize_image(sketch, th, tw))

    top = int(torch.randint(0, H - th + 1, (1,), generator=generator))
    left = int(torch.randint(0, W - tw + 1, (1,), generator=generator))
    local_view = make_view(image[:, top:top + th, left:left + tw].clone(),
                           label.crop(top, left, th, tw),
                           sketch[:, top:top + th, left:left + tw].clone())
    return MultiScaleBatch(global_view, local_view, (top, left))
