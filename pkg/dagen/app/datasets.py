# -*- coding: utf-8 -*-
"""datasets and image file i/o.

Images are float tensors (3, H, W) in [0, 1]; labels are 8 bit indexed PNGs
with IGNORE = 255; sketches 8 bit grayscale; confidences 16 bit grayscale
holding value / 65535.
"""
import glob
import logging
import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from dagen.app.conditions import IGNORE, LabelMap
from dagen.base.errors import ConditionError, ConfigError

log = logging.getLogger(__name__)

SYNTHETIC_CLASSES = ["road", "building", "vegetation", "sky", "car", "person"]
ROAD, BUILDING, VEGETATION, SKY, CAR, PERSON = range(6)

_BASE_COLORS = torch.tensor([
    [0.36, 0.35, 0.38],
    [0.58, 0.42, 0.34],
    [0.20, 0.50, 0.22],
    [0.52, 0.72, 0.95],
    [0.80, 0.12, 0.12],
    [0.90, 0.74, 0.58],
])


# file i/o

def load_image(path):
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ConditionError("cannot read image %s: %s" % (path, e))
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def _ensure_dir(path):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)


def to_uint8(image):
    array = (image.detach().float().clamp(0, 1) * 255).round().to(torch.uint8)
    return array.permute(1, 2, 0).cpu().numpy() if array.dim() == 3 else array.cpu().numpy()


def save_image(path, image):
    _ensure_dir(path)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_label(path, num_classes, ignore=IGNORE):
    try:
        with Image.open(path) as img:
            array = np.asarray(img, dtype=np.int64)
    except (OSError, ValueError) as e:
        raise ConditionError("cannot read label %s: %s" % (path, e))
    if array.ndim != 2:
        raise ConditionError("label %s is not single channel" % path)
    return LabelMap(torch.from_numpy(array.copy()), num_classes, ignore)


def save_label(path, label):
    _ensure_dir(path)
    Image.fromarray(label.classes.cpu().numpy().astype(np.uint8)).save(path, format="PNG")


def load_sketch(path):
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise ConditionError("cannot read sketch %s: %s" % (path, e))
    return torch.from_numpy(array.copy()).unsqueeze(0)


def save_sketch(path, sketch):
    _ensure_dir(path)
    Image.fromarray(to_uint8(sketch.reshape(sketch.shape[-2:]))).save(path, format="PNG")


def load_confidence(path):
    try:
        with Image.open(path) as img:
            array = np.asarray(img, dtype=np.float64) / 65535.0
    except (OSError, ValueError) as e:
        raise ConditionError("cannot read confidence map %s: %s" % (path, e))
    return torch.from_numpy(array.astype(np.float32))


def save_confidence(path, confidence):
    _ensure_dir(path)
    array = (confidence.detach().double().clamp(0, 1) * 65535).round().cpu().numpy().astype(np.uint16)
    Image.fromarray(array).save(path, format="PNG")


# procedural scenes

def _uniform(generator, low, high):
    return low + (high - low) * float(torch.rand((), generator=generator))


def _randint(generator, low, high):
    return int(torch.randint(low, high + 1, (1,), generator=generator))


def smooth(image, passes=1):
    x = image.unsqueeze(0)
    for _ in range(passes):
        x = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)
    return x[0]


def make_scene(generator, size=128, num_classes=6, with_ignore=False):
    """a street-like scene: sky over a horizon, a road, buildings with windows,
    vegetation blobs, cars and persons.

    :return: (image (3, size, size) in [0, 1], LabelMap)
    """
    if num_classes != len(SYNTHETIC_CLASSES):
        raise ConfigError("synthetic scenes have %s classes" % len(SYNTHETIC_CLASSES))
    H = W = size
    yy, xx = torch.meshgrid(torch.arange(H, dtype=torch.float32), torch.arange(W, dtype=torch.float32), indexing="ij")
    label = torch.full((H, W), SKY, dtype=torch.long)
    horizon = int(H * _uniform(generator, 0.35, 0.5))

    # buildings stand on the horizon
    x = 0
    while x < W:
        width = _randint(generator, W // 8, W // 3)
        if float(torch.rand((), generator=generator)) < 0.75:
            top = int(horizon - H * _uniform(generator, 0.1, 0.32))
            label[max(top, 0):horizon + 2, x:x + width] = BUILDING
        x += width + _randint(generator, 0, W // 10)

    for _ in range(_randint(generator, 1, 3)):
        cx, cy = _uniform(generator, 0, W), horizon - _uniform(generator, 0, H * 0.08)
        rx, ry = _uniform(generator, W * 0.05, W * 0.14), _uniform(generator, H * 0.04, H * 0.1)
        label[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1] = VEGETATION

    ground = yy >= horizon
    label[ground] = VEGETATION
    vanish = _uniform(generator, W * 0.35, W * 0.65)
    spread = (yy - horizon) / max(H - horizon, 1)
    half_width = W * (0.04 + 0.6 * spread)
    label[ground & ((xx - vanish).abs() <= half_width)] = ROAD

    for _ in range(_randint(generator, 1, 3)):
        cy = _randint(generator, horizon + (H - horizon) // 3, H - 6)
        depth = (cy - horizon) / max(H - horizon, 1)
        w, h = max(int(W * 0.22 * depth), 4), max(int(H * 0.12 * depth), 3)
        cx = int(vanish + _uniform(generator, -0.4, 0.4) * W * 0.6 * depth)
        label[max(cy - h, 0):cy, max(cx - w // 2, 0):min(cx + w // 2, W)] = CAR

    for _ in range(_randint(generator, 0, 2)):
        cy = _randint(generator, horizon + 4, H - 2)
        depth = (cy - horizon) / max(H - horizon, 1)
        h, w = max(int(H * 0.22 * depth), 4), max(int(W * 0.035 * depth), 2)
        cx = _randint(generator, 2, W - 3)
        label[max(cy - h, 0):cy, max(cx - w // 2, 0):min(cx + w // 2 + 1, W)] = PERSON

    colors = (_BASE_COLORS + 0.08 * (torch.rand(_BASE_COLORS.shape, generator=generator) - 0.5)).clamp(0, 1)
    image = colors[label].permute(2, 0, 1).clone()
    sky = label == SKY
    image[:, sky] = image[:, sky] * (0.85 + 0.3 * (yy[sky] / max(horizon, 1)))
    windows = (label == BUILDING) & ((yy.long() // 4) % 3 == 0) & ((xx.long() // 4) % 3 == 1)
    image[:, windows] = image[:, windows] * 0.55
    markings = (label == ROAD) & ((xx - vanish).abs() <= 0.6 + 0.01 * (yy - horizon)) & ((yy.long() // 6) % 2 == 0)
    image[:, markings] = 0.92
    image = smooth(image).clamp(0, 1)

    if with_ignore:
        label[:2, :] = IGNORE
        label[-2:, :] = IGNORE
        label[:, :2] = IGNORE
        label[:, -2:] = IGNORE
        for _ in range(_randint(generator, 0, 2)):
            py, px = _randint(generator, 2, H - 8), _randint(generator, 2, W - 8)
            label[py:py + 5, px:px + 5] = IGNORE
    return image, LabelMap(label, num_classes)


def adverse_transform(image, subdomain, generator):
    """deterministic adverse condition appearance for one target subdomain"""
    C, H, W = image.shape

    def noise(sigma):
        return sigma * torch.randn((1, H, W), generator=generator)

    if subdomain == "night":
        out = image * 0.32 + torch.tensor([0.0, 0.01, 0.06]).view(3, 1, 1) + noise(0.03)
        lights = (image.mean(dim=0, keepdim=True) > 0.85).float()
        out = out + 0.5 * smooth(lights, 2)
    elif subdomain == "foggy":
        haze = torch.linspace(0.75, 0.45, H).view(1, H, 1)
        out = smooth(image * (1 - haze) + 0.82 * haze, 2)
    elif subdomain == "rainy":
        streaks = (torch.rand((1, 1, W), generator=generator) < 0.06).float().expand(1, H, W)
        streaks = streaks * (torch.rand((1, H, 1), generator=generator) < 0.7).float()
        out = smooth(image * 0.68 + 0.05 + 0.25 * streaks, 1) + noise(0.015)
    elif subdomain == "snowy":
        flakes = (torch.rand((1, H, W), generator=generator) < 0.04).float()
        out = image * 0.75 + 0.22 + 0.5 * flakes
        out = smooth(out, 1)
    else:
        raise ConditionError("no adverse transform for subdomain %r" % subdomain)
    return out.clamp(0, 1)


# datasets

class Sample(object):

    def __init__(self, sample_id, image_path, label_path=None, subdomain=""):
        self.sample_id = sample_id
        self.image_path = image_path
        self.label_path = label_path
        self.subdomain = subdomain

    def __repr__(self):
        return "<Sample %s %s>" % (self.sample_id, self.subdomain)


class BaseDataset(object):
    """one split of one domain"""

    def __init__(self, samples, num_classes, ignore=IGNORE):
        self.samples = sorted(samples, key=lambda s: s.sample_id)
        self.num_classes = num_classes
        self.ignore = ignore

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def load_image(self, sample):
        return load_image(sample.image_path)

    def load_label(self, sample):
        if not sample.label_path:
            raise ConditionError("sample %s has no label" % sample.sample_id)
        return load_label(sample.label_path, self.num_classes, self.ignore)

    @property
    def labelled(self):
        return bool(self.samples) and all(s.label_path for s in self.samples)


def _png_stem(path):
    return os.path.splitext(os.path.basename(path))[0]


class SyntheticDataset(BaseDataset):
    """``<root>/source/<split>/{images,labels}`` and
    ``<root>/target/<subdomain>/<split>/{images,labels}``"""

    def __init__(self, root, domain, split, num_classes=6, subdomains=None, ignore=IGNORE):
        samples = []
        if domain == "source":
            folders = [("", os.path.join(root, "source", split))]
        elif domain == "target":
            folders = [(sd, os.path.join(root, "target", sd, split)) for sd in (subdomains or [])]
        else:
            raise ConfigError("unknown domain %r" % domain)
        for subdomain, folder in folders:
            for path in sorted(glob.glob(os.path.join(folder, "images", "*.png"))):
                stem = _png_stem(path)
                label_path = os.path.join(folder, "labels", stem + ".png")
                sample_id = "%s/%s" % (subdomain, stem) if subdomain else stem
                samples.append(Sample(sample_id, path, label_path if os.path.exists(label_path) else None, subdomain))
        super().__init__(samples, num_classes, ignore)


class CityscapesDataset(BaseDataset):
    """``leftImg8bit/<split>/<city>/*_leftImg8bit.png`` with ``gtFine/..._gtFine_labelTrainIds.png``"""

    def __init__(self, root, split, num_classes=19, ignore=IGNORE):
        samples = []
        for path in sorted(glob.glob(os.path.join(root, "leftImg8bit", split, "*", "*_leftImg8bit.png"))):
            city = os.path.basename(os.path.dirname(path))
            stem = os.path.basename(path)[:-len("_leftImg8bit.png")]
            label_path = os.path.join(root, "gtFine", split, city, stem + "_gtFine_labelTrainIds.png")
            samples.append(Sample(stem, path, label_path if os.path.exists(label_path) else None))
        super().__init__(samples, num_classes, ignore)


class ACDCDataset(BaseDataset):
    """``rgb_anon/<condition>/<split>/<sequence>/*_rgb_anon.png`` with
    ``gt/<condition>/<split>/<sequence>/*_gt_labelTrainIds.png``"""

    def __init__(self, root, split, subdomains, num_classes=19, ignore=IGNORE):
        samples = []
        for subdomain in subdomains:
            pattern = os.path.join(root, "rgb_anon", subdomain, split, "*", "*_rgb_anon.png")
            for path in sorted(glob.glob(pattern)):
                sequence = os.path.basename(os.path.dirname(path))
                stem = os.path.basename(path)[:-len("_rgb_anon.png")]
                label_path = os.path.join(root, "gt", subdomain, split, sequence, stem + "_gt_labelTrainIds.png")
                samples.append(Sample("%s/%s" % (subdomain, stem), path,
                                      label_path if os.path.exists(label_path) else None, subdomain))
        super().__init__(samples, num_classes, ignore)


def dataset_root(config):
    return os.path.join(config.paths.out, config.paths.data)


def open_dataset(config, domain, split, subdomains=None):
    """the configured dataset for ``domain`` (source|target) and ``split`` (train|val)"""
    K = len(config.classes.names)
    ignore = config.classes.ignore
    subdomains = subdomains if subdomains is not None else config.subdomains.names
    if config.dataset.kind == "synthetic":
        return SyntheticDataset(dataset_root(config), domain, split, K, subdomains, ignore)
    if domain == "source":
        return CityscapesDataset(config.dataset.cityscapes_root, split, K, ignore)
    return ACDCDataset(config.dataset.acdc_root, split, subdomains, K, ignore)


def write_synthetic_dataset(root, counts, size, subdomains, seed, num_classes=6):
    """write source train/val and per-subdomain target train/val splits.

    :param counts: dict with source, source_val, target, val image counts; target
                   counts are split evenly over the subdomains
    :return: number of images written
    """
    if not subdomains:
        raise ConfigError("the synthetic target domain needs at least one subdomain")
    written = 0
    for split, count in (("train", counts["source"]), ("val", counts["source_val"])):
        generator = torch.Generator().manual_seed(seed * 1000 + (0 if split == "train" else 1))
        folder = os.path.join(root, "source", split)
        for i in range(count):
            image, label = make_scene(generator, size, num_classes, with_ignore=True)
            save_image(os.path.join(folder, "images", "s%05d.png" % i), image)
            save_label(os.path.join(folder, "labels", "s%05d.png" % i), label)
            written += 1
    for split, total in (("train", counts["target"]), ("val", counts["val"])):
        for k, subdomain in enumerate(subdomains):
            count = total // len(subdomains) + (1 if k < total % len(subdomains) else 0)
            generator = torch.Generator().manual_seed(seed * 1000 + 10 + 2 * k + (0 if split == "train" else 1))
            folder = os.path.join(root, "target", subdomain, split)
            for i in range(count):
                image, label = make_scene(generator, size, num_classes)
                stem = "%s%05d" % (subdomain[0], i)
                save_image(os.path.join(folder, "images", stem + ".png"), adverse_transform(image, subdomain, generator))
                if split == "val":
                    save_label(os.path.join(folder, "labels", stem + ".png"), label)
                written += 1
    log.info("wrote %s synthetic images under %s", written, root)
    return written
