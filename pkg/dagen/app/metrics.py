# -*- coding: utf-8 -*-
"""generation quality: Frechet distance of feature statistics, MS-SSIM and a
perceptual distance over embedder features, combined by the paired/pooled
evaluation protocol."""
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg

from dagen.base.errors import MetricError

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
EIGEN_TOLERANCE = 1e-8


class FeatureStats(object):

    def __init__(self, mu, sigma, n):
        self.mu = mu
        self.sigma = sigma
        self.n = n

    @property
    def dim(self):
        return self.mu.shape[0]


def feature_stats(features):
    """unbiased mean and covariance of (n, d) feature vectors"""
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().double().numpy()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise MetricError("feature statistics need at least two vectors of equal dimension")
    sigma = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return FeatureStats(features.mean(axis=0), (sigma + sigma.T) / 2, features.shape[0])


def _sqrtm_psd(matrix, what):
    values, vectors = linalg.eigh(matrix)
    if values.min(initial=0.0) < -EIGEN_TOLERANCE:
        raise MetricError("%s is not positive semi-definite (smallest eigenvalue %.3e)" % (what, values.min()))
    return (vectors * np.sqrt(np.clip(values, 0, None))) @ vectors.T


def frechet_distance(a, b):
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of (S_a S_b)^(1/2) is taken from the symmetric S_a^(1/2) S_b S_a^(1/2).
    """
    if a.dim != b.dim:
        raise MetricError("feature dimensions differ: %s vs %s" % (a.dim, b.dim))
    root_a = _sqrtm_psd(a.sigma, "first covariance")
    inner = root_a @ b.sigma @ root_a
    values = linalg.eigvalsh((inner + inner.T) / 2)
    if values.min(initial=0.0) < -EIGEN_TOLERANCE:
        raise MetricError("covariance product has eigenvalue %.3e below tolerance" % values.min())
    trace_root = np.sqrt(np.clip(values, 0, None)).sum()
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * trace_root)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x, window):
    C = x.shape[1]
    w = window.to(x.dtype)
    x = F.conv2d(x, w.view(1, 1, 1, -1).repeat(C, 1, 1, 1), groups=C)
    return F.conv2d(x, w.view(1, 1, -1, 1).repeat(C, 1, 1, 1), groups=C)


def _ssim_components(x, y, window, data_range=1.0):
    """mean SSIM and mean contrast-structure term per image (valid filtering)"""
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, window), _filter(y, window)
    sxx = _filter(x * x, window) - mu_x * mu_x
    syy = _filter(y * y, window) - mu_y * mu_y
    sxy = _filter(x * y, window) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    ssim = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1) * cs
    return ssim.flatten(1).mean(dim=1), cs.flatten(1).mean(dim=1)


def max_ms_ssim_levels(height, width, window=SSIM_WINDOW):
    side = min(height, width)
    if side < window:
        return 0
    return int(math.floor(math.log2(side / window))) + 1


def ms_ssim(img_a, img_b, levels=5):
    """multi-scale SSIM of images in [0, 1]; (C,H,W) gives a float, (B,C,H,W) a tensor.

    The canonical scale weights are renormalized over the used levels, so
    ``levels=1`` is plain SSIM.
    """
    if img_a.shape != img_b.shape:
        raise MetricError("ms_ssim needs equal shapes, got %s and %s" % (tuple(img_a.shape), tuple(img_b.shape)))
    if not 1 <= levels <= len(MS_SSIM_WEIGHTS):
        raise MetricError("ms_ssim levels must lie in [1, %s]" % len(MS_SSIM_WEIGHTS))
    single = img_a.dim() == 3
    x = (img_a.unsqueeze(0) if single else img_a).double()
    y = (img_b.unsqueeze(0) if single else img_b).double()
    feasible = max_ms_ssim_levels(*x.shape[-2:])
    if levels > feasible:
        raise MetricError("images of %sx%s support at most %s MS-SSIM levels, %s requested"
                          % (x.shape[-1], x.shape[-2], feasible, levels))
    weights = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=torch.float64)
    weights = weights / weights.sum()
    window = _gaussian_window()
    terms = []
    for level in range(levels):
        ssim, cs = _ssim_components(x, y, window)
        if level == levels - 1:
            terms.append(torch.relu(ssim))
        else:
            terms.append(torch.relu(cs))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    value = torch.prod(torch.stack(terms, dim=0) ** weights.view(-1, 1), dim=0)
    return float(value[0]) if single else value


def perceptual_distance(img_a, img_b, embedder):
    """mean squared distance between channel-normalized embedder features, averaged over layers"""
    if img_a.shape != img_b.shape:
        raise MetricError("perceptual distance needs equal shapes")
    layers_a = embedder.layers(img_a)
    layers_b = embedder.layers(img_b)
    total = 0.0
    for fa, fb in zip(layers_a, layers_b):
        na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
        nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total / len(layers_a)


def paired_generation_protocol(generator, labels, real_images, embedder, images_per_label=10, levels=5,
                               reference_set=None):
    """generate ``images_per_label`` images per label; MS-SSIM and perceptual
    distance are averaged over (generated, paired real) pairs, the Frechet
    distance compares the pooled generated set with the reference set. Without
    an explicit reference set every generated image contributes its paired real
    image, so both sides hold ``images_per_label`` entries per label.

    :param generator: callable (label, index) -> image (3,H,W) in [0, 1]
    """
    if not labels:
        raise MetricError("the protocol needs at least one label")
    if len(real_images) != len(labels):
        raise MetricError("%s labels but %s paired real images" % (len(labels), len(real_images)))
    ssim_values, perceptual_values, generated_vectors = [], [], []
    for label, real in zip(labels, real_images):
        for index in range(images_per_label):
            image = generator(label, index)
            ssim_values.append(ms_ssim(image, real, levels))
            perceptual_values.append(perceptual_distance(image, real, embedder))
            generated_vectors.append(embedder.vector(image)[0])
    if reference_set is None:
        paired = [embedder.vector(img)[0] for img in real_images]
        real_vectors = torch.stack([v for v in paired for _ in range(images_per_label)])
    else:
        real_vectors = torch.stack([embedder.vector(img)[0] for img in reference_set])
    frechet = frechet_distance(feature_stats(torch.stack(generated_vectors)), feature_stats(real_vectors))
    report = {
        "frechet": frechet,
        "perceptual": float(np.mean(perceptual_values)),
        "ms_ssim": float(np.mean(ssim_values)),
        "embedder": getattr(embedder, "embedder_id", type(embedder).__name__),
        "labels": len(labels),
        "images": len(ssim_values),
    }
    log.info("metrics over %s images: %s", report["images"], report)
    return report


def format_report_table(report):
    header = "%-10s %-14s %-10s %s" % ("FID", "perceptual", "MS-SSIM", "embedder")
    row = "%-10.4f %-14.4f %-10.4f %s" % (report["frechet"], report["perceptual"], report["ms_ssim"], report["embedder"])
    return header + "\n" + row + "\n"
