# -*- coding: utf-8 -*-
"""residual condition fusion of the semantic and the structure condition:

    c_f = c_seg + K(c_str * (1 + A(c_str)) + c_seg)

A is a tanh gate broadcast over the feature channels, K a 1x1 channel mix.
"""
import copy
import logging
import math

import torch
from torch import nn

from dagen.base.errors import RCFError
from dagen.base.gradcheck import max_gradient_error

log = logging.getLogger(__name__)

MAX_GRADCHECK_ELEMENTS = 8 * 8 * 4
MIN_ENCODER_BLOCKS = 3


class RCFConfig(object):
    def __init__(self, in_channels_semantic, feature_channels=32, spatial_stride=2, zero_init_mix=True,
                 in_channels_structure=1, hidden_channels=16, kernel_size=3, linear=False,
                 use_structure=True, use_attention=True):
        if spatial_stride < 1 or spatial_stride & (spatial_stride - 1):
            raise RCFError("spatial stride must be a power of two, got %s" % spatial_stride)
        if kernel_size not in (1, 3):
            raise RCFError("encoder kernel size must be 1 or 3")
        self.in_channels_semantic = in_channels_semantic
        self.in_channels_structure = in_channels_structure
        self.feature_channels = feature_channels
        self.hidden_channels = hidden_channels
        self.spatial_stride = spatial_stride
        self.zero_init_mix = zero_init_mix
        self.kernel_size = kernel_size
        self.linear = linear
        self.use_structure = use_structure
        self.use_attention = use_attention

    @classmethod
    def from_config(cls, config):
        return cls(in_channels_semantic=len(config.classes.names),
                   feature_channels=config.rcf.feature_channels,
                   hidden_channels=config.rcf.hidden_channels,
                   spatial_stride=config.dm.latent_stride,
                   zero_init_mix=config.rcf.zero_init_mix,
                   use_structure=config.rcf.use_structure,
                   use_attention=config.rcf.use_attention)

    def as_dict(self):
        return dict(self.__dict__)


class ConditionEncoder(nn.Module):
    """conv blocks down to the conditioning resolution: one input block, one
    strided block per halving and unstrided refinement blocks up to
    MIN_ENCODER_BLOCKS, then an output projection"""

    def __init__(self, in_channels, hidden_channels, out_channels, stride, kernel_size=3, linear=False):
        super().__init__()
        self.in_channels = in_channels
        padding = kernel_size // 2
        act = nn.Identity if linear else nn.SiLU
        layers = [nn.Conv2d(in_channels, hidden_channels, kernel_size, padding=padding), act()]
        halvings = int(math.log2(stride))
        for _ in range(halvings):
            # a 1x1 kernel with stride keeps the map pointwise
            layers += [nn.Conv2d(hidden_channels, hidden_channels, kernel_size, stride=2, padding=padding), act()]
        for _ in range(MIN_ENCODER_BLOCKS - 1 - halvings):
            layers += [nn.Conv2d(hidden_channels, hidden_channels, kernel_size, padding=padding), act()]
        layers.append(nn.Conv2d(hidden_channels, out_channels, kernel_size, padding=padding))
        self.blocks = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise RCFError("expected %s condition channels, got shape %s" % (self.in_channels, tuple(x.shape)))
        return self.blocks(x)


class ResidualConditionFusion(nn.Module):

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_channels
        self.semantic_encoder = ConditionEncoder(cfg.in_channels_semantic, cfg.hidden_channels, c,
                                                 cfg.spatial_stride, cfg.kernel_size, cfg.linear)
        self.structure_encoder = ConditionEncoder(cfg.in_channels_structure, cfg.hidden_channels, c,
                                                  cfg.spatial_stride, cfg.kernel_size, cfg.linear)
        self.attention = nn.Conv2d(c, 1, cfg.kernel_size, padding=cfg.kernel_size // 2)
        nn.init.zeros_(self.attention.bias)
        self.mix = nn.Conv2d(c, c, 1)
        if cfg.zero_init_mix:
            nn.init.zeros_(self.mix.weight)
            nn.init.zeros_(self.mix.bias)

    def encode_semantic(self, one_hot):
        return self.semantic_encoder(one_hot)

    def encode_structure(self, sketch):
        return self.structure_encoder(sketch)

    def gate(self, c_str):
        """the structure multiplier 1 + A(c_str), in (0, 2)"""
        if not self.cfg.use_attention:
            return torch.ones_like(c_str[:, :1])
        return 1 + torch.tanh(self.attention(c_str))

    def fuse(self, c_seg, c_str):
        if c_seg.shape != c_str.shape:
            raise RCFError("cannot fuse c_seg %s with c_str %s" % (tuple(c_seg.shape), tuple(c_str.shape)))
        if not self.cfg.use_structure:
            return c_seg + self.mix(c_seg)
        return c_seg + self.mix(c_str * self.gate(c_str) + c_seg)

    def forward(self, one_hot, sketch):
        c_seg = self.encode_semantic(one_hot)
        if not self.cfg.use_structure:
            return self.fuse(c_seg, torch.zeros_like(c_seg))
        return self.fuse(c_seg, self.encode_structure(sketch))


def rcf_gradcheck(module, inputs, epsilon=1e-4, weights_seed=0):
    """max relative error between autograd and central differences for a fixed
    random linear functional of c_f, w.r.t. the inputs and all parameters.

    Runs on a 64 bit copy; the module passed in is left untouched.
    """
    one_hot, sketch = inputs
    twin = copy.deepcopy(module).double()
    one_hot = one_hot.detach().double().clone().requires_grad_(True)
    sketch = sketch.detach().double().clone().requires_grad_(True)
    with torch.no_grad():
        shape = twin(one_hot, sketch).shape
    if shape[1] * shape[2] * shape[3] > MAX_GRADCHECK_ELEMENTS:
        raise RCFError("gradient check expects fused features of at most 8x8x4, got %s" % (tuple(shape[1:]),))
    generator = torch.Generator().manual_seed(weights_seed)
    weights = torch.randn(shape, generator=generator, dtype=torch.float64)

    def functional():
        return (twin(one_hot, sketch) * weights).sum()

    tensors = [one_hot, sketch] + [p for p in twin.parameters()]
    for p in twin.parameters():
        p.requires_grad_(True)
    return max_gradient_error(functional, tensors, epsilon, error=RCFError)
