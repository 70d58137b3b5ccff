import torch

from dagen.app.conditions import IGNORE, LabelMap
from dagen.app.config import load_config


class Undefined():
    pass

undefined = Undefined()


default_settings = {
    "seed": "0",
    "paths.data": "data",
    "dataset.size": "64",
    "dataset.native_width": "64",
    "dataset.native_height": "64",
    "dataset.source_count": "4",
    "dataset.source_val_count": "2",
    "dataset.target_count": "4",
    "dataset.val_count": "4",
    "dataset.seed": "3",
    "classes.names": "road building vegetation sky car person",
    "subdomains.names": "night foggy",
    "conditions.train_width": "64",
    "conditions.train_height": "64",
    "prompt.embedding_width": "16",
    "prompt.embedding_buckets": "64",
    "rcf.feature_channels": "8",
    "rcf.hidden_channels": "4",
    "dm.timesteps": "20",
    "dm.model_channels": "8",
    "dm.pretrain_steps": "2",
    "dm.pretrain_lr": "1e-3",
    "dm.steps": "4",
    "dm.micro_batch": "2",
    "dm.accumulation": "2",
    "dm.lr_control": "1e-3",
    "dm.lr_decoder": "1e-3",
    "dm.initial_checkpoint": "1",
    "dm.checkpoint_every": "1",
    "dm.log_every": "1",
    "sampling.steps": "4",
    "segmentor.channels": "4",
    "segmentor.steps": "2",
    "segmentor.batch_size": "2",
    "segmentor.lr": "1e-3",
    "refine.steps": "2",
    "refine.batch_size": "1",
    "refine.sweep": "none 0.85",
    "metrics.labels": "2",
    "metrics.images_per_label": "1",
    "metrics.ms_ssim_levels": "3",
    "dogpile_cache.checkpoints.backend": "dogpile.cache.memory",
    "dogpile_cache.prompt_embeddings.backend": "dogpile.cache.memory",
}


def make_settings(out=undefined, overrides=None):
    settings = dict(default_settings)
    if out is not undefined:
        settings["paths.out"] = out
    settings.update(overrides or {})
    return settings


def make_config(out=undefined, overrides=None):
    return load_config(make_settings(out, overrides))


def label_map(rows, num_classes=6, ignore=IGNORE):
    return LabelMap(torch.tensor(rows, dtype=torch.long), num_classes, ignore)


def random_label(generator, height=8, width=8, num_classes=6, ignore_fraction=0.1):
    classes = torch.randint(0, num_classes, (height, width), generator=generator)
    ignored = torch.rand((height, width), generator=generator) < ignore_fraction
    classes[ignored] = IGNORE
    return LabelMap(classes, num_classes)


def step_image(size=4, column=2):
    """a gray image that is 0 left of ``column`` and 1 from it on"""
    image = torch.zeros(3, size, size)
    image[:, :, column:] = 1.0
    return image


class PerfectDenoiser(object):
    """test double that predicts exactly the noise it is handed via ``eps``"""

    def __init__(self, z0, schedule):
        self.z0 = z0
        self.schedule = schedule

    def __call__(self, z_tau, tau, prompt_emb, c_f=None):
        ab = self.schedule.alpha_bar[tau.cpu()].to(z_tau.dtype).view(-1, *([1] * (z_tau.dim() - 1)))
        return (z_tau - torch.sqrt(ab) * self.z0) / torch.sqrt(1 - ab)


class ZeroDenoiser(object):

    def __call__(self, z_tau, tau, prompt_emb, c_f=None):
        return torch.zeros_like(z_tau)
