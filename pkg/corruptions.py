"""
Synthetic corruptions standing in for a corruption benchmark.

Each corruption is a pure function of (images, severity parameters, seed);
only gaussian_noise consumes randomness. Severity parameters come from
configs/corruptions.yaml.
"""

import math
import logging
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from config import Config
from exceptions import ConfigurationError
from pyramid_attack import ImageBatch
from utils import make_generator

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ("gaussian_noise", "gaussian_blur", "contrast", "jpeg_blockiness_proxy")


@lru_cache(maxsize=None)
def _default_table():
    return Config.load_corruption_table()


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigurationError(f"Unknown corruption '{self.kind}', expected one of {CORRUPTION_KINDS}")
        if not 1 <= int(self.severity) <= 5:
            raise ConfigurationError(f"Corruption severity must be in 1..5, got {self.severity}")

    def params(self, table=None):
        table = table or _default_table()
        if self.kind not in table:
            raise ConfigurationError(f"Corruption table has no row for '{self.kind}'")
        return table[self.kind][int(self.severity) - 1]


def full_suite(kinds=CORRUPTION_KINDS, severities=(1, 2, 3, 4, 5)):
    return [CorruptionSpec(kind, severity) for kind in kinds for severity in severities]


def _gaussian_noise(x, params, seed):
    if isinstance(seed, int):
        noise = torch.randn(x.shape, generator=make_generator(seed), dtype=x.dtype)
    else:
        # one stream per image, independent of how images are batched
        noise = torch.stack([
            torch.randn(x.shape[1:], generator=make_generator(s), dtype=x.dtype) for s in seed
        ])
    return x + params["sigma"] * noise.to(x.device)


def _gaussian_blur(x, params, seed):
    sigma = float(params["sigma"])
    kernel = 2 * math.ceil(3 * sigma) + 1
    return TF.gaussian_blur(x, kernel_size=[kernel, kernel], sigma=[sigma, sigma])


def _contrast(x, params, seed):
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean) * params["c"] + mean


def _jpeg_blockiness_proxy(x, params, seed):
    block = int(params["block"])
    h, w = x.shape[-2:]
    means = F.avg_pool2d(x, block, stride=block, ceil_mode=True)
    means = means.repeat_interleave(block, dim=-2).repeat_interleave(block, dim=-1)[..., :h, :w]
    mixed = (1.0 - params["blend"]) * x + params["blend"] * means
    steps = params["levels"] - 1
    return torch.round(mixed.clamp(0.0, 1.0) * steps) / steps


_CORRUPTIONS = {
    "gaussian_noise": _gaussian_noise,
    "gaussian_blur": _gaussian_blur,
    "contrast": _contrast,
    "jpeg_blockiness_proxy": _jpeg_blockiness_proxy,
}


def corrupt(batch, spec, seed, table=None):
    """
    Apply a corruption at a given severity

    Args:
        batch (ImageBatch): clean images in [0, 1]
        spec (CorruptionSpec): kind and severity
        seed (int or list): noise seed, or one seed per image (ignored by
            deterministic corruptions)
        table (dict, optional): severity table, defaults to configs/corruptions.yaml

    Returns:
        ImageBatch: corrupted images clipped to [0, 1], labels unchanged
    """
    params = spec.params(table)
    out = _CORRUPTIONS[spec.kind](batch.pixels, params, seed)
    return ImageBatch(out.clamp(0.0, 1.0), batch.labels)
