"""
Desk-scale Vision Transformer whose dropout masks and stochastic-depth gates
come from an explicit DropConfig instead of module-internal randomness.

A DropConfig is a realization: asking it twice for the mask of the same site
and shape gives the same tensor, so the clean forward, every attack forward
and the adversarial forward of one training step can share masks exactly.
"""

import logging
from dataclasses import dataclass, replace, asdict
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from exceptions import ConfigurationError, StructuralError
from utils import derive_seed, make_generator

logger = logging.getLogger(__name__)


class DropMode(str, Enum):
    MATCHED = "matched"
    UNMATCHED = "unmatched"
    DISABLED_ADV = "disabled_adv"
    DISABLED_ALL = "disabled_all"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 6
    n_heads: int = 4
    mlp_dim: int = 128
    n_classes: int = 10
    dropout_p: float = 0.1
    stochdepth_p: float = 0.1
    in_channels: int = 3
    use_pos_embed: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "depth", "n_heads", "mlp_dim", "n_classes", "in_channels"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"model.{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}"
            )
        if self.embed_dim % self.n_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}"
            )
        for name in ("dropout_p", "stochdepth_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigurationError(f"model.{name} must be in [0, 1), got {p}")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DropConfig:
    """
    One realization of every dropout mask and stochastic-depth gate.

    Masks are keyed by (seed, site path, batch index), so an example keeps its
    mask whatever batch it sits in. An inactive config keeps everything.
    """
    mode: DropMode = DropMode.MATCHED
    seed: int = 0
    dropout_p: float = 0.0
    stochdepth_p: float = 0.0
    active: bool = True
    adv_dropout_p: float = None
    adv_stochdepth_p: float = None

    def _bernoulli(self, site, shape, keep, dtype, device):
        shape = tuple(shape)
        rows = [
            torch.bernoulli(
                torch.full(shape[1:], keep, dtype=torch.float64),
                generator=make_generator(derive_seed(self.seed, site, index)),
            )
            for index in range(shape[0])
        ]
        mask = torch.stack(rows) if rows else torch.empty(shape, dtype=torch.float64)
        return mask.to(dtype=dtype, device=device)

    def dropout_mask(self, site, shape, dtype=torch.float32, device="cpu"):
        """Keep-mask (0/1) for a dropout site, or None when nothing is dropped"""
        if not self.active or self.dropout_p == 0.0:
            return None
        return self._bernoulli(f"dropout/{site}", shape, 1.0 - self.dropout_p, dtype, device)

    def block_gate(self, site, batch_size, dtype=torch.float32, device="cpu"):
        """Per-example keep gate (0/1) for a residual block, or None"""
        if not self.active or self.stochdepth_p == 0.0:
            return None
        return self._bernoulli(f"gate/{site}", (batch_size,), 1.0 - self.stochdepth_p, dtype, device)

    def branch(self, name):
        """
        The realization a training branch should use.

        Args:
            name (str): "clean", "attack" or "adv"

        Returns:
            DropConfig: realization for that branch under this config's mode
        """
        if name not in ("clean", "attack", "adv"):
            raise ConfigurationError(f"Unknown branch '{name}'")
        if not self.active:
            return self
        if name == "clean" or self.mode == DropMode.MATCHED:
            return self
        if self.mode == DropMode.UNMATCHED:
            return replace(
                self,
                seed=derive_seed(self.seed, "adversarial-branch"),
                dropout_p=self.dropout_p if self.adv_dropout_p is None else self.adv_dropout_p,
                stochdepth_p=self.stochdepth_p if self.adv_stochdepth_p is None else self.adv_stochdepth_p,
            )
        return replace(self, active=False)


KEEP_ALL = DropConfig(mode=DropMode.DISABLED_ALL, active=False)


def sample_drop_config(config, mode, seed, adv_dropout_p=None, adv_stochdepth_p=None):
    """
    Sample the DropConfig for one optimization step

    Args:
        config (ModelConfig): supplies dropout_p and stochdepth_p
        mode (DropMode or str): matched, unmatched, disabled_adv or disabled_all
        seed (int): realization seed
        adv_dropout_p (float, optional): dropout for the adversarial realization in unmatched mode
        adv_stochdepth_p (float, optional): stochastic depth for the adversarial realization in unmatched mode

    Returns:
        DropConfig: deterministic given the arguments
    """
    mode = DropMode(mode)
    for name, p in (("adv_dropout_p", adv_dropout_p), ("adv_stochdepth_p", adv_stochdepth_p)):
        if p is not None and not 0.0 <= p < 1.0:
            raise ConfigurationError(f"{name} must be in [0, 1), got {p}")
    return DropConfig(
        mode=mode,
        seed=int(seed),
        dropout_p=config.dropout_p,
        stochdepth_p=config.stochdepth_p,
        active=mode != DropMode.DISABLED_ALL,
        adv_dropout_p=adv_dropout_p,
        adv_stochdepth_p=adv_stochdepth_p,
    )


class MaskRecorder:
    """
    Collects the masks realized during forward passes, grouped by branch
    """

    def __init__(self):
        self.branch = "clean"
        self.forwards = []

    def start_forward(self):
        self.forwards.append((self.branch, {}))

    def record(self, site, mask):
        if not self.forwards:
            self.start_forward()
        self.forwards[-1][1][site] = None if mask is None else mask.detach().clone()

    def by_branch(self, branch):
        return [masks for name, masks in self.forwards if name == branch]

    def clear(self):
        self.forwards = []

    def all_identical(self):
        """True when every recorded forward realized exactly the same masks"""
        if not self.forwards:
            return True
        reference = self.forwards[0][1]
        for _, masks in self.forwards[1:]:
            if masks.keys() != reference.keys():
                return False
            for site, mask in masks.items():
                other = reference[site]
                if (mask is None) != (other is None):
                    return False
                if mask is not None and not torch.equal(mask, other):
                    return False
        return True


def apply_dropout(x, drop, site, recorder=None):
    """Inverted dropout with the realized mask for `site`"""
    mask = drop.dropout_mask(site, x.shape, x.dtype, x.device) if drop is not None else None
    if recorder is not None:
        recorder.record(site, mask)
    if mask is None:
        return x
    return x * mask / (1.0 - drop.dropout_p)


class PatchEmbedding(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.proj = nn.Conv2d(config.in_channels, config.embed_dim, config.patch_size, stride=config.patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)  # (B, N, D)


class Attention(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.embed_dim // config.n_heads
        self.qkv = nn.Linear(config.embed_dim, 3 * config.embed_dim)
        self.proj = nn.Linear(config.embed_dim, config.embed_dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).view(B, N, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.fc1 = nn.Linear(config.embed_dim, config.mlp_dim)
        self.fc2 = nn.Linear(config.mlp_dim, config.embed_dim)

    def forward(self, x, drop, path, recorder=None):
        x = F.gelu(self.fc1(x))
        x = apply_dropout(x, drop, f"{path}.drop1", recorder)
        x = self.fc2(x)
        return apply_dropout(x, drop, f"{path}.drop2", recorder)


class Block(nn.Module):
    """
    Pre-norm transformer block. One stochastic-depth gate per example covers
    both residual branches, so a dropped block is the identity.
    """

    def __init__(self, config):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.embed_dim)
        self.attn = Attention(config)
        self.norm2 = nn.LayerNorm(config.embed_dim)
        self.mlp = MLP(config)

    def forward(self, x, drop, path, recorder=None):
        gate = drop.block_gate(path, x.shape[0], x.dtype, x.device) if drop is not None else None
        if recorder is not None:
            recorder.record(f"{path}.gate", gate)
        scale = None if gate is None else (gate / (1.0 - drop.stochdepth_p)).view(-1, 1, 1)

        h = apply_dropout(self.attn(self.norm1(x)), drop, f"{path}.attn.drop", recorder)
        x = x + (h if scale is None else scale * h)
        h = self.mlp(self.norm2(x), drop, f"{path}.mlp", recorder)
        return x + (h if scale is None else scale * h)


class VisionTransformer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbedding(config)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        if config.use_pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(1, config.n_patches + 1, config.embed_dim))
        else:
            self.pos_embed = None
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.depth)])
        self.norm = nn.LayerNorm(config.embed_dim)
        self.head = nn.Linear(config.embed_dim, config.n_classes)

    def patch_tokens(self, x):
        return self.patch_embed(x)

    def encode(self, tokens, pos_embed=None, drop=None, recorder=None):
        """Run the encoder on patch tokens (B, N, D) and return class logits"""
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        h = torch.cat([cls, tokens], dim=1)
        if pos_embed is not None:
            h = h + pos_embed
        h = apply_dropout(h, drop, "embed.drop", recorder)
        for i, block in enumerate(self.blocks):
            h = block(h, drop, f"blocks.{i}", recorder)
        return self.head(self.norm(h)[:, 0])

    def forward(self, x, drop=None, recorder=None):
        c = self.config
        expected = (c.in_channels, c.image_size, c.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise StructuralError(f"Expected images of shape (B, {expected}), got {tuple(x.shape)}")
        if recorder is not None:
            recorder.start_forward()
        return self.encode(self.patch_tokens(x), self.pos_embed, drop, recorder)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def init_params(config, seed):
    """
    Build a VisionTransformer with truncated-normal initialization

    Args:
        config (ModelConfig): architecture
        seed (int): initialization seed

    Returns:
        VisionTransformer: parameters keyed by layer path via state_dict()
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError("init_params expects a ModelConfig")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = VisionTransformer(config)
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(param)
            elif "norm" in name:
                nn.init.ones_(param)
            else:
                nn.init.trunc_normal_(param, std=0.02, a=-0.04, b=0.04)
    logger.info(f"Initialized ViT with {count_parameters(model):,} parameters (seed {seed})")
    return model


def forward(model, batch, drop=None, recorder=None):
    """Logits for an ImageBatch (or a pixel tensor) under the given realization"""
    pixels = getattr(batch, "pixels", batch)
    return model(pixels, drop=drop, recorder=recorder)
