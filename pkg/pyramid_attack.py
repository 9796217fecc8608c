"""
Perturbation pyramids and the PGD attack loop.

A pyramid is a list of per-scale parameter grids. Level s covers the image
with s x s cells; every pixel in a cell shares the cell's value (per channel).
The image-space perturbation is the sum over levels of m_s * clip(delta_s, eps_s)
block-replicated to image size. Pixel PGD is the single-level pyramid with
scale 1 and multiplier 1.

Tensors are channels-first: images are (B, C, H, W) and the level for scale s
is (B, C, ceil(H/s), ceil(W/s)). Any leading dims are carried through.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn.functional as F

from exceptions import ConfigurationError, StructuralError, NonFiniteError
from utils import ceil_div, make_generator, is_finite

logger = logging.getLogger(__name__)


class TargetMode(str, Enum):
    RANDOM_TARGET = "random_target"
    UNTARGETED = "untargeted"


class RandomMode(str, Enum):
    ADVERSARIAL = "adversarial"
    RANDOM_SIGN = "random_sign"


class LevelSchedule(str, Enum):
    JOINT = "joint"
    COARSE_TO_FINE = "coarse_to_fine"


@dataclass(frozen=True)
class PyramidSpec:
    """
    Attack configuration: scales (coarsest first), multipliers, per-level
    L-inf budgets, PGD step size and step count.
    """
    scales: tuple
    multipliers: tuple
    eps: tuple
    step_size: float = 1 / 255
    n_steps: int = 5
    target_mode: TargetMode = TargetMode.RANDOM_TARGET
    random_mode: RandomMode = RandomMode.ADVERSARIAL
    level_schedule: LevelSchedule = LevelSchedule.JOINT

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        object.__setattr__(self, "target_mode", TargetMode(self.target_mode))
        object.__setattr__(self, "random_mode", RandomMode(self.random_mode))
        object.__setattr__(self, "level_schedule", LevelSchedule(self.level_schedule))

        n = len(self.scales)
        if n < 1:
            raise ConfigurationError("PyramidSpec needs at least one scale")
        if len(self.multipliers) != n or len(self.eps) != n:
            raise ConfigurationError(
                f"scales, multipliers and eps must have the same length "
                f"(got {n}, {len(self.multipliers)}, {len(self.eps)})"
            )
        if any(s < 1 for s in self.scales):
            raise ConfigurationError(f"scales must be positive integers, got {self.scales}")
        if any(not m > 0 for m in self.multipliers):
            raise ConfigurationError(f"multipliers must be positive, got {self.multipliers}")
        if any(not e >= 0 for e in self.eps):
            raise ConfigurationError(f"eps must be nonnegative, got {self.eps}")
        if self.n_steps < 0:
            raise ConfigurationError(f"n_steps must be nonnegative, got {self.n_steps}")
        if self.n_steps > 0 and not self.step_size > 0:
            raise ConfigurationError("step_size must be positive when n_steps > 0")

    @property
    def n_levels(self):
        return len(self.scales)

    @property
    def total_steps(self):
        if self.level_schedule == LevelSchedule.COARSE_TO_FINE:
            return self.n_steps * self.n_levels
        return self.n_steps

    def level_shape(self, shape, scale):
        """Shape of the level grid for `scale` over an image tensor of `shape`"""
        h, w = shape[-2], shape[-1]
        return tuple(shape[:-2]) + (ceil_div(h, scale), ceil_div(w, scale))

    def scaled(self, factor):
        """Copy with every multiplier multiplied by `factor`"""
        return replace(self, multipliers=tuple(m * factor for m in self.multipliers))

    def max_pixel_change(self):
        """Triangle-inequality bound on |expand_pyramid| for any projected pyramid"""
        return sum(m * e for m, e in zip(self.multipliers, self.eps))


PIXEL_DEFAULTS = PyramidSpec(scales=(1,), multipliers=(1.0,), eps=(4 / 255,), step_size=1 / 255, n_steps=5)


def pyramid_preset(name, image_size=32, patch_size=4, eps=6 / 255, step_size=1 / 255, n_steps=5):
    """
    Named pyramid structures for the structure ablation.

    The coarse levels are patch-aligned: `patch` is one ViT patch, the level
    above it is 2x2 patches and `four_level` adds one global cell.

    Args:
        name (str): pixel, patch, two_level, three_level or four_level
        image_size (int): image side in pixels
        patch_size (int): ViT patch side in pixels

    Returns:
        PyramidSpec: the preset with a shared eps per level
    """
    layouts = {
        "pixel": ((1,), (1.0,)),
        "patch": ((patch_size,), (20.0,)),
        "two_level": ((patch_size, 1), (10.0, 1.0)),
        "three_level": ((2 * patch_size, patch_size, 1), (20.0, 10.0, 1.0)),
        "four_level": ((image_size, 2 * patch_size, patch_size, 1), (25.0, 20.0, 10.0, 1.0)),
    }
    if name not in layouts:
        raise ConfigurationError(f"Unknown pyramid preset '{name}', expected one of {sorted(layouts)}")
    scales, multipliers = layouts[name]
    return PyramidSpec(
        scales=scales,
        multipliers=multipliers,
        eps=(eps,) * len(scales),
        step_size=step_size,
        n_steps=n_steps,
    )


@dataclass
class ImageBatch:
    """Images in [0, 1], shape (B, C, H, W), with integer labels of length B"""
    pixels: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.pixels.shape[0]

    def validate(self, n_classes=None):
        if self.pixels.dim() != 4:
            raise StructuralError(f"ImageBatch pixels must be (B, C, H, W), got {tuple(self.pixels.shape)}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise StructuralError(
                f"labels shape {tuple(self.labels.shape)} does not match batch size {self.pixels.shape[0]}"
            )
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ConfigurationError("ImageBatch pixels must lie in [0, 1]")
        if n_classes is not None and self.labels.numel():
            if self.labels.min() < 0 or self.labels.max() >= n_classes:
                raise ConfigurationError(f"labels must lie in [0, {n_classes})")
        return self


@dataclass
class PerturbationPyramid:
    levels: list

    def shapes(self):
        return [tuple(level.shape) for level in self.levels]


@dataclass
class AttackResult:
    perturbed: ImageBatch
    pyramid: PerturbationPyramid
    per_step_loss: list
    target_labels: torch.Tensor
    # entries changed by projection, summed over steps and levels
    projection_clips: int = 0
    original: ImageBatch = field(default=None, repr=False)

    @property
    def mean_l2(self):
        """Mean per-image L2 norm of perturbed - original"""
        if self.original is None:
            return float("nan")
        diff = (self.perturbed.pixels - self.original.pixels).flatten(1)
        return float(diff.norm(dim=1).mean())


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) < 3 or any(d <= 0 for d in shape):
        raise ConfigurationError(f"Image shape needs positive (..., C, H, W) dims, got {shape}")
    return shape


def _check_structure(pyr, spec, shape):
    if len(pyr.levels) != spec.n_levels:
        raise StructuralError(f"Pyramid has {len(pyr.levels)} levels but spec has {spec.n_levels} scales")
    for level, scale in zip(pyr.levels, spec.scales):
        expected = spec.level_shape(shape, scale)
        if tuple(level.shape) != expected:
            raise StructuralError(
                f"Level for scale {scale} has shape {tuple(level.shape)}, expected {expected}"
            )


def init_pyramid(spec, shape, dtype=torch.float32, device="cpu"):
    """
    Create an all-zero pyramid for images of the given shape

    Args:
        spec (PyramidSpec): attack configuration
        shape (tuple): image tensor shape, (C, H, W) or (B, C, H, W)

    Returns:
        PerturbationPyramid: one zero grid per scale
    """
    shape = _check_shape(shape)
    levels = [torch.zeros(spec.level_shape(shape, s), dtype=dtype, device=device) for s in spec.scales]
    return PerturbationPyramid(levels)


def _expand_level(level, scale, multiplier, eps, height, width):
    clipped = level.clamp(-eps, eps)
    up = clipped.repeat_interleave(scale, dim=-2).repeat_interleave(scale, dim=-1)
    return multiplier * up[..., :height, :width]


def expand_levels(pyr, spec, shape):
    """Per-level image-space contributions m_s * clip(delta_s), in scale order"""
    shape = _check_shape(shape)
    _check_structure(pyr, spec, shape)
    h, w = shape[-2], shape[-1]
    return [
        _expand_level(level, s, m, e, h, w)
        for level, s, m, e in zip(pyr.levels, spec.scales, spec.multipliers, spec.eps)
    ]


def expand_pyramid(pyr, spec, shape):
    """
    Sum of the block-replicated, clipped and scaled levels.

    output[..., c, i, j] = sum_s m_s * clip(delta_s[..., c, i // s, j // s], -eps_s, eps_s)
    """
    total = None
    for contribution in expand_levels(pyr, spec, shape):
        total = contribution if total is None else total + contribution
    return total


def apply_pyramid(batch, pyr, spec):
    """Add the expanded pyramid to the batch and clip to [0, 1]; labels are unchanged"""
    delta = expand_pyramid(pyr, spec, batch.pixels.shape)
    return ImageBatch((batch.pixels + delta).clamp(0.0, 1.0), batch.labels)


def project_pyramid(pyr, spec):
    """Clamp each level elementwise to [-eps_s, eps_s]"""
    if len(pyr.levels) != spec.n_levels:
        raise StructuralError(f"Pyramid has {len(pyr.levels)} levels but spec has {spec.n_levels} scales")
    return PerturbationPyramid([level.clamp(-e, e) for level, e in zip(pyr.levels, spec.eps)])


def select_targets(labels, n_classes, seed):
    """
    Draw one random wrong label per example

    Args:
        labels (Tensor): true labels
        n_classes (int): number of classes, at least 2
        seed (int): random seed

    Returns:
        Tensor: targets, uniform over classes other than the true label
    """
    if n_classes < 2:
        raise ConfigurationError(f"Random targets need at least 2 classes, got {n_classes}")
    gen = make_generator(seed)
    offsets = torch.randint(1, n_classes, tuple(labels.shape), generator=gen)
    return (labels.cpu() + offsets).remainder(n_classes).to(labels.device)


def random_perturbation(spec, shape, seed, dtype=torch.float32, device="cpu"):
    """
    Full-budget sign noise: every entry of level s is +eps_s or -eps_s with equal probability
    """
    shape = _check_shape(shape)
    gen = make_generator(seed)
    levels = []
    for scale, eps in zip(spec.scales, spec.eps):
        signs = torch.randint(0, 2, spec.level_shape(shape, scale), generator=gen).to(dtype) * 2 - 1
        levels.append((eps * signs).to(device))
    return PerturbationPyramid(levels)


def _attack_loss(logits, labels, targets, target_mode):
    if target_mode == TargetMode.RANDOM_TARGET:
        return F.cross_entropy(logits, targets, reduction="sum")
    return F.cross_entropy(logits, labels, reduction="sum")


def _step_plan(spec):
    everything = list(range(spec.n_levels))
    if spec.level_schedule == LevelSchedule.COARSE_TO_FINE:
        return [[i] for i in everything for _ in range(spec.n_steps)]
    return [everything] * spec.n_steps


def _random_sign_attack(forward, batch, spec, seed, x):
    """One full-budget sign draw in place of PGD; per-step losses repeat the drawn loss"""
    zero = init_pyramid(spec, tuple(x.shape), x.dtype, x.device)
    with torch.no_grad():
        logits = forward(zero)
        targets = _targets_for(batch, logits.shape[-1], spec, seed)
        per_step_loss = [float(_attack_loss(logits, batch.labels, targets, spec.target_mode)) / len(batch)]
        if spec.total_steps == 0:
            return AttackResult(apply_pyramid(batch, zero, spec), zero, per_step_loss, targets, 0, batch)
        pyr = random_perturbation(spec, tuple(x.shape), seed, x.dtype, x.device)
        after = float(_attack_loss(forward(pyr), batch.labels, targets, spec.target_mode)) / len(batch)
    per_step_loss += [after] * spec.total_steps
    return AttackResult(apply_pyramid(batch, pyr, spec), pyr, per_step_loss, targets, 0, batch)


def pgd_pyramid_attack(model, drop, batch, spec, seed, recorder=None):
    """
    Run the pyramid PGD attack against `model`.

    The forward pass inside the loop sees x + expand(delta) without the [0, 1]
    clip; the clip is applied only to the returned image. With a random target
    the cross-entropy toward the target is descended, in untargeted mode the
    true-label cross-entropy is ascended. Every step is a signed step of
    step_size on each active level followed by projection onto the eps ball.
    Gradients are taken with respect to the levels only, so model parameters
    never accumulate gradients here.

    Args:
        model (callable): model(pixels, drop=..., recorder=...) -> logits
        drop (DropConfig): fixed mask realization used for every forward
        batch (ImageBatch): clean images
        spec (PyramidSpec): attack configuration
        seed (int): seed for target selection and random-sign draws
        recorder (MaskRecorder, optional): receives realized masks

    Returns:
        AttackResult: perturbed batch, final pyramid and per-step losses
    """
    x = batch.validate().pixels.detach()
    shape = tuple(x.shape)

    def forward(pyr):
        return model(x + expand_pyramid(pyr, spec, shape), drop=drop, recorder=recorder)

    if spec.random_mode == RandomMode.RANDOM_SIGN:
        return _random_sign_attack(forward, batch, spec, seed, x)

    # descend toward a random target, ascend away from the true label
    direction = -1.0 if spec.target_mode == TargetMode.RANDOM_TARGET else 1.0
    levels = [level.requires_grad_(True) for level in init_pyramid(spec, shape, x.dtype, x.device).levels]
    targets = None
    per_step_loss = []
    clips = 0

    for step, active in enumerate(_step_plan(spec)):
        logits = forward(PerturbationPyramid(levels))
        if targets is None:
            targets = _targets_for(batch, logits.shape[-1], spec, seed)
        loss = _attack_loss(logits, batch.labels, targets, spec.target_mode)
        per_step_loss.append(float(loss.detach()) / len(batch))

        grads = torch.autograd.grad(loss, [levels[i] for i in active])
        if not is_finite(*grads):
            raise NonFiniteError(
                f"Non-finite attack gradient at step {step}",
                diagnostics={"step": step, "loss": per_step_loss[-1], "scales": list(spec.scales)},
            )

        with torch.no_grad():
            updated = [level.detach() for level in levels]
            for i, grad in zip(active, grads):
                stepped = updated[i] + direction * spec.step_size * grad.sign()
                projected = stepped.clamp(-spec.eps[i], spec.eps[i])
                clips += int((projected != stepped).sum())
                updated[i] = projected
        levels = [level.requires_grad_(True) for level in updated]
        logger.debug(f"PGD step {step}: loss={per_step_loss[-1]:.6f}")

    final = PerturbationPyramid([level.detach() for level in levels])
    with torch.no_grad():
        logits = forward(final)
        if targets is None:
            targets = _targets_for(batch, logits.shape[-1], spec, seed)
        per_step_loss.append(float(_attack_loss(logits, batch.labels, targets, spec.target_mode)) / len(batch))

    logger.debug(f"Attack finished: loss {per_step_loss[0]:.4f} -> {per_step_loss[-1]:.4f}")
    return AttackResult(apply_pyramid(batch, final, spec), final, per_step_loss, targets, clips, batch)


def _targets_for(batch, n_classes, spec, seed):
    if spec.target_mode == TargetMode.RANDOM_TARGET:
        return select_targets(batch.labels, n_classes, seed)
    return batch.labels


def pgd_pixel_attack(model, drop, batch, pixel_spec=None, seed=0, recorder=None):
    """
    Pixel PGD: the pyramid attack with a single scale-1 level of multiplier 1
    """
    spec = pixel_spec or PIXEL_DEFAULTS
    if spec.scales != (1,) or spec.multipliers != (1.0,):
        raise ConfigurationError(
            f"Pixel attack needs scales=[1] and multipliers=[1], got {list(spec.scales)} / {list(spec.multipliers)}"
        )
    return pgd_pyramid_attack(model, drop, batch, spec, seed, recorder=recorder)


def budget_holds(pyr, spec, atol=0.0):
    """True when every level satisfies |delta_s| <= eps_s"""
    return all(
        bool((level.abs() <= e + atol).all()) for level, e in zip(pyr.levels, spec.eps) if not math.isinf(e)
    )
