"""
Mixed clean + adversarial training.

Each optimization step samples one DropConfig, computes the clean loss, builds
the adversarial (or randomly perturbed) batch under the realization its
drop mode prescribes, and takes one AdamW step on

    clean_loss + lambda * adv_loss

with decoupled weight decay. All randomness of step t is derived from
(seed, stream, t), so a resumed run replays the uninterrupted one.
"""

import math
import time
import logging
from dataclasses import dataclass, asdict, replace
from enum import Enum

import torch
import torch.nn.functional as F
from tqdm import tqdm

from artifact_manager import ArtifactManager, MetricsWriter
from backbone import DropMode, MaskRecorder, init_params, sample_drop_config
from checkpoint import load_checkpoint, save_checkpoint
from config import Config
from dataio import augment, n_train_batches, train_batch_at
from exceptions import ConfigurationError, NonFiniteError, StructuralError
from pyramid_attack import (
    PIXEL_DEFAULTS, PyramidSpec, RandomMode, pgd_pixel_attack,
    pgd_pyramid_attack, pyramid_preset,
)
from utils import derive_seed, enable_determinism

logger = logging.getLogger(__name__)

METRICS_FIELDS = ["step", "clean_loss", "adv_loss", "total_loss", "lr", "clean_acc", "adv_acc", "wall_time_s"]

# parameters excluded from weight decay besides biases and norms
_NO_DECAY = ("cls_token", "pos_embed")


class Regime(str, Enum):
    BASELINE = "baseline"
    PIXEL_AT = "pixel_at"
    PYRAMID_AT = "pyramid_at"
    RANDOM_PIXEL = "random_pixel"
    RANDOM_PYRAMID = "random_pyramid"

    @property
    def adversarial(self):
        return self != Regime.BASELINE


@dataclass(frozen=True)
class TrainConfig:
    regime: Regime = Regime.BASELINE
    lam: float = 1.0
    weight_decay: float = 0.05
    base_lr: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 128
    drop_mode: DropMode = DropMode.MATCHED
    attack: PyramidSpec = None
    pixel_attack: PyramidSpec = PIXEL_DEFAULTS
    seed: int = 0
    adv_dropout_p: float = None
    adv_stochdepth_p: float = None
    checkpoint_every: int = 500
    deterministic: bool = True
    record_masks: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "drop_mode", DropMode(self.drop_mode))
        if self.attack is None:
            object.__setattr__(self, "attack", pyramid_preset("three_level"))
        if self.lam < 0 or self.weight_decay < 0:
            raise ConfigurationError("trainer.lambda and trainer.weight_decay must be nonnegative")
        if not self.base_lr > 0:
            raise ConfigurationError(f"trainer.base_lr must be positive, got {self.base_lr}")
        if self.total_steps <= 0 or self.batch_size <= 0 or self.checkpoint_every <= 0:
            raise ConfigurationError("trainer.total_steps, batch_size and checkpoint_every must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError(
                f"trainer.warmup_steps ({self.warmup_steps}) must be in [0, total_steps={self.total_steps})"
            )

    @classmethod
    def from_run_config(cls, run_config):
        t = run_config.trainer
        return cls(
            regime=t.regime,
            lam=t.lam,
            weight_decay=t.weight_decay,
            base_lr=t.base_lr,
            warmup_steps=t.warmup_steps,
            total_steps=t.total_steps,
            batch_size=t.batch_size,
            drop_mode=t.drop_mode,
            attack=run_config.pyramid_spec(),
            pixel_attack=run_config.pixel_spec(),
            seed=run_config.seed,
            adv_dropout_p=t.adv_dropout_p,
            adv_stochdepth_p=t.adv_stochdepth_p,
            checkpoint_every=t.checkpoint_every,
            deterministic=t.deterministic,
            record_masks=t.record_masks,
        )


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    step: int = 0
    seed: int = 0


@dataclass
class MetricsRecord:
    step: int
    clean_loss: float
    adv_loss: float
    total_loss: float
    lr: float
    clean_acc: float
    adv_acc: float
    wall_time_s: float = 0.0
    # 0.5 * wd * sum ||W||^2, included in total_loss
    decay_loss: float = 0.0

    def to_row(self):
        row = asdict(self)
        return {k: row[k] for k in METRICS_FIELDS}


@dataclass
class BranchLosses:
    clean_loss: torch.Tensor
    adv_loss: torch.Tensor
    clean_logits: torch.Tensor
    adv_logits: torch.Tensor
    drop: object


def lr_at(step, config):
    """
    Learning rate for an optimization step

    Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
    at total_steps.

    Args:
        step (int): zero-based step counter
        config (TrainConfig): schedule parameters

    Returns:
        float: learning rate
    """
    if step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decays(name, param):
    return param.ndim >= 2 and name not in _NO_DECAY


def build_optimizer(model, config):
    """AdamW with decoupled weight decay on weight matrices only"""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        (decay if _decays(name, param) else no_decay).append(param)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=lr_at(0, config),
    )


def decay_term(model, config):
    with torch.no_grad():
        total = sum(
            float(param.pow(2).sum()) for name, param in model.named_parameters() if _decays(name, param)
        )
    return 0.5 * config.weight_decay * total


def step_drop_config(model_config, config, step):
    return sample_drop_config(
        model_config, config.drop_mode, derive_seed(config.seed, "drop", step),
        adv_dropout_p=config.adv_dropout_p, adv_stochdepth_p=config.adv_stochdepth_p,
    )


def adversarial_batch(model, drop, batch, config, step, recorder=None):
    """
    The perturbed batch for the adversarial branch of `step`

    Random regimes draw one full-budget sign perturbation with the spec of
    their adversarial counterpart instead of running PGD.
    """
    seed = derive_seed(config.seed, "attack", step)
    regime = config.regime
    if regime == Regime.PYRAMID_AT:
        return pgd_pyramid_attack(model, drop, batch, config.attack, seed, recorder=recorder).perturbed
    if regime == Regime.PIXEL_AT:
        return pgd_pixel_attack(model, drop, batch, config.pixel_attack, seed, recorder=recorder).perturbed
    if regime in (Regime.RANDOM_PIXEL, Regime.RANDOM_PYRAMID):
        spec = config.pixel_attack if regime == Regime.RANDOM_PIXEL else config.attack
        spec = replace(spec, random_mode=RandomMode.RANDOM_SIGN)
        return pgd_pyramid_attack(model, drop, batch, spec, seed, recorder=recorder).perturbed
    raise ConfigurationError(f"Regime '{regime.value}' has no adversarial branch")


def branch_losses(model, batch, config, step, recorder=None, adv_grad=True):
    """
    Clean and adversarial losses of one step, with the graph attached

    Args:
        model (VisionTransformer): model being trained
        batch (ImageBatch): augmented clean batch
        config (TrainConfig): regime, drop mode and attack specs
        step (int): step counter, selects every seed
        recorder (MaskRecorder, optional): receives masks, grouped by branch
        adv_grad (bool): build the graph for the adversarial loss

    Returns:
        BranchLosses: adv_loss and adv_logits are None for the baseline regime
    """
    drop = step_drop_config(model.config, config, step)

    if recorder is not None:
        recorder.branch = "clean"
    clean_logits = model(batch.pixels, drop=drop.branch("clean"), recorder=recorder)
    clean_loss = F.cross_entropy(clean_logits, batch.labels)
    if not config.regime.adversarial:
        return BranchLosses(clean_loss, None, clean_logits, None, drop)

    if recorder is not None:
        recorder.branch = "attack"
    adv = adversarial_batch(model, drop.branch("attack"), batch, config, step, recorder)

    if recorder is not None:
        recorder.branch = "adv"
    with torch.set_grad_enabled(adv_grad):
        adv_logits = model(adv.pixels, drop=drop.branch("adv"), recorder=recorder)
        adv_loss = F.cross_entropy(adv_logits, adv.labels)
    return BranchLosses(clean_loss, adv_loss, clean_logits, adv_logits, drop)


def _accuracy(logits, labels):
    return float((logits.detach().argmax(dim=-1) == labels).to(torch.float64).mean())


def train_step(state, batch, config, recorder=None):
    """
    One optimization step

    Args:
        state (TrainState): model, optimizer and step counter, updated in place
        batch (ImageBatch): augmented training batch
        config (TrainConfig): training configuration
        recorder (MaskRecorder, optional): instruments realized masks

    Returns:
        tuple: (state, MetricsRecord)
    """
    step = state.step
    if step >= config.total_steps:
        raise ConfigurationError(f"Step {step} is past total_steps {config.total_steps}")
    lr = lr_at(step, config)
    model = state.model
    model.train()

    # with lambda = 0 the adversarial loss is only logged, so the update equals baseline
    weighted = config.regime.adversarial and config.lam > 0
    losses = branch_losses(model, batch, config, step, recorder, adv_grad=weighted)
    objective = losses.clean_loss + config.lam * losses.adv_loss if weighted else losses.clean_loss

    clean_loss = float(losses.clean_loss.detach())
    adv_loss = float(losses.adv_loss.detach()) if losses.adv_loss is not None else 0.0
    decay = decay_term(model, config)
    if not (math.isfinite(clean_loss) and math.isfinite(adv_loss)):
        raise NonFiniteError(
            f"Non-finite training loss at step {step}",
            diagnostics={"step": step, "lr": lr, "clean_loss": clean_loss, "adv_loss": adv_loss, "decay_loss": decay},
        )

    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1

    lam = config.lam if config.regime.adversarial else 0.0
    record = MetricsRecord(
        step=step,
        clean_loss=clean_loss,
        adv_loss=adv_loss,
        total_loss=clean_loss + lam * adv_loss + decay,
        lr=lr,
        clean_acc=_accuracy(losses.clean_logits, batch.labels),
        adv_acc=_accuracy(losses.adv_logits, batch.labels) if losses.adv_logits is not None else float("nan"),
        decay_loss=decay,
    )
    return state, record


def initial_state(model_config, config):
    model = init_params(model_config, config.seed)
    return TrainState(model, build_optimizer(model, config), 0, config.seed)


def resume_state(path, model_config, config):
    model, optimizer, header = load_checkpoint(path, optimizer_factory=lambda m: build_optimizer(m, config))
    if model.config != model_config:
        raise StructuralError(f"Checkpoint {path} was trained with {model.config}, config asks for {model_config}")
    return TrainState(model, optimizer, int(header["step"]), config.seed)


def train_loop(config, model_config, dataset, out_dir, resume_from=None, progress_callback=None, stop_at=None):
    """
    Train for config.total_steps steps, writing metrics and checkpoints

    Args:
        config (TrainConfig): training configuration
        model_config (ModelConfig): architecture of a fresh model
        dataset (DatasetHandle): train split supplies the batches
        out_dir (Path): receives metrics.csv and ckpt_<step>.bin files
        resume_from (Path, optional): checkpoint to continue from
        progress_callback (callable, optional): called with (percentage, message)
        stop_at (int, optional): stop early after this many steps

    Returns:
        TrainState: final state
    """
    if dataset.split_sizes["train"] == 0:
        raise ConfigurationError(f"Dataset '{dataset.name}' has no training images")
    if n_train_batches(dataset, config.batch_size) == 0:
        raise ConfigurationError(
            f"Train split has {dataset.split_sizes['train']} images, fewer than batch_size {config.batch_size}"
        )
    if model_config.n_classes != dataset.n_classes:
        raise ConfigurationError(
            f"model.n_classes={model_config.n_classes} but dataset '{dataset.name}' has {dataset.n_classes} classes"
        )
    if config.deterministic:
        enable_determinism()

    artifacts = ArtifactManager(out_dir)
    if resume_from:
        state = resume_state(resume_from, model_config, config)
        logger.info(f"Resuming {config.regime.value} training at step {state.step}")
    else:
        state = initial_state(model_config, config)
    metrics = MetricsWriter(
        artifacts.path(Config.METRICS_NAME), METRICS_FIELDS, resume_step=state.step if resume_from else None
    )
    recorder = MaskRecorder() if config.record_masks else None
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)

    logger.info(
        f"Training regime={config.regime.value} drop_mode={config.drop_mode.value} "
        f"steps {state.step}->{end} batch_size={config.batch_size}"
    )
    try:
        with tqdm(total=end, initial=state.step, desc=f"train[{config.regime.value}]", unit="step") as bar:
            while state.step < end:
                step = state.step
                started = time.perf_counter()
                batch = train_batch_at(dataset, config.batch_size, config.seed, step)
                batch = augment(batch, derive_seed(config.seed, "augment", step))

                if recorder is not None:
                    recorder.clear()
                _, record = train_step(state, batch, config, recorder)
                if recorder is not None and config.drop_mode == DropMode.MATCHED and not recorder.all_identical():
                    logger.warning(f"Step {step}: masks differ across branches in matched mode")

                elapsed = time.perf_counter() - started
                if not config.deterministic:
                    record.wall_time_s = elapsed
                metrics.append(record.to_row())
                logger.debug(
                    f"step {step}: clean={record.clean_loss:.4f} adv={record.adv_loss:.4f} "
                    f"lr={record.lr:.2e} acc={record.clean_acc:.3f} ({elapsed:.3f}s)"
                )

                if state.step % config.checkpoint_every == 0 or state.step == config.total_steps:
                    save_checkpoint(
                        artifacts.path(f"ckpt_{state.step}.bin"), state.model, state.step, state.optimizer,
                        extra={"regime": config.regime.value, "seed": config.seed},
                    )

                bar.update(1)
                bar.set_postfix(loss=f"{record.total_loss:.4f}", acc=f"{record.clean_acc:.3f}")
                if progress_callback:
                    progress_callback(state.step / config.total_steps * 100, f"Step {state.step}/{config.total_steps}")
    except NonFiniteError as e:
        logger.error(f"{e}; diagnostics written to {artifacts.path(Config.DIAGNOSTICS_NAME)}")
        artifacts.save_diagnostics(e.diagnostics)
        raise

    logger.info(f"Training finished at step {state.step}")
    return state
