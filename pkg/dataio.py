"""
Dataset ingestion, deterministic batch streams and flip/crop augmentation.

Images are kept as uint8 (N, C, H, W) tensors and converted to float32 in
[0, 1] when batched. There is no mean/std normalization: perturbation budgets
such as 6/255 are in the same units as the pixels.

CIFAR-10 binary format: each file holds records of 3073 bytes; byte 0 is the
label (0-9), bytes 1-1024 the red plane, 1025-2048 green, 2049-3072 blue, each
plane 32x32 row-major. data_batch_1..5.bin (10000 records each) form the
train split, test_batch.bin the eval split.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from config import Config
from downloader import ArchiveDownloader
from exceptions import ConfigurationError, IngestionError
from pyramid_attack import ImageBatch
from utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10000


@dataclass
class DatasetHandle:
    name: str
    n_classes: int
    train_images: torch.Tensor
    train_labels: torch.Tensor
    eval_images: torch.Tensor
    eval_labels: torch.Tensor
    source: str
    normalization: str = "raw"
    class_names: list = field(default_factory=list)

    @property
    def split_sizes(self):
        return {"train": len(self.train_labels), "eval": len(self.eval_labels)}

    @property
    def image_shape(self):
        return tuple(self.train_images.shape[1:])

    def split(self, name):
        if name == "train":
            return self.train_images, self.train_labels
        if name == "eval":
            return self.eval_images, self.eval_labels
        raise ConfigurationError(f"Unknown split '{name}', expected 'train' or 'eval'")


def _read_cifar_file(path):
    if not path.is_file():
        raise IngestionError(f"Missing CIFAR-10 file: {path}", path)
    raw = path.read_bytes()
    if len(raw) != CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE:
        raise IngestionError(
            f"Corrupt CIFAR-10 file {path}: {len(raw)} bytes, expected "
            f"{CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE}", path
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise IngestionError(f"Corrupt CIFAR-10 file {path}: label byte {labels.max()} out of range", path)
    images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def _load_cifar10(root, download=False, train_limit=None, eval_limit=None):
    root = Path(root)
    folder = root / Config.CIFAR10_DIRNAME
    if download and not folder.is_dir():
        ArchiveDownloader().fetch_archive(Config.CIFAR10_URL, Config.CIFAR10_MD5, root)

    # read every file before building the handle so a bad file leaves nothing behind
    parts = {}
    for split, names in (("train", Config.CIFAR10_TRAIN_FILES), ("eval", Config.CIFAR10_EVAL_FILES)):
        loaded = [_read_cifar_file(folder / name) for name in names]
        images = np.concatenate([images for images, _ in loaded])
        labels = np.concatenate([labels for _, labels in loaded])
        parts[split] = (torch.from_numpy(images), torch.from_numpy(labels))

    train_images, train_labels = parts["train"]
    eval_images, eval_labels = parts["eval"]
    if train_limit:
        train_images, train_labels = train_images[:train_limit], train_labels[:train_limit]
    if eval_limit:
        eval_images, eval_labels = eval_images[:eval_limit], eval_labels[:eval_limit]

    return DatasetHandle(
        name="cifar10",
        n_classes=10,
        train_images=train_images,
        train_labels=train_labels,
        eval_images=eval_images,
        eval_labels=eval_labels,
        source=str(folder),
        class_names=list(Config.CIFAR10_CLASSES),
    )


def generate_shapes(n, seed, image_size=32, texture_noise=0.1):
    """
    Procedural two-class set: label 0 is a filled square, label 1 a filled disc,
    both on a noisy textured background.

    Returns:
        tuple: (uint8 images (n, 3, S, S), int64 labels (n,))
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images = np.empty((n, 3, image_size, image_size), dtype=np.uint8)

    for i, label in enumerate(labels):
        background = rng.uniform(0.0, 0.45, size=3)
        foreground = rng.uniform(0.55, 1.0, size=3)
        radius = rng.uniform(image_size / 6, image_size / 3.5)
        cy, cx = rng.uniform(radius, image_size - radius, size=2)
        if label == 0:
            mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        img = np.where(mask[None], foreground[:, None, None], background[:, None, None])
        img = img + rng.uniform(-texture_noise, texture_noise, size=img.shape)
        images[i] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)

    return images, labels.astype(np.int64)


def _load_synthetic(n=512, seed=7, image_size=32, eval_fraction=0.25, texture_noise=0.1):
    if n < 2:
        raise ConfigurationError(f"Synthetic dataset needs at least 2 images, got {n}")
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigurationError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    images, labels = generate_shapes(n, seed, image_size, texture_noise)
    n_eval = max(1, int(round(n * eval_fraction)))
    images, labels = torch.from_numpy(images), torch.from_numpy(labels)
    return DatasetHandle(
        name="synthetic_shapes",
        n_classes=2,
        train_images=images[:-n_eval],
        train_labels=labels[:-n_eval],
        eval_images=images[-n_eval:],
        eval_labels=labels[-n_eval:],
        source=f"synthetic(n={n}, seed={seed})",
        class_names=["square", "circle"],
    )


def load_dataset(name, root=None, **params):
    """
    Load a dataset by name

    Args:
        name (str): "cifar10" or "synthetic_shapes"
        root (Path, optional): dataset root for file-backed datasets
        **params: cifar10 takes download, train_limit, eval_limit; synthetic_shapes
            takes n, seed, image_size, eval_fraction, texture_noise

    Returns:
        DatasetHandle: both splits in memory
    """
    logger.info(f"Loading dataset '{name}'")
    if name == "cifar10":
        handle = _load_cifar10(Config.data_root(root), **params)
    elif name == "synthetic_shapes":
        handle = _load_synthetic(**params)
    else:
        raise ConfigurationError(f"Unknown dataset '{name}'")
    if min(handle.split_sizes.values()) == 0:
        raise ConfigurationError(f"Dataset '{name}' has an empty split: {handle.split_sizes}")
    logger.info(f"Dataset '{name}': {handle.split_sizes['train']} train / {handle.split_sizes['eval']} eval images")
    return handle


def load_from_config(section):
    """Load the dataset described by a DatasetSection"""
    if section.name == "synthetic_shapes":
        return load_dataset("synthetic_shapes", **section.synthetic.model_dump())
    return load_dataset(
        "cifar10", section.root,
        download=section.download, train_limit=section.train_limit, eval_limit=section.eval_limit,
    )


def to_batch(images, labels):
    return ImageBatch(images.to(torch.float32) / 255.0, labels.to(torch.int64))


def augment(batch, seed, pad=4, flip_p=0.5, force_flip=None):
    """
    Per-image horizontal flip and reflect-pad random crop

    Args:
        batch (ImageBatch): images to augment
        seed (int): augmentation seed
        pad (int): reflect padding on each side before cropping back
        flip_p (float): flip probability
        force_flip (bool, optional): flip every image (True) or none (False)

    Returns:
        ImageBatch: augmented copy with the same labels
    """
    x = batch.pixels
    n, _, h, w = x.shape
    gen = make_generator(seed)
    if force_flip is None:
        flips = torch.rand(n, generator=gen) < flip_p
    else:
        flips = torch.full((n,), bool(force_flip))
    offsets = torch.randint(0, 2 * pad + 1, (n, 2), generator=gen)

    x = torch.where(flips.view(-1, 1, 1, 1).to(x.device), x.flip(-1), x)
    if pad > 0:
        padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        x = torch.stack([
            padded[i, :, oy:oy + h, ox:ox + w]
            for i, (oy, ox) in enumerate(offsets.tolist())
        ])
    return ImageBatch(x, batch.labels)


def n_train_batches(handle, batch_size):
    return handle.split_sizes["train"] // batch_size


def epoch_order(handle, seed, epoch):
    """Permutation of the train split for one epoch"""
    return torch.randperm(handle.split_sizes["train"], generator=make_generator(derive_seed(seed, "epoch", epoch)))


def batches(handle, split, batch_size, seed=0, epoch=0, shuffle=None):
    """
    Deterministic batch stream over one epoch of a split

    Shuffled streams follow a permutation derived from (seed, epoch) and drop
    the last partial batch; ordered streams keep dataset order and keep the
    tail. `shuffle` defaults to True for the train split only, so evaluation
    of the train split passes shuffle=False.

    Yields:
        ImageBatch
    """
    if batch_size <= 0:
        raise ConfigurationError(f"batch_size must be positive, got {batch_size}")
    images, labels = handle.split(split)
    if shuffle is None:
        shuffle = split == "train"
    if shuffle:
        order = torch.randperm(len(labels), generator=make_generator(derive_seed(seed, "epoch", epoch)))
        for start in range(0, (len(labels) // batch_size) * batch_size, batch_size):
            idx = order[start:start + batch_size]
            yield to_batch(images[idx], labels[idx])
    else:
        for start in range(0, len(labels), batch_size):
            yield to_batch(images[start:start + batch_size], labels[start:start + batch_size])


def train_batch_at(handle, batch_size, seed, step):
    """
    The train batch consumed at a given optimization step

    Equal to the step-th batch of the concatenated epoch streams, so a resumed
    run sees exactly the batches an uninterrupted run would.
    """
    per_epoch = n_train_batches(handle, batch_size)
    if per_epoch == 0:
        raise ConfigurationError(
            f"Train split has {handle.split_sizes['train']} images, fewer than batch_size {batch_size}"
        )
    epoch, index = divmod(step, per_epoch)
    order = epoch_order(handle, seed, epoch)
    idx = order[index * batch_size:(index + 1) * batch_size]
    images, labels = handle.split("train")
    return to_batch(images[idx], labels[idx])
