"""
Clean, corruption, band-limited-noise and white-box evaluation.

Every evaluation runs with dropout and stochastic depth disabled, counts
correct predictions as integers so results do not depend on batch size, and
never updates the model. argmax ties resolve to the lowest class index.
"""

import logging
from dataclasses import dataclass, replace

import torch
from tqdm import tqdm

from backbone import KEEP_ALL
from corruptions import corrupt
from dataio import batches
from exceptions import ConfigurationError
from pyramid_attack import ImageBatch, TargetMode, pgd_pyramid_attack
from spectral import band_limited_noise
from utils import derive_seed

logger = logging.getLogger(__name__)

CLEAN_FIELDS = ["split", "correct", "total", "accuracy"]
CORRUPTION_FIELDS = ["kind", "severity", "accuracy", "error"]
CURVE_FIELDS = ["band", "cutoff", "accuracy"]
WHITEBOX_FIELDS = ["attack", "accuracy"]


def _correct(model, pixels, labels):
    with torch.no_grad():
        logits = model(pixels, drop=KEEP_ALL)
    return int((logits.argmax(dim=-1) == labels).sum())


def count_correct(model, dataset, batch_size, transform=None, desc=None, split="eval"):
    """
    Correct and total prediction counts over a split, with an optional input transform

    transform(batch, start) returns the pixels to classify; `start` is the
    index of the batch's first image in the split.
    """
    model.eval()
    correct = total = 0
    start = 0
    stream = batches(dataset, split, batch_size, shuffle=False)
    for batch in tqdm(stream, desc=desc, leave=False, disable=desc is None):
        pixels = batch.pixels if transform is None else transform(batch, start)
        correct += _correct(model, pixels, batch.labels)
        total += len(batch)
        start += len(batch)
    if total == 0:
        raise ConfigurationError(f"Split '{split}' has no images to evaluate")
    return correct, total


def evaluate_clean(model, dataset, batch_size=256, split="eval"):
    """
    Top-1 accuracy on a split

    Args:
        model (VisionTransformer): model to evaluate
        dataset (DatasetHandle): data
        batch_size (int): evaluation batch size
        split (str): "eval" or "train"

    Returns:
        float: fraction of correct predictions
    """
    correct, total = count_correct(model, dataset, batch_size, desc="clean", split=split)
    logger.info(f"Clean accuracy on {split}: {correct}/{total} = {correct / total:.4f}")
    return correct / total


@dataclass
class CorruptionReport:
    rows: list
    mce: float = None

    def accuracy(self, kind, severity):
        for row in self.rows:
            if row["kind"] == kind and row["severity"] == severity:
                return row["accuracy"]
        raise KeyError((kind, severity))


def _image_seeds(seed, start, count, *stream):
    return [derive_seed(seed, *stream, start + i) for i in range(count)]


def corruption_table(model, dataset, specs, seed=0, batch_size=256, table=None):
    """Accuracy and error for every corruption spec, one row per (kind, severity)"""
    rows = []
    for spec in specs:
        def transform(batch, start, spec=spec):
            seeds = _image_seeds(seed, start, len(batch), "corruption", spec.kind, spec.severity)
            return corrupt(batch, spec, seeds, table).pixels

        correct, total = count_correct(model, dataset, batch_size, transform, desc=f"{spec.kind}/{spec.severity}")
        accuracy = correct / total
        rows.append({"kind": spec.kind, "severity": spec.severity, "accuracy": accuracy, "error": 1.0 - accuracy})
        logger.debug(f"{spec.kind} severity {spec.severity}: accuracy {accuracy:.4f}")
    return rows


def mean_corruption_error(rows, reference_rows):
    """
    Mean over kinds of (sum of errors over severities) / (reference's sum)

    Args:
        rows (list): corruption rows of the evaluated model
        reference_rows (list): rows of the reference model for the same specs

    Returns:
        float: mCE, 1.0 for the reference itself
    """
    errors, reference = {}, {}
    for row in rows:
        errors[row["kind"]] = errors.get(row["kind"], 0.0) + row["error"]
    for row in reference_rows:
        reference[row["kind"]] = reference.get(row["kind"], 0.0) + row["error"]
    if errors.keys() != reference.keys():
        raise KeyError(f"Reference covers {sorted(reference)}, evaluated rows cover {sorted(errors)}")

    ratios = []
    for kind, total in errors.items():
        if reference[kind] == 0:
            logger.warning(f"Reference model makes no errors on '{kind}'")
            ratios.append(1.0 if total == 0 else float("inf"))
        else:
            ratios.append(total / reference[kind])
    return sum(ratios) / len(ratios)


def evaluate_corruption_suite(model, dataset, specs, reference=None, seed=0, batch_size=256, table=None):
    """
    Accuracy under each corruption, plus mCE against a reference model

    Args:
        model (VisionTransformer): model to evaluate
        dataset (DatasetHandle): eval split is corrupted
        specs (list): CorruptionSpec entries
        reference (VisionTransformer, optional): model the mCE is relative to
        seed (int): corruption seed, shared by model and reference
        batch_size (int): evaluation batch size
        table (dict, optional): severity table

    Returns:
        CorruptionReport: rows kind, severity, accuracy, error; mce is None without a reference
    """
    rows = corruption_table(model, dataset, specs, seed, batch_size, table)
    mce = None
    if reference is None:
        logger.warning("No reference checkpoint configured, skipping mCE")
    else:
        reference_rows = rows if reference is model else corruption_table(
            reference, dataset, specs, seed, batch_size, table
        )
        mce = mean_corruption_error(rows, reference_rows)
        logger.info(f"mCE: {mce:.4f}")
    return CorruptionReport(rows, mce)


def noise_robustness_curve(model, dataset, band, cutoffs, l2_norm, seed=0, batch_size=256):
    """
    Accuracy under band-limited noise of fixed L2 norm, one row per cutoff

    Args:
        model (VisionTransformer): model to evaluate
        dataset (DatasetHandle): eval split is perturbed
        band (str): "low_pass" or "high_pass"
        cutoffs (list): band widths in cycles per image
        l2_norm (float): per-image noise norm
        seed (int): noise seed

    Returns:
        list: rows band, cutoff, accuracy
    """
    rows = []
    for cutoff in cutoffs:
        def transform(batch, start, cutoff=cutoff):
            noise = torch.stack([
                band_limited_noise(batch.pixels.shape[1:], band, cutoff, l2_norm, s, batch.pixels.dtype)
                for s in _image_seeds(seed, start, len(batch), "band-noise", band, cutoff)
            ]).to(batch.pixels.device)
            return (batch.pixels + noise).clamp(0.0, 1.0)

        correct, total = count_correct(model, dataset, batch_size, transform, desc=f"{band}/{cutoff}")
        rows.append({"band": band, "cutoff": cutoff, "accuracy": correct / total})
        logger.debug(f"{band} cutoff {cutoff}: accuracy {correct / total:.4f}")
    return rows


def whitebox_eval(model, dataset, attack_specs, seed=0, batch_size=256):
    """
    Accuracy under PGD attacks generated against the model itself

    Attacks run in untargeted mode (ascending the true-label loss) with
    dropout and stochastic depth disabled.

    Args:
        model (VisionTransformer): model to attack and evaluate
        dataset (DatasetHandle): eval split is attacked
        attack_specs (dict): name -> PyramidSpec
        seed (int): attack seed

    Returns:
        list: rows attack, accuracy
    """
    model.eval()
    rows = []
    for name, spec in attack_specs.items():
        spec = replace(spec, target_mode=TargetMode.UNTARGETED)
        correct = total = 0
        start = 0
        for batch in tqdm(batches(dataset, "eval", batch_size), desc=f"whitebox/{name}", leave=False):
            result = pgd_pyramid_attack(model, KEEP_ALL, batch, spec, derive_seed(seed, "whitebox", name, start))
            correct += _correct(model, result.perturbed.pixels, batch.labels)
            total += len(batch)
            start += len(batch)
        rows.append({"attack": name, "accuracy": correct / total})
        logger.info(f"White-box {name}: accuracy {correct / total:.4f}")
    return rows


def eval_sample(dataset, n_samples, batch_size=256):
    """The first n_samples eval images as one ImageBatch"""
    pixels, labels = [], []
    for batch in batches(dataset, "eval", batch_size):
        pixels.append(batch.pixels)
        labels.append(batch.labels)
        if sum(len(l) for l in labels) >= n_samples:
            break
    return ImageBatch(torch.cat(pixels)[:n_samples], torch.cat(labels)[:n_samples])
