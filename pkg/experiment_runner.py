import logging
from pathlib import Path

import torch

from artifact_manager import ArtifactManager
from backbone import KEEP_ALL
from checkpoint import load_checkpoint
from config import Config, save_resolved_config
from corruptions import full_suite
from dataio import load_from_config
from evaluator import (
    CLEAN_FIELDS, CORRUPTION_FIELDS, CURVE_FIELDS, WHITEBOX_FIELDS,
    count_correct, eval_sample, evaluate_corruption_suite, noise_robustness_curve, whitebox_eval,
)
from exceptions import ConfigurationError, PyramidATError
from pyramid_attack import (
    ImageBatch, apply_pyramid, expand_levels, pgd_pyramid_attack, random_perturbation,
)
from spectral import spectral_report
from trainer import TrainConfig, train_loop
from utils import derive_seed, enable_determinism

logger = logging.getLogger(__name__)

COMMANDS = ("train", "attack", "eval", "analyze")
HEATMAP_SOURCES = ("random_pixel", "adv_pixel", "random_pyramid", "adv_pyramid")


class ExperimentRunner:
    """
    Main class that binds a resolved RunConfig to the train / attack / eval /
    analyze workflows and persists their artifacts
    """

    def __init__(self, run_config, progress_callback=None):
        self.run_config = run_config
        self.out_dir = Path(run_config.output_dir)
        self.artifacts = ArtifactManager(self.out_dir)
        self.progress_callback = progress_callback
        self._dataset = None

    @property
    def dataset(self):
        if self._dataset is None:
            self._dataset = load_from_config(self.run_config.dataset)
        return self._dataset

    def run(self, command, checkpoint=None):
        """
        Run one command, turning failures into a result dict

        Args:
            command (str): train, attack, eval or analyze
            checkpoint (str, optional): model checkpoint; for train, the checkpoint to resume from

        Returns:
            dict: Result with success status and details
        """
        if command not in COMMANDS:
            return {"success": False, "command": command, "error": f"Unknown command '{command}'", "usage_error": True}

        logger.info(f"Starting '{command}' into {self.out_dir}")
        try:
            save_resolved_config(self.run_config, self.out_dir)
            if self.run_config.trainer.deterministic:
                enable_determinism()
            result = getattr(self, f"run_{command}")(checkpoint)
            result.update({"success": True, "command": command, "output_dir": str(self.out_dir)})
            logger.info(f"Finished '{command}'")
            return result

        except ConfigurationError as e:
            logger.error(f"Configuration error in '{command}': {e}")
            return {"success": False, "command": command, "error": str(e), "usage_error": True}
        except PyramidATError as e:
            logger.error(f"'{command}' failed: {e}")
            return {"success": False, "command": command, "error": str(e), "usage_error": False}
        except Exception as e:
            logger.error(f"Unexpected error in '{command}': {e}")
            return {"success": False, "command": command, "error": f"Unexpected error: {str(e)}", "usage_error": False}

    def _resolve_checkpoint(self, checkpoint):
        if checkpoint is None:
            checkpoint = self.artifacts.latest_checkpoint()
            if checkpoint is None:
                raise ConfigurationError(f"No --checkpoint given and no ckpt_*.bin in {self.out_dir}")
            logger.info(f"Using latest checkpoint: {checkpoint}")
        checkpoint = Path(checkpoint)
        if not checkpoint.is_file():
            raise ConfigurationError(f"Checkpoint not found: {checkpoint}")
        return checkpoint

    def _load_model(self, checkpoint):
        model, _, header = load_checkpoint(self._resolve_checkpoint(checkpoint))
        if model.config.n_classes != self.dataset.n_classes:
            raise ConfigurationError(
                f"Checkpoint predicts {model.config.n_classes} classes, dataset has {self.dataset.n_classes}"
            )
        model.eval()
        return model, header

    def run_train(self, checkpoint=None):
        rc = self.run_config
        resume_from = checkpoint or rc.trainer.resume_from
        if resume_from is not None:
            resume_from = self._resolve_checkpoint(resume_from)
        config = TrainConfig.from_run_config(rc)
        state = train_loop(
            config, rc.model.to_model_config(), self.dataset, self.out_dir,
            resume_from=resume_from, progress_callback=self.progress_callback,
        )
        rows = self.artifacts.read_csv(self.artifacts.path(Config.METRICS_NAME))
        summary = {
            "regime": config.regime.value,
            "final_step": state.step,
            "final_clean_loss": float(rows[-1]["clean_loss"]) if rows else None,
            "final_total_loss": float(rows[-1]["total_loss"]) if rows else None,
        }
        self.artifacts.save_summary(summary)
        return {
            "summary": summary,
            "checkpoint": str(self.artifacts.latest_checkpoint()),
            "files": [Config.METRICS_NAME, Config.SUMMARY_NAME],
        }

    def run_attack(self, checkpoint=None):
        rc = self.run_config
        model, _ = self._load_model(checkpoint)
        spec = rc.pyramid_spec()
        sample = eval_sample(self.dataset, rc.attack_output.n_samples, rc.eval.batch_size)
        size = rc.attack_output.batch_size

        loss_rows = []
        l2_total = 0.0
        clips = 0
        for b, start in enumerate(range(0, len(sample), size)):
            chunk = ImageBatch(sample.pixels[start:start + size], sample.labels[start:start + size])
            result = pgd_pyramid_attack(model, KEEP_ALL, chunk, spec, derive_seed(rc.seed, "attack-output", b))
            loss_rows.extend({"batch": b, "step": i, "loss": loss} for i, loss in enumerate(result.per_step_loss))
            l2_total += result.mean_l2 * len(chunk)
            clips += result.projection_clips

            levels = expand_levels(result.pyramid, spec, chunk.pixels.shape)
            for i in range(len(chunk)):
                folder = f"samples/{start + i:04d}"
                self.artifacts.save_array(f"{folder}/original.pfa", chunk.pixels[i])
                self.artifacts.save_array(f"{folder}/perturbed.pfa", result.perturbed.pixels[i])
                self.artifacts.save_preview(f"{folder}/original.png", chunk.pixels[i])
                self.artifacts.save_preview(f"{folder}/perturbed.png", result.perturbed.pixels[i])
                for k, (scale, level) in enumerate(zip(spec.scales, levels)):
                    self.artifacts.save_array(f"{folder}/level_{k}_s{scale}.pfa", level[i])
                    self.artifacts.save_preview(f"{folder}/level_{k}_s{scale}.png", level[i], signed=True)

        self.artifacts.write_csv("attack_loss.csv", ["batch", "step", "loss"], loss_rows)
        summary = {
            "n_samples": len(sample),
            "scales": list(spec.scales),
            "multipliers": list(spec.multipliers),
            "eps": list(spec.eps),
            "mean_l2": l2_total / len(sample),
            "projection_clips": clips,
        }
        self.artifacts.save_summary(summary)
        logger.info(f"Attacked {len(sample)} images, mean L2 perturbation {summary['mean_l2']:.4f}")
        return {"summary": summary, "files": ["attack_loss.csv", Config.SUMMARY_NAME, "samples/"]}

    def run_eval(self, checkpoint=None):
        rc = self.run_config
        model, _ = self._load_model(checkpoint)
        suites = rc.eval.suites
        if not suites:
            raise ConfigurationError("eval.suites is empty")
        summary = {}
        files = []

        if "clean" in suites:
            correct, total = count_correct(model, self.dataset, rc.eval.batch_size, desc="clean")
            summary["clean_accuracy"] = correct / total
            row = {"split": "eval", "correct": correct, "total": total, "accuracy": correct / total}
            self.artifacts.write_csv(Config.REPORT_NAMES["clean"], CLEAN_FIELDS, [row])
            files.append(Config.REPORT_NAMES["clean"])

        if "corruption" in suites:
            reference = None
            if rc.eval.reference_checkpoint:
                reference, _ = self._load_model(rc.eval.reference_checkpoint)
            specs = full_suite(rc.eval.corruption_kinds, rc.eval.severities)
            report = evaluate_corruption_suite(
                model, self.dataset, specs, reference, derive_seed(rc.seed, "corruption"), rc.eval.batch_size
            )
            summary["mce"] = report.mce
            summary["corruption_accuracy"] = sum(r["accuracy"] for r in report.rows) / len(report.rows)
            self.artifacts.write_csv(Config.REPORT_NAMES["corruption"], CORRUPTION_FIELDS, report.rows)
            files.append(Config.REPORT_NAMES["corruption"])

        if "whitebox" in suites:
            available = {"pixel": rc.pixel_spec(), "pyramid": rc.pyramid_spec()}
            attacks = {name: available[name] for name in rc.eval.whitebox_attacks}
            rows = whitebox_eval(model, self.dataset, attacks, derive_seed(rc.seed, "whitebox"), rc.eval.batch_size)
            for row in rows:
                summary[f"whitebox_{row['attack']}_accuracy"] = row["accuracy"]
            self.artifacts.write_csv(Config.REPORT_NAMES["whitebox"], WHITEBOX_FIELDS, rows)
            files.append(Config.REPORT_NAMES["whitebox"])

        self.artifacts.save_summary(summary)
        files.append(Config.SUMMARY_NAME)
        return {"summary": summary, "files": files}

    def _perturbations(self, model, sample, source):
        """Image-space perturbation (perturbed - original) of one heatmap source"""
        rc = self.run_config
        spec = rc.pixel_spec() if source.endswith("pixel") else rc.pyramid_spec()
        size = rc.eval.batch_size
        deltas = []
        for b, start in enumerate(range(0, len(sample), size)):
            chunk = ImageBatch(sample.pixels[start:start + size], sample.labels[start:start + size])
            seed = derive_seed(rc.seed, "analyze", source, b)
            if source.startswith("random"):
                x = chunk.pixels
                perturbed = apply_pyramid(chunk, random_perturbation(spec, x.shape, seed, x.dtype, x.device), spec)
            else:
                perturbed = pgd_pyramid_attack(model, KEEP_ALL, chunk, spec, seed).perturbed
            deltas.append(perturbed.pixels - chunk.pixels)
        return torch.cat(deltas)

    def run_analyze(self, checkpoint=None):
        rc = self.run_config
        checkpoint = checkpoint or rc.analysis.checkpoint
        model, _ = self._load_model(checkpoint)
        sample = eval_sample(self.dataset, rc.analysis.n_samples, rc.eval.batch_size)

        summary = {}
        spectral_rows = []
        for source in HEATMAP_SOURCES:
            report = spectral_report(self._perturbations(model, sample, source))
            self.artifacts.save_array(f"heatmaps/{source}.pfa", report.heatmap)
            self.artifacts.save_array(f"heatmaps/{source}_log.pfa", report.log_heatmap)
            self.artifacts.save_text_grid(f"heatmaps/{source}.txt", report.heatmap)
            self.artifacts.save_text_grid(f"heatmaps/{source}_log.txt", report.log_heatmap)
            spectral_rows.append({
                "source": source,
                "low_freq_energy_fraction": report.low_freq_energy_fraction,
                "spatial_energy": report.spatial_energy,
            })
            summary[f"{source}_low_freq_energy_fraction"] = report.low_freq_energy_fraction
            logger.info(f"{source}: low-frequency energy fraction {report.low_freq_energy_fraction:.4f}")
        self.artifacts.write_csv(
            "spectral_summary.csv", ["source", "low_freq_energy_fraction", "spatial_energy"], spectral_rows
        )

        curve_rows = []
        for band in rc.analysis.bands:
            curve_rows.extend(noise_robustness_curve(
                model, self.dataset, band, rc.analysis.cutoffs, rc.analysis.l2_norm,
                derive_seed(rc.seed, "noise-curve"), rc.eval.batch_size,
            ))
        self.artifacts.write_csv("noise_curves.csv", CURVE_FIELDS, curve_rows)

        self.artifacts.save_summary(summary)
        return {
            "summary": summary,
            "files": ["heatmaps/", "spectral_summary.csv", "noise_curves.csv", Config.SUMMARY_NAME],
        }
