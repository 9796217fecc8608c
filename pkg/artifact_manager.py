"""
Reading and writing run artifacts: CSV reports, JSON summaries, portable float
arrays, plain-text heatmap grids and PNG previews.

Portable float array layout (all integers little-endian):

    offset 0    4 bytes      magic b"PFA1"
    offset 4    u32          ndim
    offset 8    ndim x u32   dims, outermost first
    then        float32 LE   prod(dims) values, row-major
"""

import csv
import json
import struct
import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from config import Config
from exceptions import IngestionError

logger = logging.getLogger(__name__)

ARRAY_MAGIC = b"PFA1"


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


class MetricsWriter:
    """
    Append-only CSV writer that flushes every row

    When resuming, rows at or after `resume_step` are dropped so the file
    matches what an uninterrupted run would have written.
    """

    def __init__(self, path, fields, resume_step=None):
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)

        kept = []
        if resume_step is not None and self.path.is_file():
            with open(self.path, "r", encoding="utf-8", newline="") as f:
                kept = [row for row in csv.DictReader(f) if int(row["step"]) < resume_step]
            logger.info(f"Resuming metrics at step {resume_step}, keeping {len(kept)} rows")

        with open(self.path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(kept)

    def append(self, row):
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.fields, lineterminator="\n")
            writer.writerow({k: _fmt(row[k]) for k in self.fields})


class ArtifactManager:
    """
    Manages the files a command writes into its output directory
    """

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, *parts):
        return self.out_dir.joinpath(*parts)

    def write_csv(self, name, fields, rows):
        """
        Write a CSV report with a fixed header

        Args:
            name (str): file name relative to the output directory
            fields (list): column names, in order
            rows (list): dicts keyed by column name

        Returns:
            Path: Path to the written report
        """
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row[k]) for k in fields})
        logger.info(f"Saved report to: {path}")
        return path

    @staticmethod
    def read_csv(path):
        with open(path, "r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))

    def save_json(self, name, data):
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        logger.info(f"Saved {path.name} to: {path}")
        return path

    @staticmethod
    def load_json(path):
        """
        Load a JSON artifact

        Returns:
            dict: Loaded data or None if failed
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to load {path}: {e}")
            return None

    def save_summary(self, metrics):
        return self.save_json(Config.SUMMARY_NAME, metrics)

    def save_diagnostics(self, diagnostics):
        """Dump the state of a failed run (step, lr, loss components)"""
        return self.save_json(Config.DIAGNOSTICS_NAME, diagnostics)

    def save_array(self, name, tensor):
        """
        Write a tensor as a portable float array

        Args:
            name (str): file name relative to the output directory
            tensor (Tensor or ndarray): values to store as float32

        Returns:
            Path: Path to the written array
        """
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        if torch.is_tensor(tensor):
            tensor = tensor.detach().cpu().numpy()
        array = np.ascontiguousarray(tensor, dtype="<f4")
        with open(path, "wb") as f:
            f.write(ARRAY_MAGIC)
            f.write(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
            f.write(array.tobytes())
        return path

    @staticmethod
    def load_array(path):
        """Read a portable float array back into a float32 ndarray"""
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != ARRAY_MAGIC:
            raise IngestionError(f"Not a portable float array (bad magic): {path}", path)
        (ndim,) = struct.unpack_from("<I", raw, 4)
        dims = struct.unpack_from(f"<{ndim}I", raw, 8)
        start = 8 + 4 * ndim
        expected = 4 * int(np.prod(dims, dtype=np.int64))
        if len(raw) - start != expected:
            raise IngestionError(f"Portable float array {path} has {len(raw) - start} data bytes, expected {expected}", path)
        return np.frombuffer(raw, dtype="<f4", offset=start).reshape(dims).astype(np.float32)

    def save_text_grid(self, name, grid):
        """Write a 2-D grid as whitespace-separated rows"""
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        grid = grid.detach().cpu().numpy() if torch.is_tensor(grid) else np.asarray(grid)
        np.savetxt(path, grid, fmt="%.8e")
        return path

    def save_preview(self, name, image, signed=False):
        """
        Save a PNG preview of a (C, H, W) tensor

        Args:
            name (str): file name relative to the output directory
            image (Tensor): image in [0, 1], or a perturbation when signed=True
            signed (bool): map [-max|x|, max|x|] to [0, 1] first

        Returns:
            Path: Path to the PNG or None if failed
        """
        try:
            x = image.detach().cpu().to(torch.float32)
            if signed:
                bound = float(x.abs().max())
                x = x / (2 * bound) + 0.5 if bound > 0 else torch.full_like(x, 0.5)
            pixels = (x.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
            if pixels.shape[-1] == 1:
                pixels = pixels[..., 0]
            path = self.path(name)
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(path)
            return path
        except (OSError, ValueError) as e:
            logger.error(f"Failed to save preview {name}: {e}")
            return None

    def find_checkpoints(self):
        """
        Checkpoints in the output directory, ordered by step

        Returns:
            list: Paths of ckpt_<step>.bin files
        """
        found = []
        for path in self.out_dir.glob("ckpt_*.bin"):
            try:
                found.append((int(path.stem.split("_", 1)[1]), path))
            except ValueError:
                logger.warning(f"Ignoring oddly named checkpoint: {path.name}")
        return [path for _, path in sorted(found)]

    def latest_checkpoint(self):
        found = self.find_checkpoints()
        return found[-1] if found else None
