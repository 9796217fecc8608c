"""
Checkpoint container.

Layout (all integers little-endian):

    offset 0   8 bytes   magic b"PYATCKPT"
    offset 8   u32       format version (1)
    offset 12  u32       header length L in bytes
    offset 16  L bytes   UTF-8 JSON header
    offset 16+L          tensor data, little-endian float32, concatenated

The JSON header holds "model_config" (ModelConfig fields), "step",
"extra" (free-form metadata) and "tensors": a list of
{"name", "shape", "offset", "nbytes"} with offsets relative to the start of
the data section. Model tensors use their state_dict layer paths; AdamW
moments are stored as "optim/<param path>/<exp_avg|exp_avg_sq|step>".
"""

import json
import struct
import logging
from pathlib import Path

import numpy as np
import torch

from backbone import ModelConfig, VisionTransformer
from exceptions import StructuralError, IngestionError

logger = logging.getLogger(__name__)

MAGIC = b"PYATCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _to_bytes(tensor):
    return np.ascontiguousarray(tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()


def save_checkpoint(path, model, step=0, optimizer=None, extra=None):
    """
    Write model (and optionally optimizer) state to a checkpoint file

    Args:
        path (Path): destination, conventionally ckpt_<step>.bin
        model (VisionTransformer): model to save
        step (int): training step counter
        optimizer (torch.optim.Optimizer, optional): AdamW whose moments are stored
        extra (dict, optional): JSON-serializable metadata

    Returns:
        Path: the written path
    """
    path = Path(path)
    entries = []
    chunks = []
    offset = 0

    def add(name, tensor):
        nonlocal offset
        data = _to_bytes(tensor)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    for name, tensor in model.state_dict().items():
        add(name, tensor)

    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                state = optimizer.state.get(param)
                if not state:
                    continue
                for key in ("exp_avg", "exp_avg_sq", "step"):
                    value = state[key]
                    if not torch.is_tensor(value):
                        value = torch.tensor(float(value))
                    add(f"optim/{names[id(param)]}/{key}", value)

    header = json.dumps({
        "model_config": model.config.to_dict(),
        "step": int(step),
        "extra": extra or {},
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.info(f"Saved checkpoint: {path}")
    return path


def read_checkpoint(path):
    """
    Parse a checkpoint file into its header and a name -> tensor mapping
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"Checkpoint not found: {path}", path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise IngestionError(f"Checkpoint too short: {path}", path)
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise IngestionError(f"Not a checkpoint file (bad magic): {path}", path)
    if version != FORMAT_VERSION:
        raise IngestionError(f"Unsupported checkpoint version {version}: {path}", path)
    start = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IngestionError(f"Corrupt checkpoint header in {path}: {e}", path) from e

    tensors = {}
    for entry in header["tensors"]:
        begin = start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(raw):
            raise IngestionError(f"Checkpoint truncated at tensor '{entry['name']}': {path}", path)
        array = np.frombuffer(raw[begin:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.astype(np.float32))
    return header, tensors


def load_checkpoint(path, optimizer_factory=None):
    """
    Rebuild the model stored in a checkpoint

    Args:
        path (Path): checkpoint file
        optimizer_factory (callable, optional): model -> optimizer; when given,
            the stored AdamW moments are restored into the new optimizer

    Returns:
        tuple: (model, optimizer or None, header dict)
    """
    header, tensors = read_checkpoint(path)
    config = ModelConfig(**header["model_config"])
    model = VisionTransformer(config)
    state = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    expected = model.state_dict()
    if state.keys() != expected.keys():
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        raise StructuralError(f"Checkpoint {path} does not match model: missing={missing} unexpected={unexpected}")
    for name, tensor in state.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise StructuralError(
                f"Checkpoint tensor '{name}' has shape {tuple(tensor.shape)}, model expects {tuple(expected[name].shape)}"
            )
    model.load_state_dict(state)

    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        for name, param in model.named_parameters():
            prefix = f"optim/{name}/"
            if f"{prefix}step" in tensors:
                optimizer.state[param] = {
                    "step": tensors[f"{prefix}step"].reshape(()).clone(),
                    "exp_avg": tensors[f"{prefix}exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{prefix}exp_avg_sq"].clone(),
                }
    logger.info(f"Loaded checkpoint: {path} (step {header['step']})")
    return model, optimizer, header
