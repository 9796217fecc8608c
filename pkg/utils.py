import os
import hashlib
import logging

import torch

logger = logging.getLogger(__name__)

def derive_seed(*parts):
    """
    Derive a stable 63-bit seed from an arbitrary sequence of parts

    The same parts always give the same seed, across processes and platforms,
    so per-step and per-site randomness can be regenerated instead of stored.

    Args:
        *parts: ints or strings identifying the random stream

    Returns:
        int: seed in [0, 2**63)
    """
    key = "/".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)

def make_generator(seed, device="cpu"):
    """
    Create a torch.Generator seeded with the given seed
    """
    gen = torch.Generator(device=device)
    gen.manual_seed(int(seed))
    return gen

def ceil_div(a, b):
    return -(-a // b)

def enable_determinism():
    """
    Put torch into the reference (bitwise reproducible) mode
    """
    os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.use_deterministic_algorithms(True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = False
    logger.debug("Deterministic algorithms enabled")

def is_finite(*tensors):
    return all(bool(torch.isfinite(t).all()) for t in tensors)

def setup_logging(level=logging.INFO):
    """
    Setup logging configuration
    """
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )
    return logging.getLogger(__name__)
