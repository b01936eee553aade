"""
Versioned .npz checkpoints for ModelParams and optimizer state.

Layout inside the archive:
    format_version      int array
    metadata            JSON string (architecture, train config, step, rng state, extra)
    param/<block>       flat float64 vector per block
    adam_m/<block>, adam_v/<block>
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from a2mt.exceptions import DatasetFileError
from a2mt.learner import BLOCKS, Adam, ModelParams, ParamBlock, block_layouts

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def params_checksum(params):
    """SHA-256 over the raw float64 bytes of every block present, in block order."""
    digest = hashlib.sha256()
    for name in params.names():
        digest.update(np.ascontiguousarray(params.blocks[name].flat, dtype="<f8").tobytes())
    return digest.hexdigest()


def save_checkpoint(path, params, optimizer=None, train_config=None, step=0, rng_state=None, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "architecture": params.arch,
        "train_config": train_config.to_dict() if hasattr(train_config, "to_dict") else train_config,
        "step": int(step),
        "rng_state": rng_state,
        "optimizer": optimizer.state_dict() if optimizer else None,
        "extra": extra or {},
    }
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "metadata": np.array(json.dumps(metadata, sort_keys=True)),
    }
    for name in params.names():
        arrays[f"param/{name}"] = params.blocks[name].flat
    if optimizer:
        m, v = optimizer.moments()
        for name in m:
            arrays[f"adam_m/{name}"] = m[name]
            arrays[f"adam_v/{name}"] = v[name]

    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.debug("wrote checkpoint %s (%s)", path, params_checksum(params)[:12])
    return path


def load_checkpoint(path):
    """Returns (params, optimizer or None, metadata)."""
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DatasetFileError(f"cannot read checkpoint {path}: {e}") from e

    with archive:
        version = int(archive["format_version"])
        if version != FORMAT_VERSION:
            raise DatasetFileError(f"{path}: checkpoint format_version {version}, expected {FORMAT_VERSION}")
        metadata = json.loads(str(archive["metadata"]))
        arch = metadata["architecture"]
        layouts = block_layouts(arch)
        names = [name for name in BLOCKS if name in layouts]
        blocks = {name: ParamBlock(layouts[name], archive[f"param/{name}"].copy()) for name in names}
        params = ModelParams(arch=arch, blocks=blocks)

        optimizer = None
        if metadata.get("optimizer"):
            state = metadata["optimizer"]
            m = {name: archive[f"adam_m/{name}"] for name in state["names"] if f"adam_m/{name}" in archive.files}
            v = {name: archive[f"adam_v/{name}"] for name in state["names"] if f"adam_v/{name}" in archive.files}
            optimizer = Adam.from_state(state, m, v)

    return params, optimizer, metadata
