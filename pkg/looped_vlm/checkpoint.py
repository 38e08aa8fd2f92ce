"""
Sectioned binary checkpoints.

Layout: MAGIC, <u4 header length>, UTF-8 JSON header, then the arrays listed
in header["arrays"] back to back in the numeric kernel's serialization format.
The header carries the run config, stage, step, RNG bookkeeping and the
optimizer counters; optimizer moments are stored as extra arrays.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .config import RunConfig
from .errors import CheckpointError, ConfigError
from .model import SECTIONS, MultimodalModel
from .tensor import deserialize_array, serialize_array

logger = logging.getLogger(__name__)

MAGIC = b"LVLMCKP1"


@dataclass
class CheckpointData:
    header: Dict[str, Any]
    sections: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    optimizer: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return int(self.header.get("stage", 0))

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    def config(self) -> RunConfig:
        try:
            return RunConfig.from_dict(self.header["config"])
        except (KeyError, ConfigError) as e:
            raise CheckpointError(f"Checkpoint config is unusable: {e}")


def save_checkpoint(
    path: Union[str, Path],
    model: MultimodalModel,
    stage: int,
    step: int,
    optimizer_state: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write model sections (and optionally optimizer moments) to path atomically.

    Args:
        path: Destination file
        model: Model whose sections are stored
        stage: Training stage that produced the weights
        step: Optimizer steps completed in that stage
        optimizer_state: AdamW.state_dict() output, for resumable checkpoints
        extra: Additional header fields

    Returns:
        The written path
    """
    path = Path(path)
    arrays = []
    for section, module in model.sections().items():
        for name, values in module.state_dict().items():
            arrays.append((f"{section}/{name}", values))

    header: Dict[str, Any] = {
        "config": model.cfg.to_dict(),
        "stage": stage,
        "step": step,
        "rng_state": {"seed": model.cfg.seed, "stage": stage, "next_step": step},
        "sections": list(SECTIONS),
    }
    if optimizer_state is not None:
        header["optimizer"] = {"t": optimizer_state["t"], "skipped": optimizer_state["skipped"]}
        for moment in ("m", "v"):
            for name, values in optimizer_state[moment].items():
                arrays.append((f"optim.{moment}/{name}", values))
    header.update(extra or {})
    header["arrays"] = [name for name, _ in arrays]

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, values in arrays:
            f.write(serialize_array(values))
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint {path} (stage {stage}, step {step}, {len(arrays)} arrays)")
    return path


def read_checkpoint(path: Union[str, Path]) -> CheckpointData:
    """
    Parse a checkpoint file.

    Raises:
        CheckpointError: If the file is missing, truncated or not a checkpoint
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    buffer = path.read_bytes()
    if not buffer.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a looped_vlm checkpoint")
    try:
        (header_len,) = struct.unpack_from("<I", buffer, len(MAGIC))
        offset = len(MAGIC) + 4
        header = json.loads(buffer[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        data = CheckpointData(header=header)
        for full_name in header["arrays"]:
            values, offset = deserialize_array(buffer, offset)
            group, name = full_name.split("/", 1)
            if group.startswith("optim."):
                data.optimizer.setdefault(group[len("optim."):], {})[name] = values
            else:
                data.sections.setdefault(group, {})[name] = values
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}")
    if offset != len(buffer):
        raise CheckpointError(f"Corrupt checkpoint {path}: {len(buffer) - offset} trailing bytes")
    return data


def load_into(model: MultimodalModel, data: CheckpointData) -> None:
    """Copy every stored section into model."""
    sections = model.sections()
    missing = [s for s in sections if s not in data.sections and sections[s].parameters()]
    if missing:
        raise CheckpointError(f"Checkpoint lacks sections: {missing}")
    for name, module in sections.items():
        module.load_state_dict(data.sections.get(name, {}))


def load_model(path: Union[str, Path], cfg: Optional[RunConfig] = None) -> MultimodalModel:
    """
    Build a model from a checkpoint.

    Args:
        path: Checkpoint file
        cfg: Config to build with; the checkpoint's own config when omitted
    """
    data = read_checkpoint(path)
    model = MultimodalModel(cfg or data.config())
    load_into(model, data)
    logger.info(f"Loaded checkpoint {path} (stage {data.stage}, step {data.step})")
    return model
