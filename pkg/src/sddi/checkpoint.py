"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  "SDDI"
    version u32      currently 1
    config  u32 byte length, then UTF-8 text of sorted "key=value" lines
    tensors u32 count, then per tensor:
            name_len u16, name UTF-8,
            rank u8, dims u64 * rank,
            data float32 little-endian, C order

Tensors are written in sorted name order and the config text is sorted
by key, so save -> load -> save reproduces the file byte for byte.
Optimizer moment buffers live under the reserved "opt/" name prefix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .data import _atomic_write
from .network import ModelState, StnSpec, TowerSpec, init_model
from .optim import OptimizerKind, OptimizerState

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "CheckpointData",
    "save_checkpoint",
    "load_checkpoint",
    "pack_model",
    "unpack_model",
    "pack_optimizer",
    "unpack_optimizer",
]

MAGIC = b"SDDI"
VERSION = 1
OPT_PREFIX = "opt/"

# Refuse tensors whose element count cannot be real (corrupt dims).
MAX_ELEMENTS = 1 << 40


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass
class CheckpointData:
    config: Dict[str, str]
    tensors: Dict[str, np.ndarray]


def _encode_config(config: Dict[str, str]) -> bytes:
    for key, value in config.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"config key/value may not contain '=' or newline: {key!r}")
    text = "".join(f"{k}={config[k]}\n" for k in sorted(config))
    return text.encode("utf-8")


def _decode_config(blob: bytes) -> Dict[str, str]:
    config: Dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line: {line!r}")
        config[key] = value
    return config


def save_checkpoint(path, config: Dict[str, str], tensors: Dict[str, np.ndarray]) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    blob = _encode_config(config)
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(arr.tobytes())
    data = b"".join(chunks)
    _atomic_write(Path(path), lambda tmp: Path(tmp).write_bytes(data))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint {self.path}: while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path) -> CheckpointData:
    """Read and validate a checkpoint; errors name what was being read."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {magic!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version} in {path}")
    config = _decode_config(reader.take(reader.u32("config length"), "config"))
    count = reader.u32("tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.u16("tensor name length"), "tensor name").decode("utf-8")
        rank = reader.u8(f"rank of {name!r}")
        dims = tuple(reader.u64(f"dims of {name!r}") for _ in range(rank))
        elements = 1
        for dim in dims:
            elements *= dim
        if elements > MAX_ELEMENTS:
            raise CheckpointError(f"dim overflow for tensor {name!r} in {path}: {dims}")
        raw = reader.take(4 * elements, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return CheckpointData(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# Model and optimizer (de)serialization
# ---------------------------------------------------------------------------


def _format_int_list(values) -> str:
    return ",".join(str(int(v)) for v in values)


def _parse_int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def pack_model(
    state: ModelState,
    optimizer: Optional[OptimizerState] = None,
    extra_config: Optional[Dict[str, str]] = None,
) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Flatten a model (and optional optimizer) for save_checkpoint."""
    spec = state.spec
    config: Dict[str, str] = {
        "input_size": str(spec.input_size),
        "conv_filters": _format_int_list(spec.conv_filters),
        "kernel": str(spec.kernel),
        "pool": str(spec.pool),
        "fc_sizes": _format_int_list(spec.fc_sizes),
        "use_stn": "true" if state.stn is not None else "false",
    }
    if state.stn is not None:
        sspec = state.stn.spec
        config["stn_conv_filters"] = _format_int_list(sspec.loc_conv_filters)
        config["stn_kernels"] = _format_int_list(sspec.loc_kernels)
        config["stn_pool"] = str(sspec.loc_pool)
        config["stn_fc"] = _format_int_list(sspec.loc_fc)

    tensors: Dict[str, np.ndarray] = {}
    for name, p in state.parameters().items():
        tensors[name] = p.data
    for name, buf in state.buffers().items():
        tensors[name] = buf

    if optimizer is not None:
        config.update(pack_optimizer(optimizer, tensors))
    if extra_config:
        config.update(extra_config)
    return config, tensors


def pack_optimizer(optimizer: OptimizerState, tensors: Dict[str, np.ndarray]) -> Dict[str, str]:
    """Add optimizer buffers under "opt/" and return its config entries."""
    for param_name, buffers in optimizer.buffers.items():
        for buf_name, arr in buffers.items():
            tensors[f"{OPT_PREFIX}{param_name}/{buf_name}"] = arr
    return {
        "optimizer": optimizer.kind.value,
        "learning_rate": repr(optimizer.learning_rate),
        "beta1": repr(optimizer.beta1),
        "beta2": repr(optimizer.beta2),
        "rho": repr(optimizer.rho),
        "opt_epsilon": repr(optimizer.epsilon),
        "nesterov": "true" if optimizer.nesterov else "false",
        "step_count": str(optimizer.step_count),
    }


def unpack_model(data: CheckpointData) -> ModelState:
    """Rebuild a ModelState exactly as saved."""
    config = data.config
    try:
        spec = TowerSpec(
            input_size=int(config["input_size"]),
            conv_filters=_parse_int_list(config["conv_filters"]),
            kernel=int(config["kernel"]),
            pool=int(config["pool"]),
            fc_sizes=_parse_int_list(config["fc_sizes"]),
        )
        stn_spec = None
        if config.get("use_stn") == "true":
            stn_spec = StnSpec(
                loc_conv_filters=_parse_int_list(config["stn_conv_filters"]),
                loc_kernels=_parse_int_list(config["stn_kernels"]),
                loc_pool=int(config["stn_pool"]),
                loc_fc=_parse_int_list(config["stn_fc"]),
            )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint config is missing {exc}") from exc

    state = init_model(spec, stn_spec, seed=0)
    for name, p in state.parameters().items():
        arr = data.tensors.get(name)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr.astype(np.float32, copy=True)
    for i, bn in enumerate(state.bn_states):
        for attr, key in (("running_mean", "running_mean"), ("running_var", "running_var")):
            name = f"tower/bn{i}/{key}"
            arr = data.tensors.get(name)
            if arr is None:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            setattr(bn, attr, arr.astype(np.float32, copy=True))
    return state


def unpack_optimizer(data: CheckpointData) -> Optional[OptimizerState]:
    """Rebuild the optimizer state, or None if the checkpoint has none."""
    config = data.config
    if "optimizer" not in config:
        return None
    state = OptimizerState(
        kind=OptimizerKind(config["optimizer"]),
        learning_rate=float(config["learning_rate"]),
        beta1=float(config["beta1"]),
        beta2=float(config["beta2"]),
        rho=float(config["rho"]),
        epsilon=float(config["opt_epsilon"]),
        nesterov=config.get("nesterov") == "true",
        step_count=int(config["step_count"]),
    )
    for name, arr in data.tensors.items():
        if not name.startswith(OPT_PREFIX):
            continue
        param_name, buf_name = name[len(OPT_PREFIX) :].rsplit("/", 1)
        state.buffers.setdefault(param_name, {})[buf_name] = arr.astype(np.float32, copy=True)
    return state
