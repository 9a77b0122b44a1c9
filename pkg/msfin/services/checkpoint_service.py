"""Binary checkpoint format.

Little-endian layout:
    b"MSFN" | u32 version | u32 n + n bytes UTF-8 `key = value` text |
    u32 tensor count | per tensor: u16 n + name, u8 dtype tag, 4 x u32 dims, raw data
"""
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from msfin.core.config import format_config_text, parse_config_text
from msfin.core.exceptions import CheckpointError, ConfigurationError, ShapeError
from msfin.core.logging import app_logger as logger
from msfin.models.common import Subcommand
from msfin.models.manifest import NETWORK_KEYS, RunManifest
from msfin.nn.network import MSFIN
from msfin.tensor import DType

MAGIC = b"MSFN"
VERSION = 1
MOMENT_PREFIXES = ("adam.m.", "adam.v.")


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: Dict[str, str] = {}
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    tensors: Dict[str, np.ndarray] = {}

    def parameters(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith(MOMENT_PREFIXES))

    def moments(self, name: str) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        return self.tensors.get(f"adam.m.{name}"), self.tensors.get(f"adam.v.{name}")


class CheckpointService:
    def capture(self, net: MSFIN, manifest: RunManifest, step: int,
                rng: Optional[np.random.Generator] = None) -> Checkpoint:
        """Snapshot parameters, Adam moments, counters and rng state."""
        tensors: Dict[str, np.ndarray] = net.state_dict()
        for name, p in net.named_parameters():
            if p.exp_avg is not None:
                tensors[f"adam.m.{name}"] = p.exp_avg.copy()
                tensors[f"adam.v.{name}"] = p.exp_avg_sq.copy()
        return Checkpoint(
            config=manifest.config_echo(),
            step=step,
            rng_state=rng.bit_generator.state if rng is not None else None,
            tensors=tensors,
        )

    def save(self, checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
        """Write atomically: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = dict(checkpoint.config)
        header["step"] = str(checkpoint.step)
        if checkpoint.rng_state is not None:
            header["rng_state"] = json.dumps(checkpoint.rng_state, sort_keys=True)
        text = format_config_text(header).encode("utf-8")

        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(MAGIC)
                f.write(struct.pack("<I", VERSION))
                f.write(struct.pack("<I", len(text)))
                f.write(text)
                f.write(struct.pack("<I", len(checkpoint.tensors)))
                for name, array in checkpoint.tensors.items():
                    self._write_tensor(f, name, array)
            os.replace(tmp_name, path)
        except Exception as e:
            logger.error(f"Checkpoint write failed for {path}: {str(e)}")
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        logger.info("Checkpoint written", extra={"extra": {"path": str(path), "step": checkpoint.step}})
        return path

    @staticmethod
    def _write_tensor(f: BinaryIO, name: str, array: np.ndarray) -> None:
        encoded = name.encode("utf-8")
        if array.ndim != 4:
            raise ShapeError(f"checkpoint tensor {name} must be 4-D, got {array.shape}")
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<B", DType.of(array).tag))
        f.write(struct.pack("<4I", *array.shape))
        f.write(np.ascontiguousarray(array).astype(array.dtype.newbyteorder("<"), copy=False).tobytes())

    def load(self, path: Union[str, Path]) -> Checkpoint:
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"Cannot read checkpoint: {str(e)}", path=str(path)) from e
        reader = _Reader(blob, str(path))

        if reader.take(4, "magic") != MAGIC:
            raise CheckpointError("Not an MSFIN checkpoint", path=str(path), field="magic")
        version = reader.unpack("<I", "version")
        if version != VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}", path=str(path), field="version")
        text_len = reader.unpack("<I", "config length")
        try:
            header = parse_config_text(reader.take(text_len, "config").decode("utf-8"), source=str(path))
        except (UnicodeDecodeError, ConfigurationError) as e:
            raise CheckpointError(f"Corrupt config block: {str(e)}", path=str(path), field="config") from e

        try:
            step = int(header.pop("step", "0"))
            rng_state = json.loads(header.pop("rng_state")) if "rng_state" in header else None
        except ValueError as e:
            raise CheckpointError(f"Corrupt counters: {str(e)}", path=str(path), field="step/rng_state") from e

        tensors: Dict[str, np.ndarray] = OrderedDict()
        count = reader.unpack("<I", "tensor count")
        for _ in range(count):
            name_len = reader.unpack("<H", "tensor name length")
            name = reader.take(name_len, "tensor name").decode("utf-8", errors="replace")
            tag = reader.unpack("<B", f"{name}.dtype")
            try:
                dtype = DType.from_tag(tag)
            except ValueError as e:
                raise CheckpointError(str(e), path=str(path), field=f"{name}.dtype") from e
            dims = struct.unpack("<4I", reader.take(16, f"{name}.dims"))
            nbytes = int(np.prod(dims)) * dtype.numpy.itemsize
            raw = reader.take(nbytes, f"{name}.data")
            tensors[name] = np.frombuffer(raw, dtype=dtype.numpy.newbyteorder("<")).astype(dtype.numpy).reshape(dims)
        if reader.remaining():
            raise CheckpointError(f"{reader.remaining()} trailing bytes", path=str(path), field="tensor table")
        return Checkpoint(config=header, step=step, rng_state=rng_state, tensors=tensors)

    def manifest_from(self, checkpoint: Checkpoint, command: Subcommand,
                      overrides: Optional[Dict[str, str]] = None, path: Optional[str] = None) -> RunManifest:
        """Resolve the configuration echoed in a checkpoint, with optional overrides on top."""
        try:
            return RunManifest.resolve(command, file_values=checkpoint.config, overrides=overrides)
        except ConfigurationError as e:
            raise CheckpointError(f"Invalid configuration: {str(e)}", path=path, field="config") from e

    def restore(self, net: MSFIN, checkpoint: Checkpoint, path: Optional[str] = None,
                with_moments: bool = True) -> None:
        """Load parameters (and Adam moments) into `net`, auditing every name and shape."""
        params = checkpoint.parameters()
        own = OrderedDict(net.named_parameters())
        for name, p in own.items():
            if name not in params:
                raise CheckpointError("Missing parameter tensor", path=path, field=name)
            if params[name].shape != p.shape:
                raise CheckpointError(
                    f"Shape {params[name].shape} does not match network {p.shape}", path=path, field=name
                )
        extra = [name for name in params if name not in own]
        if extra:
            raise CheckpointError("Unexpected parameter tensor", path=path, field=extra[0])
        net.load_state_dict(params)
        for name, p in own.items():
            p.grad = None
            m, v = checkpoint.moments(name)
            if with_moments and m is not None and v is not None:
                p.exp_avg = m.astype(p.data.dtype)
                p.exp_avg_sq = v.astype(p.data.dtype)
            else:
                p.exp_avg = None
                p.exp_avg_sq = None

    def load_network(self, path: Union[str, Path], overrides: Optional[Dict[str, str]] = None,
                     command: Subcommand = Subcommand.INFER) -> Tuple[MSFIN, RunManifest]:
        """Rebuild the network a checkpoint was written for and load its weights."""
        checkpoint = self.load(path)
        network_overrides = {k: v for k, v in (overrides or {}).items() if k in NETWORK_KEYS}
        manifest = self.manifest_from(checkpoint, command, network_overrides, str(path))
        params = checkpoint.parameters()
        dtype = DType.of(next(iter(params.values()))) if params else DType.FLOAT32
        net = MSFIN(manifest.network, dtype=dtype)
        self.restore(net, checkpoint, str(path), with_moments=False)
        return net, manifest


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, n: int, field: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError("Truncated checkpoint", path=self.path, field=field)
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, field: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))[0]

    def remaining(self) -> int:
        return len(self.blob) - self.offset


checkpoint_service = CheckpointService()
