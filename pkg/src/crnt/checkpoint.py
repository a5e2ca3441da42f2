"""Binary model checkpoints.

Layout: magic "CRNT", a little-endian u32 format version, a u32 header
length, a canonical JSON header (sorted keys, no whitespace), then the
raw tensor payload. The header maps each tensor name to shape, dtype,
and payload offset, and carries the model config, mode, epoch, the vocab
checksum, and optimizer metadata when present.

Training checkpoints store float64 tensors plus the Adam moment buffers
(as tensors named adam.m.<param> / adam.v.<param>) so a resumed run
replays the exact trajectory. Exported checkpoints store float32, which
costs at most ~1e-7 relative per value and stays well inside the 1e-6
round-trip budget.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig
from .tensor import Adam

_MAGIC = b"CRNT"
FORMAT_VERSION = 1
_DTYPES = {"<f4", "<f8"}


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["mode"] = cfg.mode.value
    d["enc_subsample_after"] = sorted(cfg.enc_subsample_after)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)


def save_checkpoint(path, model: Model, vocab_sha256: str, dtype: str = "<f8",
                    epoch: int = 0, optimizer: Adam | None = None) -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    arrays = {name: p.data for name, p in model.parameters().items()}
    adam_meta = None
    if optimizer is not None:
        adam_meta = {
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "lr": optimizer.lr,
            "step_count": optimizer.step_count,
        }
        for name in model.parameters():
            arrays[f"adam.m.{name}"] = optimizer.m[name]
            arrays[f"adam.v.{name}"] = optimizer.v[name]

    tensors = {}
    payload = bytearray()
    for name in sorted(arrays):
        raw = arrays[name].astype(dtype).tobytes()
        tensors[name] = {
            "dtype": dtype,
            "offset": len(payload),
            "shape": list(arrays[name].shape),
        }
        payload.extend(raw)

    header = {
        "adam": adam_meta,
        "config": config_to_dict(model.cfg),
        "epoch": epoch,
        "format_version": FORMAT_VERSION,
        "mode": model.cfg.mode.value,
        "tensors": tensors,
        "vocab_sha256": vocab_sha256,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    vocab_sha256: str
    header: dict
    _payload: bytes

    def _tensor(self, name: str) -> np.ndarray:
        meta = self.header["tensors"][name]
        arr = np.frombuffer(self._payload, dtype=meta["dtype"],
                            count=int(np.prod(meta["shape"], dtype=int)),
                            offset=meta["offset"])
        return arr.reshape(meta["shape"]).astype(np.float64)

    def make_optimizer(self) -> Adam:
        """Rebuild Adam over the loaded model, moments and step included."""
        meta = self.header["adam"]
        if meta is None:
            raise ValueError("checkpoint has no optimizer state")
        opt = Adam(self.model.parameters(), lr=meta["lr"],
                   beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        opt.step_count = meta["step_count"]
        for name in opt.params:
            opt.m[name] = self._tensor(f"adam.m.{name}")
            opt.v[name] = self._tensor(f"adam.v.{name}")
        return opt


def load_checkpoint(path, expected_vocab_sha256: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[12:12 + header_len])
    payload = raw[12 + header_len:]
    if expected_vocab_sha256 is not None and header["vocab_sha256"] != expected_vocab_sha256:
        raise ValueError(
            f"{path}: vocab checksum mismatch: checkpoint was written with "
            f"{header['vocab_sha256'][:12]}..., got {expected_vocab_sha256[:12]}..."
        )

    cfg = config_from_dict(header["config"])
    model = Model(cfg, np.random.default_rng(0))
    ckpt = Checkpoint(model=model, epoch=header["epoch"],
                      vocab_sha256=header["vocab_sha256"], header=header,
                      _payload=payload)
    params = model.parameters()
    stored = {n for n in header["tensors"] if not n.startswith("adam.")}
    if stored != set(params):
        missing = sorted(set(params) - stored)
        extra = sorted(stored - set(params))
        raise ValueError(
            f"{path}: tensor set mismatch (missing {missing}, extra {extra})"
        )
    for name, p in params.items():
        arr = ckpt._tensor(name)
        if arr.shape != p.data.shape:
            raise ValueError(
                f"{path}: {name} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data[...] = arr
    return ckpt
