"""Binary weight container and partial (transfer) loading.

File layout, all integers little-endian::

    b"CSEGW1"                      magic
    u16                            format version
    u32 + utf-8                    UNetConfig JSON
    u32 + ascii                    config fingerprint
    u32                            tensor count
    per tensor:
        u16 + utf-8                name
        u8                         dtype code (0 = float32, 1 = float64)
        u8                         ndim
        u32 * ndim                 shape
        raw little-endian values, row-major
    32 bytes                       SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .unet import UNet, UNetConfig

MAGIC = b"CSEGW1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFileError(ValueError):
    pass


class ChecksumError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TransferError(ValueError):
    pass


@dataclass
class ModelWeights:
    tensors: "OrderedDict[str, np.ndarray]"
    config_json: str = ""
    fingerprint: str = ""
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: UNet) -> "ModelWeights":
        tensors = OrderedDict((k, np.array(v, copy=True)) for k, v in model.state_dict().items())
        return cls(tensors, model.config.to_json(), model.config.fingerprint)

    @property
    def config(self) -> UNetConfig | None:
        return UNetConfig.from_json(self.config_json) if self.config_json else None

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<H", self.format_version))
        for text in (self.config_json, self.fingerprint):
            raw = text.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise WeightFileError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelWeights":
        if len(blob) < len(MAGIC) + 2 + 32:
            raise ChecksumError("weight file is truncated")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumError("weight file checksum mismatch (corrupt or truncated)")
        if body[: len(MAGIC)] != MAGIC:
            raise WeightFileError("not a weight container (bad magic)")
        pos = len(MAGIC)

        def take(n):
            nonlocal pos
            if pos + n > len(body):
                raise WeightFileError("unexpected end of weight data")
            chunk = body[pos : pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<H", take(2))
        if version != FORMAT_VERSION:
            raise VersionError(f"weight format version {version}, expected {FORMAT_VERSION}")
        texts = []
        for _ in range(2):
            (n,) = struct.unpack("<I", take(4))
            texts.append(take(n).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        tensors = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2))
            name = take(n).decode("utf-8")
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _DTYPES:
                raise WeightFileError(f"{name}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape)
            if name in tensors:
                raise WeightFileError(f"duplicate tensor name {name}")
            tensors[name] = arr.astype(dt.newbyteorder("="))
        if pos != len(body):
            raise WeightFileError("trailing bytes after last tensor")
        return cls(tensors, texts[0], texts[1], version)


def save_weights(model_or_weights, path) -> None:
    w = model_or_weights if isinstance(model_or_weights, ModelWeights) else ModelWeights.from_model(model_or_weights)
    blob = w.to_bytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_weights(path) -> ModelWeights:
    if not os.path.exists(path):
        raise FileNotFoundError(f"weight file not found: {path}")
    with open(path, "rb") as fh:
        return ModelWeights.from_bytes(fh.read())


def model_from_weights(weights: ModelWeights, seed: int = 0) -> UNet:
    """Rebuild the network recorded in ``weights`` and load it strictly."""
    cfg = weights.config
    if cfg is None:
        raise WeightFileError("weight file carries no network configuration")
    if cfg.fingerprint != weights.fingerprint:
        raise WeightFileError("config fingerprint does not match the stored configuration")
    model = UNet(cfg, seed=seed)
    transfer_load(model, weights, strict=True)
    return model


@dataclass
class TransferReport:
    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (name, reason) for donor tensors not used
    missing: list = field(default_factory=list)  # model tensors the donor did not provide

    def lines(self) -> list:
        out = [f"loaded {len(self.loaded)} tensors"]
        out += [f"skipped {name}: {why}" for name, why in self.skipped]
        out += [f"kept init {name}: not in donor" for name in self.missing]
        return out


def transfer_load(model: UNet, weights: ModelWeights, strict: bool = False) -> TransferReport:
    """Copy every donor tensor whose name and shape match a model tensor."""
    own = model.state_dict()
    report = TransferReport()
    for name, arr in weights.tensors.items():
        if name not in own:
            report.skipped.append((name, "not in model"))
        elif tuple(own[name].shape) != tuple(arr.shape):
            report.skipped.append((name, f"shape {tuple(arr.shape)} vs model {tuple(own[name].shape)}"))
        else:
            report.loaded.append(name)
    report.missing = [k for k in own if k not in weights.tensors]
    if strict and (report.skipped or report.missing):
        raise TransferError("strict load mismatch: " + "; ".join(report.lines()[1:]))
    for name in report.loaded:
        model.set_tensor(name, weights.tensors[name])
    return report
