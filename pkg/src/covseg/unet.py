"""Encoder–decoder segmentation network with equal-resolution skip connections."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .layers import BatchNormState, ConvParams, batchnorm2d, bce_loss, conv2d, maxpool2d, separable_conv2d, transposed_conv2d
from .tensor import ShapeError, Tensor, concat_channels, no_grad, randn_seeded, relu, sigmoid

ENCODER_KINDS = ("plain", "separable")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    encoder_kind: str = "plain"
    input_size: int = 64
    in_channels: int = 1
    out_channels: int = 1
    decoder_batchnorm: bool = True

    def validate(self) -> None:
        if not 2 <= self.depth <= 5:
            raise ConfigError(f"depth must be in 2..5, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        if self.input_size <= 0 or self.input_size % (2**self.depth):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2^depth = {2**self.depth}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigError("only single-channel input and output are supported")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "UNetConfig":
        return cls(**json.loads(text))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def channels(self, stage: int) -> int:
        return self.base_channels * 2**stage


class UNet:
    """Parameters live in ``params`` (trainable) and ``buffers`` (BN running stats).

    Decoder stage ``dec.i`` is the i-th one applied, i.e. ``dec.0`` upsamples the
    bottleneck.
    """

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()
        self.mode = "train"
        self._seed = seed
        self._counter = 0
        self._build()

    # -- construction -----------------------------------------------------

    def _param(self, name: str, shape, fan_in: int | None) -> Tensor:
        self._counter += 1
        if fan_in is None:
            t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        else:
            # He-normal, one independent stream per parameter
            seed = np.random.SeedSequence([self._seed, self._counter]).generate_state(1)[0]
            t = randn_seeded(shape, int(seed), float(np.sqrt(2.0 / fan_in)), dtype=self.dtype)
            t.requires_grad = True
        self.params[name] = t
        return t

    def _conv(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        self._param(f"{name}.weight", (cout, cin, k, k), cin * k * k)
        self._param(f"{name}.bias", (cout,), None)

    def _sep(self, name: str, cin: int, cout: int) -> None:
        self._param(f"{name}.depthwise.weight", (cin, 1, 3, 3), 9)
        self._param(f"{name}.depthwise.bias", (cin,), None)
        self._param(f"{name}.pointwise.weight", (cout, cin, 1, 1), cin)
        self._param(f"{name}.pointwise.bias", (cout,), None)

    def _bn(self, name: str, ch: int) -> None:
        st = BatchNormState.fresh(ch, dtype=self.dtype)
        self.params[f"{name}.gamma"] = st.gamma
        self.params[f"{name}.beta"] = st.beta
        self.bn[name] = st

    def _block(self, name: str, cin: int, cout: int, separable: bool, batchnorm: bool = True) -> None:
        for j, (a, b) in enumerate(((cin, cout), (cout, cout)), start=1):
            (self._sep if separable else self._conv)(f"{name}.conv{j}", a, b)
            if batchnorm:
                self._bn(f"{name}.bn{j}", b)

    def _build(self) -> None:
        cfg = self.config
        sep = cfg.encoder_kind == "separable"
        cin = cfg.in_channels
        for i in range(cfg.depth):
            self._block(f"enc.{i}", cin, cfg.channels(i), sep)
            cin = cfg.channels(i)
        self._block("bottleneck", cin, cfg.channels(cfg.depth), sep)
        for k, stage in enumerate(reversed(range(cfg.depth))):
            up_in, up_out = cfg.channels(stage + 1), cfg.channels(stage)
            self._param(f"dec.{k}.up.weight", (up_in, up_out, 2, 2), up_in)
            self._param(f"dec.{k}.up.bias", (up_out,), None)
            self._block(f"dec.{k}", 2 * up_out, up_out, False, cfg.decoder_batchnorm)
        self._conv("head", cfg.channels(0), cfg.out_channels, k=1)

    # -- state ------------------------------------------------------------

    def train(self) -> "UNet":
        self.mode = "train"
        for st in self.bn.values():
            st.mode = "train"
        return self

    def eval(self) -> "UNet":
        self.mode = "eval"
        for st in self.bn.values():
            st.mode = "eval"
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Every tensor of the network: parameters then BN running statistics."""
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.dtype)
        if name in self.params:
            if self.params[name].shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} ≠ {self.params[name].shape}")
            self.params[name].data = value.copy()
            return
        prefix, _, field = name.rpartition(".")
        st = self.bn.get(prefix)
        if st is None or field not in ("running_mean", "running_var"):
            raise KeyError(name)
        if getattr(st, field).shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} ≠ {getattr(st, field).shape}")
        setattr(st, field, value.copy())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ----------------------------------------------------------

    def _conv_apply(self, name: str, x: Tensor, separable: bool) -> Tensor:
        p = self.params
        if separable:
            dw = ConvParams(p[f"{name}.depthwise.weight"], p[f"{name}.depthwise.bias"], 1, 1, depthwise=True)
            pw = ConvParams(p[f"{name}.pointwise.weight"], p[f"{name}.pointwise.bias"])
            return separable_conv2d(x, dw, pw)
        w = p[f"{name}.weight"]
        return conv2d(x, ConvParams(w, p[f"{name}.bias"], 1, w.shape[2] // 2))

    def _block_apply(self, name: str, x: Tensor, separable: bool) -> Tensor:
        for j in (1, 2):
            x = self._conv_apply(f"{name}.conv{j}", x, separable)
            bn = self.bn.get(f"{name}.bn{j}")
            if bn is not None:
                x = batchnorm2d(x, bn)
            x = relu(x)
        return x

    def logits(self, x) -> Tensor:
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"expected input N×{cfg.in_channels}×{cfg.input_size}×{cfg.input_size}, got {x.shape}"
            )
        sep = cfg.encoder_kind == "separable"
        skips = []
        for i in range(cfg.depth):
            x = self._block_apply(f"enc.{i}", x, sep)
            skips.append(x)
            x = maxpool2d(x)
        x = self._block_apply("bottleneck", x, sep)
        for k in range(cfg.depth):
            up = transposed_conv2d(
                x, ConvParams(self.params[f"dec.{k}.up.weight"], self.params[f"dec.{k}.up.bias"], 2, 0)
            )
            skip = skips[cfg.depth - 1 - k]
            if up.shape[2:] != skip.shape[2:]:
                raise ShapeError(f"dec.{k}: upsampled {up.shape[2:]} does not match skip {skip.shape[2:]}")
            x = self._block_apply(f"dec.{k}", concat_channels(up, skip), False)
        return conv2d(x, ConvParams(self.params["head.weight"], self.params["head.bias"]))

    def __call__(self, x) -> Tensor:
        """Probability map, sigmoid of the logits."""
        return sigmoid(self.logits(x))

    def loss(self, x, target) -> Tensor:
        return bce_loss(self.logits(x), target)

    def predict(self, x, batch_size: int = 4) -> np.ndarray:
        """Eval-mode probabilities for an N×1×H×W array, no tape recorded."""
        prev = self.mode
        self.eval()
        x = np.asarray(x, dtype=self.dtype)
        try:
            with no_grad():
                chunks = [self(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            if prev == "train":
                self.train()
        if not chunks:
            s = self.config.input_size
            return np.zeros((0, 1, s, s), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def feature_shapes(self, n: int = 1) -> dict:
        """Spatial extent at every stage for an n-sample input (for shape checks)."""
        s = self.config.input_size
        out = {f"enc.{i}": (n, self.config.channels(i), s >> i, s >> i) for i in range(self.config.depth)}
        d = self.config.depth
        out["bottleneck"] = (n, self.config.channels(d), s >> d, s >> d)
        for k in range(d):
            st = d - 1 - k
            out[f"dec.{k}"] = (n, self.config.channels(st), s >> st, s >> st)
        return out


def build(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(config, seed=seed, dtype=dtype)
