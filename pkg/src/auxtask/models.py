"""Micro encoders, classifier head and the transposed-convolution decoder.

The encoder runs once per forward pass; its 4x4 feature map feeds both the
classifier (global average pool + linear) and, when an auxiliary task is
selected, the decoder that maps features back to 32x32 image space.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, RunningStats, Tensor

NUM_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)


class AuxTask(str, enum.Enum):
    NONE = "none"
    RECON = "recon"
    FT = "ft"

    @property
    def out_channels(self) -> int:
        return {AuxTask.NONE: 0, AuxTask.RECON: 3, AuxTask.FT: 2}[self]

    @classmethod
    def parse(cls, value: "str | AuxTask") -> "AuxTask":
        if isinstance(value, AuxTask):
            return value
        return cls(str(value).lower())


BACKBONES = ("plain-cnn", "micro-resnet")


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "micro-resnet"
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")


# ---------------------------------------------------------------- layers


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield f"{prefix}{name}.mean", value.mean
                yield f"{prefix}{name}.var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for m in value:
                    if isinstance(m, Module):
                        yield from m.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=True, dtype=np.float32):
        self.stride, self.padding = stride, padding
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, dtype=np.float32):
        self.stride, self.padding = stride, padding
        # fan-in of the equivalent direct convolution seen from the output side
        fan_in = cin * k * k // (stride * stride)
        self.weight = Tensor(_kaiming_uniform(rng, (cin, cout, k, k), max(fan_in, 1), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats.init(channels, dtype)

    def __call__(self, x):
        return T.batch_norm2d(x, self.gamma, self.beta, self.stats, self.training)


class Linear(Module):
    def __init__(self, fin, fout, rng, dtype=np.float32):
        self.weight = Tensor(_kaiming_uniform(rng, (fin, fout), fin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------- encoders


class ConvBNReLU(Module):
    def __init__(self, cin, cout, rng, stride=1):
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x):
        return T.relu(self.bn(self.conv(x)))


class PlainCNN(Module):
    """Three conv-BN-ReLU-maxpool stages: 32 -> 16 -> 8 -> 4."""

    def __init__(self, width, rng):
        self.stages = [
            ConvBNReLU(3, width, rng),
            ConvBNReLU(width, 2 * width, rng),
            ConvBNReLU(2 * width, 4 * width, rng),
        ]

    def __call__(self, x):
        for stage in self.stages:
            x = T.max_pool2d(stage(x), 2)
        return x


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None

    def __call__(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return T.relu(T.add(out, short))


class MicroResNet(Module):
    """Stem plus three residual stages of two blocks; each stage halves H and W."""

    def __init__(self, width, rng):
        self.stem = ConvBNReLU(3, width, rng)
        blocks = []
        cin = width
        for cout in (width, 2 * width, 4 * width):
            blocks.append(BasicBlock(cin, cout, 2, rng))
            blocks.append(BasicBlock(cout, cout, 1, rng))
            cin = cout
        self.blocks = blocks

    def __call__(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return x


class Decoder(Module):
    """Three stride-2 transposed convolutions, 4x4 -> 8x8 -> 16x16 -> 32x32.

    Hidden blocks end in ReLU; the last block is linear so the head can emit
    negative values (standardized pixels, phase).
    """

    def __init__(self, cin, out_channels, rng):
        self.layers = [
            ConvTranspose2d(cin, cin // 2, 4, rng, stride=2, padding=1),
            ConvTranspose2d(cin // 2, cin // 4, 4, rng, stride=2, padding=1),
            ConvTranspose2d(cin // 4, out_channels, 4, rng, stride=2, padding=1),
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


# ---------------------------------------------------------------- network


class Network(Module):
    def __init__(self, config: EncoderConfig, aux: AuxTask):
        self.config = config
        self.aux = AuxTask.parse(aux)
        # Separate streams keep encoder/head init independent of the aux task.
        enc_rng, head_rng, dec_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
        encoder_cls = PlainCNN if config.backbone == "plain-cnn" else MicroResNet
        self.encoder = encoder_cls(config.width, enc_rng)
        self.head = Linear(4 * config.width, NUM_CLASSES, head_rng)
        self.decoder = Decoder(4 * config.width, self.aux.out_channels, dec_rng) if self.aux is not AuxTask.NONE else None
        self.encoder_calls = 0

    @property
    def descriptor(self) -> dict:
        return {**asdict(self.config), "aux": self.aux.value}

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict) -> None:
        """Copy arrays in place; raises ``ValueError`` naming the first mismatch."""
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise ValueError(f"state mismatch: missing tensor {name!r}")
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"state mismatch: tensor {name!r} has shape {src.shape}, network expects {arr.shape}")
        extra = [k for k in state if k not in own]
        if extra:
            raise ValueError(f"state mismatch: unexpected tensor {extra[0]!r}")
        for name, arr in own.items():
            arr[...] = state[name]

    def copy_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.state_dict().items())

    def __call__(self, x) -> tuple[Tensor, Tensor | None]:
        return forward(self, x)


def build_network(config: EncoderConfig, aux: AuxTask | str = AuxTask.NONE) -> Network:
    return Network(config, AuxTask.parse(aux))


def forward(net: Network, batch) -> tuple[Tensor, Tensor | None]:
    """Logits (N, 10) and, when an auxiliary task is set, decoder output (N, c, 32, 32)."""
    x = T.as_tensor(batch)
    if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
        raise DimensionError(f"network expects (N, 3, 32, 32) input, got {x.shape}")
    feats = net.encoder(x)
    net.encoder_calls += 1
    logits = net.head(T.global_avg_pool(feats))
    aux_out = net.decoder(feats) if net.decoder is not None else None
    return logits, aux_out


def classifier_logits(net: Network, x: Tensor) -> Tensor:
    """Encoder and classifier head only, recorded on the tape."""
    feats = net.encoder(x)
    net.encoder_calls += 1
    return net.head(T.global_avg_pool(feats))


def classify(net: Network, batch: np.ndarray) -> np.ndarray:
    """Eval-mode logits without recording a graph; the aux head is skipped."""
    was_training = net.training
    net.eval()
    try:
        with T.no_grad():
            return classifier_logits(net, T.as_tensor(batch)).data
    finally:
        net.train(was_training)


def parameter_count(net: Module) -> int:
    return sum(p.data.size for p in net.parameters())
