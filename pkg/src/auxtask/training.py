"""Combined objective, epoch loop, plateau scheduler, early stopping, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .adversarial import AdvConfig, adv_evaluate, adversarial_batch, aux_target
from .data import DatasetSplit, Loader
from .models import AuxTask, EncoderConfig, Network, build_network, classify, forward
from .tensor import ContractError

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "train_loss", "cls_loss", "aux_loss", "train_acc", "val_acc")


class DivergenceError(RuntimeError):
    """Training loss became NaN or infinite."""


@dataclass
class TrainConfig:
    lam: float = 0.01
    initial_lr: float = 0.1
    plateau_factor: float = 0.2
    patience_epochs: int = 10
    scheduler_patience: int = 5
    improvement_tol: float = 1e-4
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_epochs: int = 200
    seed: int = 0
    adv: AdvConfig | None = None
    monitor: str = "clean"
    log_magnitude: bool = False
    augment_train: bool = True
    augment_val: bool = True
    val_fraction: float = 0.05

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ContractError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.monitor not in ("clean", "adversarial"):
            raise ContractError(f"monitor must be 'clean' or 'adversarial', got {self.monitor!r}")
        if isinstance(self.adv, dict):
            self.adv = AdvConfig(**self.adv)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RunState:
    lr: float
    epoch: int = 0
    best_val: float = -math.inf
    best_epoch: int = -1
    since_best: int = 0
    since_plateau: int = 0
    best_weights: "OrderedDict[str, np.ndarray] | None" = field(default=None, repr=False)
    history: list[dict] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)


# ---------------------------------------------------------------- objective


def total_loss(cls_loss: T.Tensor, aux_loss: T.Tensor | None, lam: float) -> T.Tensor:
    """``cls + lam * aux``; the classification loss alone when there is no aux term."""
    if aux_loss is None:
        return cls_loss
    return T.add(cls_loss, T.mul(aux_loss, lam))


def _finite(value: float, what: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} is {value} at epoch {epoch}, batch {batch}; lower the learning rate or lambda")


def train_epoch(net: Network, loader: Loader, config: TrainConfig, optimizer: T.SGD, epoch: int = 0) -> dict:
    """One pass over ``loader``: forward, aux target, combined loss, backward, SGD step."""
    net.train()
    sums = {"loss": 0.0, "cls": 0.0, "aux": 0.0}
    correct = seen = 0
    for b, (x, y) in enumerate(loader.epoch(epoch)):
        if config.adv is not None and config.adv.train_adv_fraction > 0:
            x = adversarial_batch(net, x, y, config.adv, config.lam, config.log_magnitude)
            net.train()
        logits, aux_out = forward(net, x)
        cls_loss = T.softmax_cross_entropy(logits, y)
        aux_loss = None
        if aux_out is not None:
            aux_loss = T.mse(aux_out, aux_target(x, net.aux, config.log_magnitude))
        loss = total_loss(cls_loss, aux_loss, config.lam)
        _finite(loss.item(), "training loss", epoch, b)
        T.backward(loss)
        optimizer.step()
        n = len(y)
        sums["loss"] += loss.item() * n
        sums["cls"] += cls_loss.item() * n
        sums["aux"] += (aux_loss.item() if aux_loss is not None else 0.0) * n
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += n
    return {
        "train_loss": sums["loss"] / seen,
        "cls_loss": sums["cls"] / seen,
        "aux_loss": sums["aux"] / seen,
        "train_acc": correct / seen,
    }


def evaluate(net, loader, logits_fn=classify) -> float:
    """Top-1 accuracy; the auxiliary head is never run."""
    correct = total = 0
    for x, y in loader:
        correct += int((logits_fn(net, x).argmax(axis=1) == y).sum())
        total += len(y)
    return correct / total if total else 0.0


# ---------------------------------------------------------------- schedule


def scheduler_step(state: RunState, val_accuracy: float, config: TrainConfig) -> bool:
    """Record one epoch's validation accuracy; returns True on a new best.

    ``scheduler_patience`` stagnant epochs in a row multiply the lr by
    ``plateau_factor`` and restart the plateau count. The early-stop counter
    only resets on improvement.
    """
    improved = val_accuracy > state.best_val + config.improvement_tol
    if improved:
        state.best_val = val_accuracy
        state.best_epoch = state.epoch
        state.since_best = 0
        state.since_plateau = 0
    else:
        state.since_best += 1
        state.since_plateau += 1
        if state.since_plateau >= config.scheduler_patience:
            state.lr = state.lr * config.plateau_factor
            state.since_plateau = 0
    return improved


def early_stop_check(state: RunState, patience: int) -> bool:
    return state.since_best >= patience


# ---------------------------------------------------------------- checkpoints

MAGIC = b"AUXTASK-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_save(net: Network, path: str | Path, state: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON architecture, named little-endian f32 tensors."""
    state = net.state_dict() if state is None else state
    desc = json.dumps(net.descriptor, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(desc)) + desc
    out += struct.pack("<I", len(state))
    for name, arr in state.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def _read_checkpoint(path: str | Path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (version,) = struct.unpack_from("<I", buf, pos)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (dlen,) = struct.unpack_from("<I", buf, pos + 4)
        pos += 8
        desc = json.loads(buf[pos : pos + dlen])
        pos += dlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return desc, tensors


def checkpoint_load(path: str | Path) -> Network:
    desc, tensors = _read_checkpoint(path)
    aux = desc.pop("aux")
    net = build_network(EncoderConfig(**desc), aux)
    net.load_state_dict(tensors)
    return net


def checkpoint_load_into(net: Network, path: str | Path) -> Network:
    """Load weights into an existing network; shape mismatches raise ``ContractError``."""
    _, tensors = _read_checkpoint(path)
    try:
        net.load_state_dict(tensors)
    except ValueError as exc:
        raise ContractError(str(exc)) from exc
    return net


# ---------------------------------------------------------------- full run


def fit(net: Network, split: DatasetSplit, config: TrainConfig, metrics_path: str | Path | None = None) -> RunState:
    """Train until early stopping (or ``max_epochs``) and restore the best-val weights."""
    optimizer = T.SGD(net.parameters(), config.initial_lr, config.momentum, config.weight_decay)
    train_loader = Loader(split.train, config.batch_size, "random", config.seed, augment=config.augment_train)
    val_loader = Loader(split.val, config.batch_size, "sequential", config.seed, augment=config.augment_val)
    state = RunState(lr=config.initial_lr)
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    try:
        for epoch in range(config.max_epochs):
            state.epoch = epoch
            optimizer.lr = state.lr
            state.lr_history.append(state.lr)
            metrics = train_epoch(net, train_loader, config, optimizer, epoch)
            val_batches = list(val_loader.epoch(epoch))
            if config.monitor == "adversarial" and config.adv is not None:
                val_acc = adv_evaluate(net, val_batches, config.adv.epsilon, config.adv.clip)
            else:
                val_acc = evaluate(net, val_batches)
            row = {"epoch": epoch, "lr": state.lr, **metrics, "val_acc": val_acc}
            state.history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            log.info("epoch %d lr %.5g loss %.4f train %.3f val %.3f", epoch, state.lr, metrics["train_loss"],
                     metrics["train_acc"], val_acc)
            if scheduler_step(state, val_acc, config):
                state.best_weights = net.copy_state()
            if early_stop_check(state, config.patience_epochs):
                break
    finally:
        if fh is not None:
            fh.close()
    if state.best_weights is not None:
        net.load_state_dict(state.best_weights)
    net.eval()
    return state
