"""FGSM attacks, adversarial batch mixing and white-box adversarial evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fourier import ft_target
from .models import AuxTask, Network, classifier_logits, classify, forward
from .tensor import ContractError


@dataclass
class AdvConfig:
    """Attack budget in standardized-input units; ``clip`` optionally bounds x_adv."""

    epsilon: float = 0.3
    train_adv_fraction: float = 0.5
    clip: tuple[float, float] | None = None
    attack_includes_aux: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 <= self.train_adv_fraction <= 1:
            raise ContractError(f"train_adv_fraction must be in [0, 1], got {self.train_adv_fraction}")


def aux_target(x: np.ndarray, aux: AuxTask, log_magnitude: bool = False) -> np.ndarray | None:
    """Recon reproduces the input batch; FT is its magnitude/phase spectrum."""
    if aux is AuxTask.RECON:
        return x
    if aux is AuxTask.FT:
        return ft_target(x, log_magnitude=log_magnitude)
    return None


def input_gradient(net: Network, x: np.ndarray, y: np.ndarray, include_aux: bool = False, lam: float = 0.01,
                   log_magnitude: bool = False) -> np.ndarray:
    """d(loss)/d(x) in eval mode; parameters and their ``.grad`` are left untouched."""
    was_training = net.training
    net.eval()
    try:
        xt = T.Tensor(np.array(x, copy=True), requires_grad=True)
        if include_aux and net.decoder is not None:
            logits, aux_out = forward(net, xt)
            loss = T.softmax_cross_entropy(logits, y)
            target = aux_target(x, net.aux, log_magnitude)
            loss = T.add(loss, T.mul(T.mse(aux_out, target), lam))
        else:
            loss = T.softmax_cross_entropy(classifier_logits(net, xt), y)
        T.backward(loss, inputs=[xt])
        return xt.grad
    finally:
        net.train(was_training)


def fgsm(net: Network, x: np.ndarray, y: np.ndarray, epsilon: float, clip: tuple[float, float] | None = None,
         include_aux: bool = False, lam: float = 0.01, log_magnitude: bool = False) -> np.ndarray:
    """``x + epsilon * sign(grad_x loss)`` with sign(0) = 0; epsilon 0 returns x unchanged."""
    if epsilon < 0:
        raise ContractError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x)
    if epsilon == 0:
        return x.copy()
    grad = input_gradient(net, x, y, include_aux, lam, log_magnitude)
    x_adv = (x + np.asarray(epsilon, dtype=x.dtype) * np.sign(grad)).astype(x.dtype)
    if clip is not None:
        x_adv = np.clip(x_adv, clip[0], clip[1]).astype(x.dtype)
    return x_adv


def adversarial_batch(net: Network, x: np.ndarray, y: np.ndarray, cfg: AdvConfig, lam: float = 0.01,
                      log_magnitude: bool = False) -> np.ndarray:
    """Replace the first ``floor(fraction * N)`` rows with FGSM versions from current weights."""
    k = int(np.floor(cfg.train_adv_fraction * len(x) + 1e-9))
    out = np.array(x, copy=True)
    if k == 0:
        return out
    out[:k] = fgsm(net, x[:k], y[:k], cfg.epsilon, cfg.clip, cfg.attack_includes_aux, lam, log_magnitude)
    return out


def adv_evaluate(net: Network, loader, epsilon: float, clip: tuple[float, float] | None = None) -> float:
    """Top-1 accuracy on inputs attacked white-box against ``net`` itself."""
    correct = total = 0
    for x, y in loader:
        x_adv = fgsm(net, x, y, epsilon, clip)
        correct += int((classify(net, x_adv).argmax(axis=1) == y).sum())
        total += len(y)
    return correct / total if total else 0.0
