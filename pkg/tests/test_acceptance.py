"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
also gathered into the terminal summary. Training criteria run the real
harness end to end and take several minutes on one CPU core.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from auxtask import tensor as T
from auxtask.adversarial import fgsm
from auxtask.cli import Cell, RunReport, collect_reports, load_config, reproduce, run_experiment
from auxtask.data import ImageSet, Loader, split_train_val, synth_dataset
from auxtask.fourier import dft2_naive, fft2
from auxtask.models import AuxTask, EncoderConfig, build_network
from auxtask.tensor import RunningStats, Tensor
from auxtask.training import (
    RunState,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    early_stop_check,
    scheduler_step,
    total_loss,
    train_epoch,
)

from gradcheck import check, leaf
from verdicts import skipped, verdict

CIFAR_DIR = os.environ.get("CIFAR10_DIR", "")

SMOKE = [
    "synthetic=true",
    "synthetic_per_class=1000",
    "synthetic_test_per_class=200",
    "synthetic_classes=2",
    "max_epochs=30",
    "monitor=adversarial",
]


# ---------------------------------------------------------------- 1. gradients


def _gradient_cases():
    """Builders for every differentiable op, each returning (build, leaves)."""

    def conv(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, w, b = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
        return (lambda: T.conv2d(x, w, b, stride, pad)), [x, w, b]

    def deconv(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x, w, b = leaf(rng, 1, 3, 3, 3), leaf(rng, 3, 2, 4, 4), leaf(rng, 2)
        return (lambda: T.conv_transpose2d(x, w, b, stride, pad)), [x, w, b]

    def relu(rng):
        x = leaf(rng, 2, 3, 4)
        x.data[np.abs(x.data) < 1e-3] = 0.5
        return (lambda: T.relu(x)), [x]

    def pool(rng):
        x = leaf(rng, 1, 2, 4, 4)
        return (lambda: T.max_pool2d(x, 2)), [x]

    def linear(rng):
        x, w, b = leaf(rng, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
        return (lambda: T.linear(x, w, b)), [x, w, b]

    def batch_norm(training):
        def make(rng):
            x, g, b = leaf(rng, 3, 2, 3, 3), leaf(rng, 2), leaf(rng, 2)
            mean, var = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
            return (lambda: T.batch_norm2d(x, g, b, RunningStats(mean.copy(), var.copy()), training)), [x, g, b]

        return make

    def cross_entropy(rng):
        x = leaf(rng, 4, 6, scale=3.0)
        labels = rng.integers(0, 6, 4)
        return (lambda: T.softmax_cross_entropy(x, labels)), [x]

    def mse(rng):
        x = leaf(rng, 2, 3, 4)
        target = rng.standard_normal((2, 3, 4))
        return (lambda: T.mse(x, target)), [x]

    def pool_add_mul(rng):
        x, y = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 3, 4, 4)
        return (lambda: T.global_avg_pool(T.mul(T.add(x, y), 0.7))), [x, y]

    def product_sum_reshape(rng):
        x, y = leaf(rng, 2, 6), leaf(rng, 2, 6)
        return (lambda: T.tensor_sum(T.reshape(T.mul(x, y), (3, 4)))), [x, y]

    return {
        "conv2d": conv,
        "conv_transpose2d": deconv,
        "relu": relu,
        "max_pool2d": pool,
        "linear": linear,
        "batch_norm2d/train": batch_norm(True),
        "batch_norm2d/eval": batch_norm(False),
        "softmax_cross_entropy": cross_entropy,
        "mse": mse,
        "add/mul/global_avg_pool": pool_add_mul,
        "mul/reshape/sum": product_sum_reshape,
    }


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    worst = {}
    for name, make in _gradient_cases().items():
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(5000 + seed)
            build, leaves = make(rng)
            try:
                errs.append(check(build, leaves, rng, tol=1e-3))
            except AssertionError:
                errs.append(np.inf)
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    verdict(1, "gradient correctness", not bad and elapsed < 120,
            f"{len(worst)} ops x 20 cases, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
            + (f", failing {sorted(bad)}" if bad else ""))


# ---------------------------------------------------------------- 2. FFT


def test_criterion_02_fft_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    err32 = err64 = parseval = symmetry = 0.0
    for _ in range(100):
        g64 = rng.standard_normal((32, 32))
        g32 = g64.astype(np.float32)
        ref64 = dft2_naive(g64).complex
        f64 = fft2(g64).complex
        err64 = max(err64, np.max(np.abs(f64 - ref64)))
        err32 = max(err32, np.max(np.abs(fft2(g32).complex - dft2_naive(g32).complex)))
        parseval = max(parseval, abs(np.sum(np.abs(f64) ** 2) / g64.size - np.sum(g64**2)) / np.sum(g64**2))
        mirrored = np.conj(np.roll(f64[::-1, ::-1], 1, axis=(0, 1)))
        symmetry = max(symmetry, np.max(np.abs(f64 - mirrored)))
    elapsed = time.perf_counter() - start
    ok = err32 < 1e-6 and err64 < 1e-10 and parseval < 1e-12 and symmetry < 1e-10 and elapsed < 60
    verdict(2, "FFT oracle equivalence", ok,
            f"max err f32 {err32:.1e}, f64 {err64:.1e}, Parseval {parseval:.1e}, symmetry {symmetry:.1e}, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 3. adjointness


def test_criterion_03_adjointness():
    start = time.perf_counter()
    worst = 0.0
    count = 0
    for k in (1, 2, 3, 4, 5):
        for stride in (1, 2, 3):
            for pad in range(0, k):
                for size in (7, 8, 11):
                    rng = np.random.default_rng(count)
                    w = rng.standard_normal((3, 2, k, k))
                    out = (size + 2 * pad - k) // stride + 1
                    if out < 1:
                        continue
                    # keep only inputs whose spatial size the transposed op reproduces
                    h = (out - 1) * stride - 2 * pad + k
                    x = rng.standard_normal((2, 2, h, h))
                    y = rng.standard_normal((2, 3, out, out))
                    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), None, stride, pad).data * y)
                    rhs = np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(w), None, stride, pad).data)
                    worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
                    count += 1
    elapsed = time.perf_counter() - start
    verdict(3, "conv adjointness", worst < 1e-6 and elapsed < 60,
            f"{count} geometries, worst rel err {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4. protocol


def test_criterion_04_protocol_fidelity():
    cfg = TrainConfig()
    state = RunState(lr=cfg.initial_lr)
    scheduler_step(state, 0.5, cfg)
    lrs = [state.lr]
    stop_epoch = None
    for epoch in range(1, 40):
        state.epoch = epoch
        scheduler_step(state, 0.4, cfg)
        if state.lr != lrs[-1]:
            lrs.append(state.lr)
        if stop_epoch is None and early_stop_check(state, cfg.patience_epochs):
            stop_epoch = state.since_best
    sched_ok = lrs[:3] == [0.1, 0.1 * 0.2, 0.1 * 0.2 * 0.2]
    sched_ok = sched_ok and np.allclose(lrs[:3], [0.1, 0.02, 0.004], rtol=1e-12, atol=0)

    loss = total_loss(Tensor(np.array(2.3)), Tensor(np.array(10.0)), cfg.lam).item()
    loss_ok = cfg.lam == 0.01 and abs(loss - 2.4) < 1e-12

    records = ImageSet(np.zeros((50_000, 3, 1, 1), np.uint8), np.arange(50_000) % 10)
    split = split_train_val(records, fraction=0.05, seed=0)
    split_ok = (len(split.train), len(split.val)) == (47_500, 2_500)

    ok = sched_ok and stop_epoch == 10 and loss_ok and split_ok
    verdict(4, "protocol fidelity", ok,
            f"lr {lrs[:3]}, early stop after {stop_epoch} stagnant epochs, loss 2.3+0.01*10={loss:.12g}, "
            f"split {len(split.train)}/{len(split.val)}")


# ---------------------------------------------------------------- 5. zero weight


def _trajectory(aux, lam, split, epochs=3):
    net = build_network(EncoderConfig("plain-cnn", 8, seed=11), aux)
    cfg = TrainConfig(lam=lam, batch_size=32)
    opt = T.SGD(net.parameters(), cfg.initial_lr, cfg.momentum, cfg.weight_decay)
    loader = Loader(split.train, cfg.batch_size, "random", seed=4, augment=True)
    snaps = []
    for e in range(epochs):
        train_epoch(net, loader, cfg, opt, e)
        snaps.append({n: p.data.copy() for n, p in net.named_parameters() if not n.startswith("decoder.")})
    return snaps


def test_criterion_05_zero_weight_equivalence():
    split = split_train_val(synth_dataset(64, 2, seed=3), fraction=0.1, seed=0)
    pure = _trajectory(AuxTask.NONE, 0.01, split)
    mismatches = []
    for aux in (AuxTask.RECON, AuxTask.FT):
        other = _trajectory(aux, 0.0, split)
        for epoch, (a, b) in enumerate(zip(pure, other)):
            mismatches += [f"{aux.value}@{epoch}:{k}" for k in a if a[k].tobytes() != b[k].tobytes()]
    verdict(5, "zero-weight equivalence", not mismatches,
            "recon and ft at lambda=0 match the pure classifier bitwise over 3 epochs"
            if not mismatches else f"mismatched {mismatches[:3]}")


# ---------------------------------------------------------------- 6, 8, 9. synthetic training


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = load_config(None, SMOKE)
    runs = {}
    for mode in ("clean", "adversarial"):
        runs[mode] = run_experiment(Cell("micro-resnet", "ft", mode), cfg, out)
    return runs


def test_criterion_06_synthetic_training(smoke_runs):
    r = smoke_runs["clean"]
    ok = r.status == "ok" and r.clean_acc >= 0.85 and r.epochs <= 30 and r.wall_time < 600
    verdict(6, "synthetic training smoke", ok,
            f"micro-resnet + ft clean test acc {r.clean_acc:.4f} after {r.epochs} epochs in {r.wall_time:.0f}s")


def test_criterion_08_attack_effectiveness(smoke_runs):
    r = smoke_runs["clean"]
    drop = r.clean_acc - r.adv_acc
    verdict(8, "FGSM attack effectiveness", r.status == "ok" and drop >= 0.30,
            f"clean {r.clean_acc:.4f} -> FGSM(eps=0.3) {r.adv_acc:.4f}, drop {100 * drop:.1f} points")


def test_criterion_09_adversarial_training_benefit(smoke_runs):
    clean, adv = smoke_runs["clean"], smoke_runs["adversarial"]
    gain = adv.adv_acc - clean.adv_acc
    ok = clean.status == adv.status == "ok" and adv.epochs <= 30 and gain >= 0.15
    verdict(9, "adversarial training benefit", ok,
            f"FGSM acc clean-trained {clean.adv_acc:.4f}, adv-trained {adv.adv_acc:.4f}, gain {100 * gain:.1f} "
            f"points; adv-trained clean acc {adv.clean_acc:.4f}, {adv.wall_time:.0f}s")


# ---------------------------------------------------------------- 7. CIFAR-10


def test_criterion_07_cifar_training(tmp_path):
    name = "CIFAR-10 training smoke"
    if not CIFAR_DIR or not (Path(CIFAR_DIR) / "data_batch_1.bin").is_file():
        skipped(7, name, "set CIFAR10_DIR to the directory holding the *_batch.bin files")
        pytest.skip("CIFAR-10 binaries not available")
    cfg = load_config(None, [f"data_dir={CIFAR_DIR}", "classes=0,1", "train_limit=2000", "max_epochs=30"])
    start = time.perf_counter()
    reports = {aux: run_experiment(Cell("plain-cnn", aux, "clean"), cfg, tmp_path) for aux in ("none", "recon", "ft")}
    elapsed = time.perf_counter() - start
    base = reports["none"]
    ok = all(r.status == "ok" for r in reports.values()) and base.clean_acc >= 0.70 and base.wall_time < 1200
    verdict(7, name, ok,
            ", ".join(f"{aux} {r.clean_acc}" for aux, r in reports.items()) + f"; {elapsed:.0f}s for three runs")


# ---------------------------------------------------------------- 10. FGSM invariants


def test_criterion_10_fgsm_invariants():
    rng = np.random.default_rng(7)
    net = build_network(EncoderConfig("micro-resnet", 8, seed=7), AuxTask.FT)
    net.train()
    before = {k: v.copy() for k, v in net.state_dict().items()}
    x = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
    x[0, 0, 0, :4] = [-0.0, 0.0, np.float32(1e-38), -3.5]
    y = rng.integers(0, 10, 8)
    identity = fgsm(net, x, y, 0.0).tobytes() == x.tobytes()
    worst = 0.0
    for eps in (0.01, 0.1, 0.3, 1.0):
        worst = max(worst, float(np.max(np.abs(fgsm(net, x, y, eps).astype(np.float64) - x)) - eps))
    bounded = worst <= 1e-6
    after = net.state_dict()
    untouched = all(before[k].tobytes() == after[k].tobytes() for k in before)
    untouched = untouched and all(p.grad is None for p in net.parameters()) and net.training
    verdict(10, "FGSM invariants", identity and bounded and untouched,
            f"eps=0 identity {identity}, max overshoot of |delta|_inf {worst:.1e}, weights untouched {untouched}")


# ---------------------------------------------------------------- 11. reproducibility


def test_criterion_11_reproducibility(tmp_path):
    cfg = load_config(None, ["synthetic=true", "synthetic_per_class=48", "synthetic_test_per_class=16", "width=8",
                             "batch_size=32", "max_epochs=3", "val_fraction=0.1"])
    cells = [Cell("plain-cnn", "ft", "adversarial"), Cell("micro-resnet", "recon", "clean")]
    problems = []
    for cell in cells:
        run_experiment(cell, cfg, tmp_path / "first")
        recorded = collect_reports(tmp_path / "first")
        report = next(r for r in recorded if (r.backbone, r.aux, r.mode) == (cell.backbone, cell.aux, cell.mode))
        rerun = reproduce(RunReport.from_json(report.to_json()), tmp_path / "second")
        if (rerun.clean_acc, rerun.adv_acc, rerun.epochs, rerun.seed) != (
            report.clean_acc, report.adv_acc, report.epochs, report.seed
        ):
            problems.append(f"{cell} accuracies differ")
        first = (cell.path(tmp_path / "first") / "checkpoint.bin").read_bytes()
        second = (cell.path(tmp_path / "second") / "checkpoint.bin").read_bytes()
        if first != second:
            problems.append(f"{cell} checkpoints differ")
        loaded = checkpoint_load(cell.path(tmp_path / "first") / "checkpoint.bin")
        resaved = tmp_path / "resaved.bin"
        checkpoint_save(loaded, resaved)
        if resaved.read_bytes() != first:
            problems.append(f"{cell} checkpoint does not round-trip")
    verdict(11, "reproducibility", not problems,
            "reruns match recorded accuracies and checkpoints round-trip byte for byte" if not problems
            else "; ".join(problems))
