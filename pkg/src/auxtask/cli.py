"""Experiment harness: backbone x aux task x training mode grids and accuracy tables.

Config files are flat ``key = value`` text; ``--set key=value`` overrides them.
Precedence is command line > file > defaults.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .adversarial import AdvConfig, adv_evaluate
from .data import DatasetSplit, Loader, load_cifar10, split_train_val, synth_dataset
from .models import AuxTask, EncoderConfig, build_network
from .training import DivergenceError, TrainConfig, checkpoint_load, checkpoint_save, evaluate, fit

log = logging.getLogger("auxtask")

AUX_ORDER = (AuxTask.NONE, AuxTask.RECON, AuxTask.FT)
MODES = ("clean", "adversarial")


@dataclass
class ExperimentConfig:
    # grid
    backbones: tuple[str, ...] = ("plain-cnn", "micro-resnet")
    aux_tasks: tuple[str, ...] = ("none", "recon", "ft")
    train_modes: tuple[str, ...] = ("clean", "adversarial")
    seed: int = 0
    width: int = 16
    # training
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
    monitor: str = "clean"
    log_magnitude: bool = False
    augment_train: bool = True
    augment_val: bool = True
    val_fraction: float = 0.05
    # attack
    epsilon: float = 0.3
    adv_fraction: float = 0.5
    attack_includes_aux: bool = False
    clip: tuple[float, ...] = ()
    # data
    data_dir: str = ""
    synthetic: bool = False
    synthetic_per_class: int = 1000
    synthetic_test_per_class: int = 200
    synthetic_classes: int = 2
    synthetic_amplitude: float = 30.0
    synthetic_noise: float = 50.0
    classes: tuple[int, ...] = ()
    train_limit: int = 0
    data_seed: int = 0

    ALIASES = {"lambda": "lam", "aux": "aux_tasks", "backbone": "backbones", "modes": "train_modes"}

    def adv_config(self) -> AdvConfig:
        clip = tuple(self.clip) if self.clip else None
        return AdvConfig(self.epsilon, self.adv_fraction, clip, self.attack_includes_aux)

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kwargs = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kwargs["seed"] = seed
        kwargs["adv"] = self.adv_config() if mode == "adversarial" else None
        if mode != "adversarial":
            kwargs["monitor"] = "clean"
        return TrainConfig(**kwargs)

    def to_dict(self) -> dict:
        """JSON-native snapshot (tuples become lists) so reports round-trip unchanged."""
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def updated(self, pairs: dict[str, str | object]) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(self)}
        values = {}
        for key, raw in pairs.items():
            key = self.ALIASES.get(key, key)
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = _coerce(raw, getattr(self, key))
        return dataclasses.replace(self, **values)


def _coerce(raw, current):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(current, tuple) else raw
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if key_is_numeric(current, raw):
            return tuple(float(s) if "." in s or "e" in s.lower() else int(s) for s in items)
        return tuple(items)
    return raw


def key_is_numeric(current: tuple, raw: str) -> bool:
    if current:
        return isinstance(current[0], (int, float))
    return all(_is_number(s) for s in raw.split(",") if s.strip())


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        cfg = cfg.updated(parse_config_text(Path(path).read_text()))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return cfg.updated(pairs)


# ---------------------------------------------------------------- data


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.synthetic:
        n_train, n_test = cfg.synthetic_per_class, cfg.synthetic_test_per_class
        full = synth_dataset(n_train + n_test, cfg.synthetic_classes, cfg.data_seed,
                             cfg.synthetic_amplitude, cfg.synthetic_noise)
        k = cfg.synthetic_classes
        train = full.subset(np.arange(n_train * k))
        test = full.subset(np.arange(n_train * k, (n_train + n_test) * k))
    else:
        if not cfg.data_dir:
            raise FileNotFoundError("no dataset: pass --data-dir pointing at the CIFAR-10 *_batch.bin files, or --synthetic")
        train, test = load_cifar10(cfg.data_dir)
        if cfg.classes:
            train, test = train.filter_classes(cfg.classes), test.filter_classes(cfg.classes)
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    return split_train_val(train, test, cfg.val_fraction, cfg.data_seed)


# ---------------------------------------------------------------- runs


@dataclass(frozen=True)
class Cell:
    backbone: str
    aux: str
    mode: str

    def path(self, root: Path) -> Path:
        return root / self.backbone / self.aux / self.mode


def cell_seed(base_seed: int, cell: Cell) -> int:
    digest = hashlib.sha256(f"{base_seed}|{cell.backbone}|{cell.aux}|{cell.mode}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunReport:
    backbone: str
    aux: str
    mode: str
    status: str
    clean_acc: float | None
    adv_acc: float | None
    epochs: int
    best_epoch: int
    wall_time: float
    seed: int
    config: dict = field(default_factory=dict)
    error: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunReport":
        return cls(**json.loads(line))


def run_experiment(cell: Cell, cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   split: DatasetSplit | None = None) -> RunReport:
    """Train one cell with early stopping, restore best-val weights, test clean and under FGSM."""
    seed = cell_seed(cfg.seed, cell)
    start = time.perf_counter()
    cell_dir = cell.path(Path(out_dir)) if out_dir is not None else None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport(cell.backbone, cell.aux, cell.mode, "ok", None, None, 0, -1, 0.0, seed, cfg.to_dict())
    try:
        if split is None:
            split = load_split(cfg)
        tcfg = cfg.train_config(cell.mode, seed)
        net = build_network(EncoderConfig(cell.backbone, cfg.width, seed), AuxTask.parse(cell.aux))
        state = fit(net, split, tcfg, cell_dir / "metrics.csv" if cell_dir else None)
        split.begin_evaluation()
        test_loader = Loader(split.test, cfg.batch_size, "sequential")
        adv = cfg.adv_config()
        report.clean_acc = evaluate(net, test_loader)
        report.adv_acc = adv_evaluate(net, test_loader, adv.epsilon, adv.clip)
        report.epochs = len(state.history)
        report.best_epoch = state.best_epoch
        if cell_dir is not None:
            checkpoint_save(net, cell_dir / "checkpoint.bin")
    except DivergenceError as exc:
        report.status, report.error = "failed", str(exc)
        log.warning("cell %s diverged: %s", cell, exc)
    report.wall_time = time.perf_counter() - start
    if cell_dir is not None:
        (cell_dir / "report.jsonl").write_text(report.to_json() + "\n")
    return report


def reproduce(report: RunReport, out_dir: str | Path | None = None) -> RunReport:
    """Rerun a cell from its recorded config snapshot."""
    cfg = ExperimentConfig().updated({k: v for k, v in report.config.items()})
    return run_experiment(Cell(report.backbone, report.aux, report.mode), cfg, out_dir)


def grid_cells(cfg: ExperimentConfig) -> list[Cell]:
    cells = [Cell(b, AuxTask.parse(a).value, m) for b in cfg.backbones for a in cfg.aux_tasks for m in cfg.train_modes]
    if not cells:
        raise ValueError("experiment grid is empty")
    for c in cells:
        if c.mode not in MODES:
            raise ValueError(f"unknown train mode {c.mode!r}; choose from {MODES}")
    return cells


def _run_cell(args):
    cell, cfg, out_dir = args
    return run_experiment(cell, cfg, out_dir)


def run_grid(cfg: ExperimentConfig, out_dir: str | Path, workers: int = 1) -> list[RunReport]:
    cells = grid_cells(cfg)
    jobs = [(c, cfg, out_dir) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_cell, jobs))
    else:
        split = load_split(cfg)
        reports = []
        for c in cells:
            # each cell gets a fresh phase guard over the shared arrays
            fresh = dataclasses.replace(split, _evaluating=False)
            reports.append(run_experiment(c, cfg, out_dir, fresh))
    write_table(reports, out_dir)
    return reports


# ---------------------------------------------------------------- reporting


def collect_reports(out_dir: str | Path) -> list[RunReport]:
    rows = []
    for path in sorted(Path(out_dir).glob("*/*/*/report.jsonl")):
        for line in path.read_text().splitlines():
            if line.strip():
                rows.append(RunReport.from_json(line))
    return rows


def report_table(reports: Sequence[RunReport]) -> tuple[str, str]:
    """CSV (source of truth) and an aligned text rendering of the accuracy table.

    Rows are (backbone, mode); columns are aux task x {clean, adv} in the
    order none, recon, ft.
    """
    if not reports:
        raise ValueError("no reports to tabulate")
    present = {r.aux for r in reports}
    auxes = [a.value for a in AUX_ORDER if a.value in present]
    rows: dict[tuple[str, str], dict[str, RunReport]] = {}
    for r in reports:
        rows.setdefault((r.backbone, r.mode), {})[r.aux] = r
    header = ["backbone", "mode"] + [f"{a}_{kind}" for a in auxes for kind in ("clean", "adv")]

    def cell_values(r: RunReport | None, fmt):
        if r is None:
            return ["", ""]
        if r.status != "ok":
            return ["FAILED", "FAILED"]
        return [fmt(r.clean_acc), fmt(r.adv_acc)]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    text_rows = [header]
    for (backbone, mode) in sorted(rows, key=lambda k: (k[0], MODES.index(k[1]) if k[1] in MODES else 9)):
        line, text = [backbone, mode], [backbone, mode]
        for a in auxes:
            r = rows[(backbone, mode)].get(a)
            line += cell_values(r, repr)
            text += cell_values(r, lambda v: f"{100 * v:.2f}")
        writer.writerow(line)
        text_rows.append(text)
    widths = [max(len(row[i]) for row in text_rows) for i in range(len(header))]
    rendered = "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in text_rows)
    return buf.getvalue(), rendered + "\n"


def write_table(reports: Sequence[RunReport], out_dir: str | Path) -> str:
    csv_text, text = report_table(reports)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(csv_text)
    (out / "table.txt").write_text(text)
    return text


# ---------------------------------------------------------------- command line


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data-dir", help="directory holding the CIFAR-10 *_batch.bin files")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic grating dataset")
    p.add_argument("--out", default="runs", help="output directory")


def _config_from_args(args) -> ExperimentConfig:
    extra = list(args.set)
    if args.data_dir:
        extra.append(f"data_dir={args.data_dir}")
    if args.synthetic:
        extra.append("synthetic=true")
    return load_config(args.config, extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxtask", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate one grid cell")
    _common(p)
    p.add_argument("--backbone", default="micro-resnet")
    p.add_argument("--aux", default="ft", choices=[a.value for a in AUX_ORDER])
    p.add_argument("--mode", default="clean", choices=MODES)

    p = sub.add_parser("grid", help="run the full backbone x aux x mode matrix")
    _common(p)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("attack-eval", help="evaluate a checkpoint on clean and FGSM test data")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("report", help="aggregate report rows under --out into table.csv/table.txt")
    p.add_argument("--out", default="runs")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            reports = collect_reports(args.out)
            sys.stdout.write(write_table(reports, args.out))
            return 0 if all(r.status == "ok" for r in reports) else 1
        cfg = _config_from_args(args)
        if args.command == "train":
            cell = Cell(args.backbone, args.aux, args.mode)
            report = run_experiment(cell, cfg, args.out)
            sys.stdout.write(write_table(collect_reports(args.out), args.out))
            return 0 if report.status == "ok" else 1
        if args.command == "grid":
            reports = run_grid(cfg, args.out, args.workers)
            sys.stdout.write(report_table(reports)[1])
            return 0 if all(r.status == "ok" for r in reports) else 1
        if args.command == "attack-eval":
            net = checkpoint_load(args.checkpoint)
            split = load_split(cfg)
            split.begin_evaluation()
            loader = Loader(split.test, cfg.batch_size, "sequential")
            eps = cfg.epsilon if args.epsilon is None else args.epsilon
            clean = evaluate(net, loader)
            adv = adv_evaluate(net, loader, eps, cfg.adv_config().clip)
            print(json.dumps({"checkpoint": args.checkpoint, "epsilon": eps, "clean_acc": clean, "adv_acc": adv}))
            return 0
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
