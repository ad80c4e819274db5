"""Training loop, schedules, reports, checkpoints and activation-curve export.

Log formats (one JSON object per line):

``report.jsonl``
    ``{"epoch", "train_loss", "model_loss", "reg_loss", "test_error", "lr", "wall_time", "steps"}``
``steps.jsonl``
    ``{"epoch", "step", "model_loss", "reg_loss", "total_loss"}``
``curves.jsonl``
    ``{"epoch", "layer", "unit", "kind", "params", "xs", "ys", "grid", "y"}`` where
    ``grid`` is ``{"start", "stop", "num"}`` and ``y`` the sampled curve; ``xs``/``ys``
    are the control-point locations (null for activations without them).
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from polyneuron.activations import (
    ActivationSpec,
    RegularizerConfig,
    activations_of,
    regularizer_loss,
)
from polyneuron.autodiff import checkpoint
from polyneuron.autodiff import functional as F
from polyneuron.autodiff.nn import find_non_finite
from polyneuron.autodiff.optim import Adam
from polyneuron.autodiff.tensor import Tensor
from polyneuron.data import (
    AugmentConfig,
    batches,
    class_balanced_subset,
    load_cifar10,
    load_mnist,
    normalization_for,
)
from polyneuron.exceptions import (
    CheckpointError,
    ConfigError,
    NonFiniteLossError,
    SingularSystemError,
)
from polyneuron.models import ModelSpec, build

log = logging.getLogger(__name__)

DATA_ENV = "POLYNEURON_DATA"
CURVE_GRID = (-3.0, 3.0, 201)

BENCHMARKS = {
    "lenet5-mnist": {"architecture": "lenet5", "dataset": "mnist", "epochs": 30, "lr_drops": (20, 25)},
    "resnet20-cifar10": {
        "architecture": "resnet20",
        "dataset": "cifar10",
        "epochs": 500,
        "lr_drops": (250, 375),
    },
}
DESK_PRESETS = {
    "lenet5-mnist": {"epochs": 5, "train_subset": None, "test_subset": None},
    "resnet20-cifar10": {"epochs": 5, "train_subset": 5000, "test_subset": 1000},
}


@dataclass
class TrainConfig:
    benchmark: str = "lenet5-mnist"
    activation: str = "relu"
    sharing: str = "channel"
    epochs: int | None = None
    lr: float = 1e-3
    lr_drops: tuple[int, ...] | None = None
    batch_size: int = 128
    weight_decay: float = 1e-4
    lambda_prod: float = 0.0
    lambda_sum: float = 1e-2
    s: int = 3
    k: int = 3
    seed: int = 0
    data_dir: str | None = None
    out_dir: str = "runs/default"
    desk_scale: bool = False
    train_subset: int | None = None
    test_subset: int | None = None
    max_steps_per_epoch: int | None = None
    export_interval: int | None = None
    export_units: int = 4
    augment: bool = True
    pad: int = 4
    flip: bool = True
    flip_axis: str = "vertical"
    strict_data: bool = True

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; expected one of {sorted(BENCHMARKS)}")
        preset = BENCHMARKS[self.benchmark]
        desk = DESK_PRESETS[self.benchmark] if self.desk_scale else {}
        if self.epochs is None:
            self.epochs = desk.get("epochs", preset["epochs"])
        if self.lr_drops is None:
            # desk runs keep the drops at the same fraction of training
            scale = self.epochs / preset["epochs"]
            drops = sorted({int(d * scale) for d in preset["lr_drops"]})
            self.lr_drops = tuple(d for d in drops if 0 < d < self.epochs)
        self.lr_drops = tuple(int(d) for d in self.lr_drops)
        if self.desk_scale:
            if self.train_subset is None:
                self.train_subset = desk["train_subset"]
            if self.test_subset is None:
                self.test_subset = desk["test_subset"]
        if self.export_interval is None:
            self.export_interval = 1 if self.desk_scale else 10
        self.activation_spec()
        RegularizerConfig(self.lambda_prod, self.lambda_sum)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if any(b <= a for a, b in zip(self.lr_drops, self.lr_drops[1:])):
            raise ConfigError(f"lr drop epochs must be strictly increasing, got {list(self.lr_drops)}")
        if any(d <= 0 or d >= self.epochs for d in self.lr_drops):
            raise ConfigError(f"lr drop epochs must lie in (0, {self.epochs}), got {list(self.lr_drops)}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("rates must be nonnegative")
        if self.batch_size < 1 or self.export_interval < 1:
            raise ConfigError("batch_size and export_interval must be positive")

    @property
    def architecture(self):
        return BENCHMARKS[self.benchmark]["architecture"]

    @property
    def dataset(self):
        return BENCHMARKS[self.benchmark]["dataset"]

    def activation_spec(self):
        return ActivationSpec(self.activation, self.sharing, self.s, self.k)

    def regularizer(self):
        return RegularizerConfig(self.lambda_prod, self.lambda_sum)

    def lr_at(self, epoch_index):
        """Learning rate during the 0-based ``epoch_index``."""
        passed = sum(epoch_index >= d for d in self.lr_drops)
        return self.lr / 10**passed

    def resolved_data_dir(self):
        return self.data_dir or os.environ.get(DATA_ENV) or "data"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("lr_drops") is not None:
            d["lr_drops"] = tuple(d["lr_drops"])
        return cls(**d)


def _coerce(name, raw: str):
    ftype = {f.name: f.type for f in dataclasses.fields(TrainConfig)}[name]
    raw = raw.strip()
    if raw.lower() in ("none", "null", "") and "None" in str(ftype):
        return None
    try:
        if "tuple" in str(ftype):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if "bool" in str(ftype):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in str(ftype):
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into typed TrainConfig fields."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[train]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, raw in parser["train"].items():
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    model_loss: float
    reg_loss: float
    test_error: float
    lr: float
    wall_time: float
    steps: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class Trainer:
    """Owns a model and its optimizer; one instance per thread."""

    model: object
    lr: float = 1e-3
    weight_decay: float = 1e-4
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)

    def __post_init__(self):
        self.optimizer = Adam(self.model.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        self.activations = activations_of(self.model)
        self.step_index = 0
        self.normalization = None

    def refresh(self):
        for act in self.activations:
            act.refresh()

    def losses(self, x, y):
        logits = self.model(Tensor(x))
        model_loss = F.softmax_cross_entropy(logits, y)
        reg = regularizer_loss(self.activations, self.regularizer)
        return model_loss, reg

    def _diagnose(self, x):
        with find_non_finite() as found:
            self.model(Tensor(x))
        if found["layer"] is None:
            for name, p in self.model.named_parameters():
                if not np.all(np.isfinite(p.data)):
                    return name
        return found["layer"]

    def train_step(self, x, y):
        """One optimizer step; returns ``(model_loss, reg_loss)`` as floats."""
        self.model.train()
        self.optimizer.zero_grad()
        model_loss, reg = self.losses(x, y)
        total = model_loss + reg if reg.requires_grad else model_loss
        m, r = float(model_loss.item()), float(reg.item())
        if not (np.isfinite(m) and np.isfinite(r)):
            layer = self._diagnose(x)
            raise NonFiniteLossError(
                f"non-finite loss at step {self.step_index} (model={m}, reg={r}); first offending layer: {layer}",
                step=self.step_index,
                layer=layer,
            )
        total.backward()
        self.optimizer.step()
        self.step_index += 1
        for name, p in self.model.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteLossError(
                    f"parameter {name} became non-finite at step {self.step_index - 1}",
                    step=self.step_index - 1,
                    layer=name.rsplit(".", 1)[0],
                )
        for act in self.activations:
            try:
                act.refresh()
            except SingularSystemError as exc:
                raise NonFiniteLossError(
                    f"spline re-solve failed in {act._path} after step {self.step_index - 1}: {exc}",
                    step=self.step_index - 1,
                    layer=act._path,
                ) from exc
        return m, r

    def logits(self, x, batch_size=256):
        self.model.eval()
        out = []
        for start in range(0, len(x), batch_size):
            out.append(self.model(Tensor(x[start : start + batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, 10))

    def error_rate(self, dataset, cfg: AugmentConfig, batch_size=256):
        """Classification error in percent over ``dataset`` (evaluation mode)."""
        self.model.eval()
        wrong = 0
        for x, y in batches(dataset, batch_size, cfg=cfg, train=False):
            wrong += int((self.model(Tensor(x)).data.argmax(axis=1) != y).sum())
        return 100.0 * wrong / max(len(dataset), 1)


def load_datasets(cfg: TrainConfig):
    directory = cfg.resolved_data_dir()
    if cfg.dataset == "mnist":
        train, test = load_mnist(directory, strict=cfg.strict_data)
    else:
        train, test = load_cifar10(directory, strict=cfg.strict_data)
    return train, test


def prepare_datasets(cfg: TrainConfig, datasets=None):
    train, test = datasets if datasets is not None else load_datasets(cfg)
    rng = np.random.default_rng(cfg.seed + 7919)
    if cfg.train_subset and cfg.train_subset < len(train):
        train = class_balanced_subset(train, cfg.train_subset, rng)
    if cfg.test_subset and cfg.test_subset < len(test):
        test = class_balanced_subset(test, cfg.test_subset, rng)
    cache = cfg.resolved_data_dir() if datasets is None else None
    mean, std = normalization_for(train, cache)
    train_aug = AugmentConfig(
        pad=cfg.pad if cfg.augment else 0,
        flip=cfg.flip and cfg.augment,
        flip_axis=cfg.flip_axis,
        mean=mean,
        std=std,
    )
    test_aug = AugmentConfig(pad=0, flip=False, mean=mean, std=std)
    return train, test, train_aug, test_aug


def curve_records(model, epoch, units_per_layer=4, grid=CURVE_GRID):
    """Curve-export records for the first ``units_per_layer`` units of every
    activation layer."""
    xs_grid = np.linspace(*grid[:2], int(grid[2]))
    records = []
    for act in activations_of(model):
        curves = act.unit_curves(xs_grid)
        for u in range(min(act.units, units_per_layer)):
            params = act.describe_unit(u)
            cx = params.get("xs")
            cy = params.get("ys")
            records.append(
                {
                    "epoch": int(epoch),
                    "layer": act._path,
                    "unit": u,
                    "kind": act.kind,
                    "params": {k: v for k, v in params.items() if k not in ("xs", "ys")},
                    "xs": cx,
                    "ys": cy,
                    "grid": {"start": grid[0], "stop": grid[1], "num": int(grid[2])},
                    "y": curves[u].tolist(),
                }
            )
    return records


def export_curves(model, epoch, path, units_per_layer=4):
    """Append the curve records for ``epoch`` to the JSONL file at ``path``."""
    records = curve_records(model, epoch, units_per_layer)
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def model_arrays(model, optimizer=None):
    arrays = {f"param.{n}": p.data for n, p in model.named_parameters()}
    for name, module, attr in model.named_buffers():
        arrays[f"buffer.{name}"] = getattr(module, attr)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def save_checkpoint(path, cfg: TrainConfig, trainer: Trainer, epoch):
    meta = {
        "format": "polyneuron-checkpoint",
        "config": cfg.to_dict(),
        "epoch": int(epoch),
        "step": trainer.step_index,
        "optimizer": trainer.optimizer.state_meta(),
        "param_names": [n for n, _ in trainer.model.named_parameters()],
        "normalization": trainer.normalization,
    }
    checkpoint.save(path, meta, model_arrays(trainer.model, trainer.optimizer))


def load_checkpoint(path):
    """Rebuild ``(cfg, trainer, epoch)`` from a checkpoint file."""
    meta, arrays = checkpoint.load(path)
    if meta.get("format") != "polyneuron-checkpoint" or "config" not in meta:
        raise CheckpointError(f"{path}: missing polyneuron metadata")
    cfg = TrainConfig.from_dict(meta["config"])
    model = build(ModelSpec(cfg.architecture, cfg.activation_spec()), seed=cfg.seed)
    names = [n for n, _ in model.named_parameters()]
    if names != meta.get("param_names"):
        raise CheckpointError(f"{path}: parameter layout does not match the configured model")
    for name, p in model.named_parameters():
        arr = arrays.get(f"param.{name}")
        if arr is None or arr.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name} missing or mis-shaped")
        p.data = np.array(arr, dtype=p.dtype)
    for name, module, attr in model.named_buffers():
        arr = arrays.get(f"buffer.{name}")
        if arr is None:
            raise CheckpointError(f"{path}: buffer {name} missing")
        setattr(module, attr, np.array(arr, dtype=getattr(module, attr).dtype))
    trainer = Trainer(model, cfg.lr, cfg.weight_decay, cfg.regularizer())
    trainer.optimizer.load_state(meta["optimizer"], arrays)
    trainer.step_index = int(meta.get("step", 0))
    trainer.normalization = meta.get("normalization")
    trainer.refresh()
    return cfg, trainer, int(meta["epoch"])


def _append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def run_training(cfg: TrainConfig, datasets=None, progress=None, model=None):
    """Train per ``cfg``; returns ``(reports, checkpoint_path)``.

    ``datasets`` may supply ``(train, test)`` directly instead of loading
    from ``cfg.data_dir``; ``model`` may supply a network built from the
    same spec and seed, e.g. with edited initial activation parameters.  Output files go to ``cfg.out_dir`` and are
    replaced, not appended to, at the start of a run.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path, steps_path, curves_path = out / "report.jsonl", out / "steps.jsonl", out / "curves.jsonl"
    for p in (report_path, steps_path, curves_path):
        p.unlink(missing_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

    train, test, train_aug, test_aug = prepare_datasets(cfg, datasets)
    if model is None:
        model = build(ModelSpec(cfg.architecture, cfg.activation_spec()), seed=cfg.seed)
    trainer = Trainer(model, cfg.lr, cfg.weight_decay, cfg.regularizer())
    trainer.refresh()
    trainer.normalization = {"mean": list(train_aug.mean), "std": list(train_aug.std)}
    rng = np.random.default_rng(cfg.seed + 1)
    export_curves(model, 0, curves_path, cfg.export_units)

    reports = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        trainer.optimizer.lr = lr
        sums = np.zeros(2)
        steps = 0
        for x, y in batches(train, cfg.batch_size, rng, train_aug, train=True):
            if cfg.max_steps_per_epoch is not None and steps >= cfg.max_steps_per_epoch:
                break
            m, r = trainer.train_step(x, y)
            _append_jsonl(
                steps_path,
                {"epoch": epoch + 1, "step": trainer.step_index, "model_loss": m, "reg_loss": r, "total_loss": m + r},
            )
            sums += (m, r)
            steps += 1
        err = trainer.error_rate(test, test_aug)
        mean_m, mean_r = (sums / max(steps, 1)).tolist()
        report = EpochReport(
            epoch=epoch + 1,
            train_loss=mean_m + mean_r,
            model_loss=mean_m,
            reg_loss=mean_r,
            test_error=err,
            lr=lr,
            wall_time=time.perf_counter() - t0,
            steps=steps,
        )
        if not all(np.isfinite([report.train_loss, report.test_error])):
            raise NonFiniteLossError(f"non-finite metrics in epoch {epoch + 1}", step=trainer.step_index)
        reports.append(report)
        _append_jsonl(report_path, report.to_dict())
        if (epoch + 1) % cfg.export_interval == 0 or epoch + 1 == cfg.epochs:
            export_curves(model, epoch + 1, curves_path, cfg.export_units)
        log.info(
            "epoch %d loss %.4f (reg %.5f) test error %.2f%% lr %g [%.1fs]",
            report.epoch, report.train_loss, report.reg_loss, err, lr, report.wall_time,
        )
        if progress is not None:
            progress(report)
    ckpt = out / "checkpoint.pnck"
    save_checkpoint(ckpt, cfg, trainer, cfg.epochs)
    return reports, ckpt


def evaluate(checkpoint_path, split="test", datasets=None, data_dir=None):
    """Error percentage of a checkpointed model on ``split``."""
    cfg, trainer, _ = load_checkpoint(checkpoint_path)
    if data_dir is not None:
        cfg.data_dir = data_dir
    if datasets is None:
        datasets = load_datasets(cfg)
    train, test = datasets
    norm = trainer.normalization
    if norm is None:
        raise CheckpointError(f"{checkpoint_path}: no normalization constants stored")
    aug = AugmentConfig(pad=0, flip=False, mean=tuple(norm["mean"]), std=tuple(norm["std"]))
    ds = {"train": train, "test": test}.get(split)
    if ds is None:
        raise ConfigError(f"unknown split {split!r}; expected train or test")
    return trainer.error_rate(ds, aug)
