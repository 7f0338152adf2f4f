"""Training: Adam optimization, step LR schedule, presets, and run records.

A preset code fully determines {architecture family, checkpoint usage,
loss, sampler}; everything else (epochs, learning rate, batch size, seed,
focal parameters) lives in `TrainConfig`. Runs are deterministic given the
resolved config: the sampler, augmentation, and initialization all draw
from purpose-tagged streams of the run seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DataBundle, compute_class_weights, make_batch, one_hot, sample_weights, weighted_sample
from .images import AugmentationConfig
from .losses import FocalParams, cross_entropy, focal_loss
from .metrics import accuracy, confusion, epoch_average_accuracy
from .nn import Model, build_model, mini_densenet, mini_resnet
from .rng import derive_stream

_AUG_EPOCH_STRIDE = 1_000_003  # distinct augmentation stream per (epoch, position)


class TrainingAborted(RuntimeError):
    """Raised when a non-finite gradient would corrupt the optimizer state."""


@dataclass(frozen=True)
class Preset:
    family: str
    pretrained: bool
    loss: str      # "ce" | "focal"
    sampler: str   # "plain" | "weighted"


PRESETS: dict[str, Preset] = {
    "PRCE": Preset("resnet", True, "ce", "plain"),
    "PRCEW": Preset("resnet", True, "ce", "weighted"),
    "PRFL": Preset("resnet", True, "focal", "plain"),
    "PDCXCE": Preset("densenet", True, "ce", "plain"),
    "PDCXFL": Preset("densenet", True, "focal", "plain"),
    "RCE": Preset("resnet", False, "ce", "plain"),
    "RFL": Preset("resnet", False, "focal", "plain"),
    # scratch DenseNet: the vehicle that produces checkpoints for PDCX* presets
    "DCE": Preset("densenet", False, "ce", "plain"),
}

PRESET_ALIASES = {"PRCW": "PRCEW"}


def canonical_preset(code: str) -> str:
    code = code.upper()
    code = PRESET_ALIASES.get(code, code)
    if code not in PRESETS:
        valid = ", ".join(sorted(PRESETS) + sorted(PRESET_ALIASES))
        raise ValueError(f"unknown preset {code!r}; valid codes: {valid}")
    return code


@dataclass
class TrainConfig:
    """Full run description; `preset` pins family, checkpoint usage, loss, sampler."""

    preset: str
    num_classes: int = 4
    epochs: int = 20
    base_lr: float = 1e-3
    lr_step: int = 10
    lr_factor: float = 0.5
    batch_size: int = 16
    seed: int = 0
    input_size: int = 64
    checkpoint: str | None = None
    freeze: bool = False
    augment: bool = True
    focal: FocalParams = field(default_factory=FocalParams)
    class_weights: tuple[float, ...] | None = None  # weighted-CE variant

    def __post_init__(self):
        self.preset = canonical_preset(self.preset)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.lr_step < 1 or not 0 < self.lr_factor <= 1:
            raise ValueError("invalid learning-rate schedule")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def spec(self) -> Preset:
        return PRESETS[self.preset]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.spec.family
        d["pretrained"] = self.spec.pretrained
        d["loss"] = self.spec.loss
        d["sampler"] = self.spec.sampler
        fp = d.pop("focal")
        d["focal_alpha"] = fp["alpha"]
        d["focal_gamma"] = fp["gamma"]
        return d


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """base_lr * factor ** floor(epoch / step), epochs counted from 0."""
    if epoch < 0:
        raise ValueError("epoch index must be non-negative")
    return config.base_lr * config.lr_factor ** (epoch // config.lr_step)


class Adam:
    """Adam with bias correction; state kept in float64 for exact unit tests."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Variable], lr: float) -> None:
        """One update over all trainable parameters; frozen ones are untouched."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if not p.requires_grad:
                continue
            g = p.grad.astype(np.float64)
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(f"non-finite gradient in {name!r}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.data.shape, dtype=np.float64)
            v = self.v.get(name)
            if v is None:
                v = self.v[name] = np.zeros(p.data.shape, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class RunRecord:
    config: dict
    epoch_metrics: list[EpochMetrics]
    test_loss: float
    test_accuracy: float
    train_acc_avg: float
    val_acc_avg: float
    wall_clock: float
    seed: int
    test_confusion: np.ndarray | None = None
    model: "Model | None" = field(default=None, repr=False, compare=False)


def make_loss(config: TrainConfig):
    spec = config.spec
    if spec.loss == "focal":
        params = config.focal

        def focal(logits: Variable, targets: np.ndarray) -> Variable:
            return focal_loss(logits, targets, params)

        return focal
    weights = config.class_weights

    def ce(logits: Variable, targets: np.ndarray) -> Variable:
        return cross_entropy(logits, targets, class_weights=weights)

    return ce


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def evaluate(model: Model, records, bundle: DataBundle, loss_fn,
             batch_size: int) -> tuple[float, float, np.ndarray]:
    """Eval-mode loss/accuracy/confusion over `records` in file order."""
    if not records:
        raise ValueError("cannot evaluate an empty split")
    total_loss = 0.0
    all_logits = []
    all_labels = []
    for lo, hi in _batches(len(records), batch_size):
        x, labels = make_batch(records, range(lo, hi), bundle.images, bundle.input_size)
        logits = model.forward(x, train=False)
        loss = loss_fn(logits, one_hot(labels, bundle.num_classes))
        total_loss += loss.item() * (hi - lo)
        all_logits.append(logits.data)
        all_labels.append(labels)
    logits = np.concatenate(all_logits)
    labels = np.concatenate(all_labels)
    return (total_loss / len(records), accuracy(logits, labels),
            confusion(logits, labels, bundle.num_classes))


def _epoch_indices(bundle: DataBundle, config: TrainConfig, epoch: int) -> np.ndarray:
    n = len(bundle.train)
    rng = derive_stream(config.seed, "sampler", epoch)
    if config.spec.sampler == "weighted":
        weights = sample_weights(bundle.train, compute_class_weights(bundle.train_class_counts()))
        return weighted_sample(weights, n, rng)
    order = list(range(n))
    rng.shuffle(order)
    return np.asarray(order, dtype=np.int64)


def train_epoch(model: Model, bundle: DataBundle, config: TrainConfig,
                optimizer: Adam, epoch: int, loss_fn=None) -> EpochMetrics:
    """One pass of sampled batches: forward, loss, backward, Adam step."""
    if not bundle.train:
        raise ValueError("cannot train on an empty split")
    loss_fn = loss_fn or make_loss(config)
    lr = lr_at_epoch(epoch, config)
    indices = _epoch_indices(bundle, config, epoch)
    aug_cfg = AugmentationConfig() if config.augment else None

    loss_sum = 0.0
    correct = 0
    for lo, hi in _batches(len(indices), config.batch_size):
        batch_idx = indices[lo:hi]
        rngs = None
        if aug_cfg is not None:
            rngs = [derive_stream(config.seed, "augment", epoch * _AUG_EPOCH_STRIDE + lo + k)
                    for k in range(len(batch_idx))]
        x, labels = make_batch(bundle.train, batch_idx, bundle.images,
                               bundle.input_size, aug_cfg, rngs)
        logits = model.forward(x, train=True)
        loss = loss_fn(logits, one_hot(labels, bundle.num_classes))
        model.store.zero_grads()
        ad.backward(loss)
        optimizer.step(model.store.params, lr)
        loss_sum += loss.item() * len(labels)
        correct += int((logits.data.argmax(axis=1) == labels).sum())

    val_loss, val_acc, _ = evaluate(model, bundle.val, bundle, loss_fn, config.batch_size)
    return EpochMetrics(epoch=epoch, lr=lr,
                        train_loss=loss_sum / len(indices),
                        train_acc=correct / len(indices),
                        val_loss=val_loss, val_acc=val_acc)


def build_for_config(config: TrainConfig, dtype=np.float32) -> Model:
    builder = mini_resnet if config.spec.family == "resnet" else mini_densenet
    arch = builder(num_classes=config.num_classes, input_size=config.input_size)
    return build_model(arch, derive_stream(config.seed, "init"), dtype=dtype)


def fit(config: TrainConfig, bundle: DataBundle, run_dir=None) -> RunRecord:
    """Run the configured training protocol and (optionally) write run artifacts."""
    if config.num_classes != bundle.num_classes:
        raise ValueError(
            f"config expects {config.num_classes} classes but data has {bundle.num_classes}")
    if config.spec.pretrained:
        if not config.checkpoint:
            raise ValueError(f"preset {config.preset} needs a pretrained checkpoint (--checkpoint)")
        if not Path(config.checkpoint).exists():
            raise ValueError(f"checkpoint not found: {config.checkpoint}")
    for split_name, records in (("train", bundle.train), ("val", bundle.val),
                                ("test", bundle.test)):
        if not records:
            raise ValueError(f"{split_name} split is empty; cannot run the configured protocol")
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(
            json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    start = time.monotonic()
    model = build_for_config(config)
    if config.spec.pretrained:
        load_checkpoint(model, config.checkpoint, allow_head_mismatch=True)
    if config.freeze:
        from .nn import freeze_backbone
        freeze_backbone(model)

    optimizer = Adam()
    loss_fn = make_loss(config)
    history: list[EpochMetrics] = []
    for epoch in range(config.epochs):
        history.append(train_epoch(model, bundle, config, optimizer, epoch, loss_fn))

    test_loss, test_acc, test_conf = evaluate(model, bundle.test, bundle, loss_fn, config.batch_size)
    record = RunRecord(
        config=config.to_dict(),
        epoch_metrics=history,
        test_loss=test_loss,
        test_accuracy=test_acc,
        train_acc_avg=epoch_average_accuracy([m.train_acc for m in history]),
        val_acc_avg=epoch_average_accuracy([m.val_acc for m in history]),
        wall_clock=time.monotonic() - start,
        seed=config.seed,
        test_confusion=test_conf,
        model=model,
    )
    if run_dir is not None:
        export_metrics(record, run_dir)
        save_checkpoint(model, run_dir / "model.xrnc", epoch=config.epochs, seed=config.seed)
    return record


METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


def export_metrics(record: RunRecord, run_dir) -> tuple[Path, Path]:
    """Write plot-ready metrics.csv plus the run.json summary."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "metrics.csv"
    lines = [",".join(METRIC_COLUMNS)]
    for m in record.epoch_metrics:
        lines.append(",".join([
            str(m.epoch), repr(float(m.lr)),
            repr(float(m.train_loss)), repr(float(m.train_acc)),
            repr(float(m.val_loss)), repr(float(m.val_acc)),
        ]))
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary = {
        "preset": record.config["preset"],
        "seed": record.seed,
        "epochs": len(record.epoch_metrics),
        "test_accuracy": record.test_accuracy,
        "test_loss": record.test_loss,
        "train_acc_avg": record.train_acc_avg,
        "val_acc_avg": record.val_acc_avg,
        "epoch_metrics": "metrics.csv",
        "wall_clock": record.wall_clock,
        "config": record.config,
    }
    json_path = run_dir / "run.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def parse_metrics_csv(path) -> list[EpochMetrics]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != ",".join(METRIC_COLUMNS):
        raise ValueError(f"{path}: unexpected metrics header")
    out = []
    for line in lines[1:]:
        e, lr, tl, ta, vl, va = line.split(",")
        out.append(EpochMetrics(int(e), float(lr), float(tl), float(ta), float(vl), float(va)))
    return out
