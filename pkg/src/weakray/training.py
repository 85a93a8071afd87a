"""Training and evaluation orchestration.

The model is the backbone plus the bridging layer plus the head config.
One training step runs backbone -> bridging -> class-wise pool ->
random-top-k spatial pool -> class-weighted BCE on the sampled logits,
backpropagates, and applies the optimizer.  The learning rate follows a
step schedule, ``lr * factor ** floor(epoch / every)``.

Checkpoints are a binary container of named float32 little-endian arrays
keyed by layer path, preceded by the canonical config text and its hash;
saving, loading and re-saving is byte-identical, and evaluation refuses a
checkpoint whose config hash does not match an expected one.

Training runs single-writer.  ``batch_gradients`` computes the
deterministic test-path gradient of a batch and is the building block for
data-parallel sharding: gradients merged across shards (weighted by shard
size) equal the single-batch gradient since the loss is a mean.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import localization as loc
from .config import config_hash, format_config, train_config_from_flat, train_config_to_flat, parse_config_text
from .data import Sample
from .densenet import DenseBackbone, DenseNetConfig, toy_config
from .metrics import ClassificationReport, classification_report
from .tensor import Tensor, no_grad
from .wsl import (
    BridgingLayer,
    ClassScores,
    HeadConfig,
    class_weights_from_labels,
    class_wise_pool,
    spatial_pool_test,
    spatial_pool_train,
    weighted_bce,
)

__all__ = [
    "TrainConfig",
    "WslModel",
    "build_model",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from_model",
    "model_from_checkpoint",
    "TrainingDivergedError",
    "learning_rate_at",
    "train",
    "TrainResult",
    "evaluate",
    "EvalResult",
    "sweep",
    "SweepResult",
    "batch_gradients",
]

CHECKPOINT_MAGIC = b"WRAYCKP1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    net: DenseNetConfig = field(default_factory=toy_config)
    head: HeadConfig = field(default_factory=lambda: HeadConfig(("class_0", "class_1")))
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.002
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    optimizer: str = "sgd"  # sgd (uses momentum field; 0 means plain) or adam
    momentum: float = 0.9
    l2_penalty: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    invert_class_weights: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs it)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class WslModel:
    """Backbone + bridging layer + head configuration."""

    def __init__(self, net: DenseNetConfig, head: HeadConfig,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        self.backbone = DenseBackbone(net, rng=rng, dtype=dtype)
        self.bridge = BridgingLayer(self.backbone.out_channels, head, rng=rng, dtype=dtype)
        self.head = head

    def heatmap(self, x: Tensor, mode: str = "eval",
                rng: np.random.Generator | None = None):
        features = self.backbone.forward(x, mode, rng)
        return class_wise_pool(self.bridge(features), self.head)

    def scores_train(self, x: Tensor, rng: np.random.Generator) -> ClassScores:
        return spatial_pool_train(self.heatmap(x, "train", rng), self.head, rng)

    def scores_test(self, x: Tensor) -> tuple:
        heatmap = self.heatmap(x, "eval")
        return spatial_pool_test(heatmap, self.head), heatmap

    def named_parameters(self):
        out = [(f"backbone.{n}", t) for n, t in self.backbone.named_parameters()]
        out += self.bridge.named_parameters()
        return out

    def named_buffers(self):
        return [(f"backbone.{n}", t) for n, t in self.backbone.named_buffers()]

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()


def build_model(net: DenseNetConfig, head: HeadConfig, seed: int = 0,
                dtype=np.float64) -> WslModel:
    return WslModel(net, head, rng=np.random.default_rng(seed), dtype=dtype)


# ---------------------------------------------------------------------------
# optimizers


class _Sgd:
    def __init__(self, params, momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float, l2: float):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad if l2 == 0.0 else p.grad + l2 * p.data
            if self.momentum:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                g = v
            p.data = p.data - lr * g


class _Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}
        self.t = 0

    def step(self, lr: float, l2: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad if l2 == 0.0 else p.grad + l2 * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return _Adam(params)
    return _Sgd(params, config.momentum)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Named parameter arrays plus everything needed to resume or evaluate."""

    config_text: str
    params: dict  # name -> float32 array
    buffers: dict  # name -> float32 array
    epoch: int
    rng_state: dict

    @property
    def hash(self) -> str:
        return config_hash(self.config_text)


def checkpoint_from_model(model: WslModel, config: TrainConfig, epoch: int,
                          rng_state: dict | None = None) -> Checkpoint:
    params = {n: np.asarray(p.data, dtype=np.float32).copy() for n, p in model.named_parameters()}
    buffers = {n: np.asarray(b.data, dtype=np.float32).copy() for n, b in model.named_buffers()}
    return Checkpoint(
        config_text=format_config(train_config_to_flat(config)),
        params=params,
        buffers=buffers,
        epoch=epoch,
        rng_state=rng_state or {},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple:
    """Rebuild (model, config) and load the stored arrays into it."""
    config = train_config_from_flat(parse_config_text(ckpt.config_text))
    model = build_model(config.net, config.head, seed=config.seed, dtype=config.np_dtype)
    named = dict(model.named_parameters())
    for name, arr in ckpt.params.items():
        if name not in named:
            raise ValueError(f"checkpoint parameter {name!r} not present in the model")
        named[name].data = arr.astype(config.np_dtype).reshape(named[name].shape)
    buffered = dict(model.named_buffers())
    for name, arr in ckpt.buffers.items():
        if name not in buffered:
            raise ValueError(f"checkpoint buffer {name!r} not present in the model")
        buffered[name].data = arr.astype(config.np_dtype).reshape(buffered[name].shape)
    return model, config


def _write_block(f, name: str, arr: np.ndarray):
    encoded = name.encode()
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    data = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<Q", data.nbytes))
    f.write(data.tobytes())


def _read_block(f):
    (name_len,) = struct.unpack("<H", f.read(2))
    name = f.read(name_len).decode()
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    (nbytes,) = struct.unpack("<Q", f.read(8))
    arr = np.frombuffer(f.read(nbytes), dtype="<f4").reshape(shape).copy()
    return name, arr


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, version, config hash + text, epoch, rng state
    as JSON, then length-prefixed named float32 little-endian arrays."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg_bytes = ckpt.config_text.encode()
        f.write(hashlib.sha256(cfg_bytes).digest())
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", ckpt.epoch))
        rng_bytes = json.dumps(ckpt.rng_state, sort_keys=True).encode()
        f.write(struct.pack("<I", len(rng_bytes)))
        f.write(rng_bytes)
        for section in (ckpt.params, ckpt.buffers):
            f.write(struct.pack("<I", len(section)))
            for name in sorted(section):
                _write_block(f, name, section[name])


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        stored_hash = f.read(32)
        (cfg_len,) = struct.unpack("<I", f.read(4))
        cfg_bytes = f.read(cfg_len)
        if hashlib.sha256(cfg_bytes).digest() != stored_hash:
            raise ValueError(f"{path}: config hash mismatch, file is corrupt")
        (epoch,) = struct.unpack("<I", f.read(4))
        (rng_len,) = struct.unpack("<I", f.read(4))
        rng_state = json.loads(f.read(rng_len).decode())
        sections = []
        for _ in range(2):
            (count,) = struct.unpack("<I", f.read(4))
            section = {}
            for _ in range(count):
                name, arr = _read_block(f)
                section[name] = arr
            sections.append(section)
    return Checkpoint(cfg_bytes.decode(), sections[0], sections[1], epoch, rng_state)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # final epoch
    best_checkpoint: Checkpoint  # best val macro AUROC (final when no val set)
    log_rows: list  # (epoch, split, loss, macro_auroc) with '' for absent cells
    best_epoch: int
    per_class_best: dict  # class name -> (best val auroc, epoch)

    def log_text(self, header: str = "") -> str:
        out = io.StringIO()
        if header:
            for line in header.rstrip().splitlines():
                out.write(f"# {line}\n")
        out.write("epoch,split,loss,macro_auroc\n")
        for row in self.log_rows:
            out.write(",".join(str(v) for v in row) + "\n")
        return out.getvalue()


def _stack_batch(samples, dtype) -> tuple:
    x = np.stack([s.pixels.data for s in samples]).astype(dtype)
    y = np.stack([s.labels for s in samples]).astype(dtype)
    return Tensor(x), y


def _score_samples(model: WslModel, samples, batch_size: int = 32) -> np.ndarray:
    """Deterministic test-path probabilities for a list of samples."""
    rows = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            x, _ = _stack_batch(chunk, model.backbone.dtype)
            scores, _ = model.scores_test(x)
            rows.append(scores.probabilities)
    return np.concatenate(rows, axis=0)


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def train(config: TrainConfig, train_samples, val_samples=None) -> TrainResult:
    """Run the full training loop; deterministic for a fixed config.

    Returns the final and best-validation checkpoints plus the log rows.
    A non-finite loss aborts with :class:`TrainingDivergedError` naming
    the epoch and batch.
    """
    if not train_samples:
        raise ValueError("train: empty training set")
    dtype = config.np_dtype
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = WslModel(config.net, config.head, rng=np.random.default_rng(seeds[0]), dtype=dtype)
    train_rng = np.random.default_rng(seeds[1])
    labels = np.stack([s.labels for s in train_samples])
    w_plus, w_minus = class_weights_from_labels(labels, invert=config.invert_class_weights)
    params = model.named_parameters()
    optimizer = _make_optimizer(config, params)

    log_rows = []
    best_macro = -np.inf
    best_epoch = 0
    best_ckpt = None
    per_class_best: dict[str, tuple] = {}

    n = len(train_samples)
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        order = train_rng.permutation(n)
        epoch_losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            if len(idx) == 1:
                warnings.warn("dropping a trailing batch of one (batch norm needs >= 2)")
                continue
            batch = [train_samples[i] for i in idx]
            x, y = _stack_batch(batch, dtype)
            scores = model.scores_train(x, train_rng)
            loss = weighted_bce(scores, y, w_plus.astype(dtype), w_minus.astype(dtype))
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(epoch, bi)
            model.zero_grad()
            loss.backward()
            optimizer.step(lr, config.l2_penalty)
            epoch_losses.append(loss_value)
        train_loss = float(np.mean(epoch_losses))
        log_rows.append((epoch, "train", repr(train_loss), ""))

        if val_samples:
            probs = _score_samples(model, val_samples)
            val_labels = np.stack([s.labels for s in val_samples])
            report = classification_report(probs, val_labels, config.head.class_names)
            macro = report.macro_auroc
            log_rows.append((epoch, "val", "", repr(macro)))
            for name, value in zip(report.class_names, report.aurocs):
                if value is None:
                    continue
                if name not in per_class_best or value > per_class_best[name][0]:
                    per_class_best[name] = (value, epoch)
            if macro > best_macro:
                best_macro = macro
                best_epoch = epoch
                best_ckpt = checkpoint_from_model(model, config, epoch, _rng_state(train_rng))

    final = checkpoint_from_model(model, config, config.epochs - 1, _rng_state(train_rng))
    if best_ckpt is None:
        best_ckpt = final
        best_epoch = config.epochs - 1
    return TrainResult(final, best_ckpt, log_rows, best_epoch, per_class_best)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    classification: ClassificationReport
    localization: "loc.LocalizationReport | None"  # None when no ground truth boxes
    probabilities: np.ndarray  # (n, C)
    image_ids: list
    predicted_boxes: dict  # image id -> list of BBox


def evaluate(checkpoint_or_model, samples, expected_config_hash: str | None = None,
             box_thresholds=None, heatmap_dir=None, min_box_area: float = 0.0,
             batch_size: int = 32) -> EvalResult:
    """Deterministic evaluation: classification report plus, when any
    sample carries ground-truth boxes, a localization report.

    ``expected_config_hash`` guards against evaluating a checkpoint under
    the wrong settings.  ``heatmap_dir`` dumps one 8-bit PGM per
    (image, class), values ``round(255 * normalized)``.
    """
    if isinstance(checkpoint_or_model, Checkpoint):
        ckpt = checkpoint_or_model
        if expected_config_hash is not None and ckpt.hash != expected_config_hash:
            raise ValueError(
                f"config hash mismatch: checkpoint {ckpt.hash[:12]} vs expected "
                f"{expected_config_hash[:12]}"
            )
        model, _config = model_from_checkpoint(ckpt)
    else:
        model = checkpoint_or_model
    head = model.head
    class_names = head.class_names
    if box_thresholds is None:
        box_thresholds = loc.default_thresholds(class_names)

    if heatmap_dir is not None:
        heatmap_dir = Path(heatmap_dir)
        heatmap_dir.mkdir(parents=True, exist_ok=True)

    all_probs = []
    predicted: dict[str, list] = {}
    ground_truth: dict[str, list] = {}
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, _ = _stack_batch(chunk, model.backbone.dtype)
            scores, heatmap = model.scores_test(x)
            all_probs.append(scores.probabilities)
            normalized = loc.normalize_heatmap(heatmap)
            img_h, img_w = x.shape[2], x.shape[3]
            for si, sample in enumerate(chunk):
                boxes = loc.heatmap_to_boxes(
                    normalized[si], (img_h, img_w), box_thresholds, min_area=min_box_area
                )
                predicted[sample.image_id] = boxes
                if sample.gt_boxes:
                    ground_truth[sample.image_id] = sample.gt_boxes
                if heatmap_dir is not None:
                    from .data import write_pgm

                    for ci, cname in enumerate(class_names):
                        safe = cname.replace(" ", "_")
                        img = np.round(255.0 * normalized[si, ci]).astype(np.uint8)
                        write_pgm(heatmap_dir / f"{sample.image_id}_{safe}.pgm", img)

    probs = np.concatenate(all_probs, axis=0)
    labels = np.stack([s.labels for s in samples])
    cls_report = classification_report(probs, labels, class_names)
    loc_report = None
    if ground_truth:
        loc_report = loc.score_localization(predicted, ground_truth, class_names)
    return EvalResult(cls_report, loc_report, probs, [s.image_id for s in samples], predicted)


# ---------------------------------------------------------------------------
# hyperparameter sweeps

_TRAIN_TIME_KEYS = ("M", "k_plus_train")
_TEST_TIME_KEYS = ("k_plus_test", "k_minus_test", "alpha")
_KEY_TO_FIELD = {
    "M": "submaps_per_class",
    "k_plus_train": "top_k_train",
    "k_plus_test": "top_k_test",
    "k_minus_test": "bottom_k_test",
    "alpha": "bottom_weight",
}


@dataclass
class SweepResult:
    rows: list  # dicts: swept params + macro_auroc
    num_train_runs: int
    keys: tuple

    def to_csv(self, stream) -> None:
        stream.write(",".join(self.keys) + ",macro_auroc\n")
        for row in self.rows:
            stream.write(
                ",".join(str(row[k]) for k in self.keys) + f",{row['macro_auroc']!r}\n"
            )


def _product(lists):
    out = [()]
    for values in lists:
        out = [prev + (v,) for prev in out for v in values]
    return out


def sweep(base_config: TrainConfig, grid: dict, train_samples, eval_samples,
          checkpoint: Checkpoint | None = None) -> SweepResult:
    """Evaluate every grid point of head hyperparameters.

    Test-time parameters (k_plus_test, k_minus_test, alpha) are swept by
    re-evaluating one trained model; train-time parameters (M,
    k_plus_train) each trigger a fresh training run.  When the grid is
    test-time only and a checkpoint is given, no training happens at all.
    Grid points that violate head invariants are skipped with a warning.
    """
    if not grid:
        raise ValueError("sweep: empty grid")
    for key in grid:
        if key not in _KEY_TO_FIELD:
            raise ValueError(f"sweep: unknown grid key {key!r} (expected {sorted(_KEY_TO_FIELD)})")
    train_keys = [k for k in _TRAIN_TIME_KEYS if k in grid]
    test_keys = [k for k in _TEST_TIME_KEYS if k in grid]
    keys = tuple(train_keys + test_keys)

    rows = []
    num_train_runs = 0
    train_combos = _product([grid[k] for k in train_keys]) if train_keys else [()]
    test_combos = _product([grid[k] for k in test_keys]) if test_keys else [()]

    for train_values in train_combos:
        overrides = dict(zip(train_keys, train_values))
        try:
            head = replace(
                base_config.head,
                **{_KEY_TO_FIELD[k]: v for k, v in overrides.items()},
            )
        except ValueError as err:
            warnings.warn(f"sweep: skipping train point {overrides}: {err}")
            continue
        config = replace(base_config, head=head)
        if train_keys or checkpoint is None:
            result = train(config, train_samples, val_samples=None)
            num_train_runs += 1
            model, _cfg = model_from_checkpoint(result.checkpoint)
        else:
            model, _cfg = model_from_checkpoint(checkpoint)

        for test_values in test_combos:
            test_overrides = dict(zip(test_keys, test_values))
            try:
                model.head = replace(
                    head, **{_KEY_TO_FIELD[k]: v for k, v in test_overrides.items()}
                )
            except ValueError as err:
                warnings.warn(f"sweep: skipping test point {test_overrides}: {err}")
                continue
            probs = _score_samples(model, eval_samples)
            labels = np.stack([s.labels for s in eval_samples])
            report = classification_report(probs, labels, model.head.class_names)
            row = {**overrides, **test_overrides, "macro_auroc": report.macro_auroc}
            rows.append(row)
    return SweepResult(rows, num_train_runs, keys)


# ---------------------------------------------------------------------------
# data-parallel building block


def batch_gradients(model: WslModel, samples, w_plus, w_minus) -> tuple:
    """Deterministic gradient of the test-path loss over one batch.

    Uses eval-mode batch norm (frozen statistics) and the deterministic
    spatial pooling, so gradients from shards merge exactly: the loss is a
    mean over samples, hence grad(batch) == sum over shards of
    grad(shard) * (shard size / batch size).  Returns (grads, loss).
    """
    x, y = _stack_batch(samples, model.backbone.dtype)
    scores, _ = model.scores_test(x)
    loss = weighted_bce(scores, y, w_plus, w_minus)
    model.zero_grad()
    loss.backward()
    grads = {n: p.grad.copy() for n, p in model.named_parameters() if p.grad is not None}
    return grads, loss.item()
