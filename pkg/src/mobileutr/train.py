"""Training recipe: BCE + Dice loss, SGD with momentum, poly schedule, checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .data import Sample
from .errors import InputError, NumericError
from .metrics import MetricsReport, evaluate_masks
from .model import MobileUtr, ModelConfig, predict
from .serialize import load_tensor, save_tensor
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

DICE_EPS = 1e-5


def _one_hot(target: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) labels -> (N, K, H, W) one-hot; binary masks pass through as (N, 1, H, W)."""
    target = np.asarray(target)
    if num_classes == 1:
        return target.reshape(target.shape[0], 1, *target.shape[-2:])
    return (target[:, None] == np.arange(num_classes)[None, :, None, None])


def binary_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """0.5 * BCE + Dice loss for one sigmoid channel; Dice pooled over the batch."""
    target = np.asarray(target, dtype=logits.dtype)
    if logits.shape != target.shape:
        raise InputError(f"logits {logits.shape} and target {target.shape} differ")
    bce = ops.bce_with_logits(logits, target)
    prob = ops.sigmoid(logits)
    inter = (prob * target).sum()
    dice = 1.0 - (inter * 2.0 + DICE_EPS) / (prob.sum() + (float(target.sum()) + DICE_EPS))
    return bce * 0.5 + dice


def loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Segmentation loss; multi-class logits are scored per channel and summed.

    ``target`` is (N, H, W) labels or an array already shaped like ``logits``.
    """
    k = logits.shape[1]
    target = np.asarray(target)
    onehot = target if target.shape == logits.shape else _one_hot(target, k)
    if onehot.shape != logits.shape:
        raise InputError(f"logits {logits.shape} and target {target.shape} are incompatible")
    onehot = onehot.astype(logits.dtype)
    if k == 1:
        return binary_loss(logits, onehot)
    total = None
    for c in range(k):
        part = binary_loss(_channel(logits, c), onehot[:, c:c + 1])
        total = part if total is None else total + part
    return total


def _channel(x: Tensor, c: int) -> Tensor:
    sel = np.zeros((x.shape[1], 1), dtype=x.dtype)
    sel[c, 0] = 1
    t = ops.permute(x, (0, 2, 3, 1))
    return ops.permute(ops.matmul(t, Tensor(sel)), (0, 3, 1, 2))


def poly_lr(iteration: int, max_iter: int, base_lr: float = 0.01, power: float = 0.9) -> float:
    """``base_lr * (1 - iter/max_iter) ** power``; zero at or beyond max_iter."""
    if max_iter <= 0 or iteration >= max_iter:
        return 0.0
    return base_lr * (1.0 - iteration / max_iter) ** power


class SGD:
    """SGD with momentum; weight decay is coupled into the gradient."""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            g = g + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data -= (lr * buf).astype(p.dtype)


def rotate90(arr: np.ndarray, k: int) -> np.ndarray:
    """Rotate the last two axes by k quarter turns clockwise."""
    return np.ascontiguousarray(np.rot90(arr, k=-k, axes=(-2, -1)))


def flip(arr: np.ndarray, axis: int) -> np.ndarray:
    """Flip along the last two axes: axis=0 vertical, axis=1 horizontal."""
    return np.ascontiguousarray(np.flip(arr, axis=arr.ndim - 2 + axis))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random quarter-turn rotation plus independent vertical/horizontal flips."""
    image, mask = sample.image, sample.mask
    k = int(rng.integers(4))
    image, mask = rotate90(image, k), rotate90(mask, k)
    for axis in (0, 1):
        if rng.random() < 0.5:
            image, mask = flip(image, axis), flip(mask, axis)
    return Sample(image, mask, id=sample.id)


@dataclass
class TrainPlan:
    epochs: int = 300
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    augment: bool = True
    checkpoint_every: int = 0

    def batches_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def max_iter(self, n: int) -> int:
        return self.epochs * self.batches_per_epoch(n)


@dataclass
class EpochLog:
    epoch: int
    iteration: int
    lr: float
    train_loss: float
    val_miou: float

    def line(self) -> str:
        return f"{self.epoch},{self.iteration},{self.lr:.8g},{self.train_loss:.8g},{self.val_miou:.8g}"


LOG_HEADER = "epoch,iter,lr,train_loss,val_miou"


def predict_masks(model: MobileUtr, samples: Sequence[Sample], batch_size: int = 8) -> list:
    images = np.stack([s.image for s in samples])
    logits = predict(model, images, batch_size)
    if logits.shape[1] == 1:
        return list((logits[:, 0] > 0).astype(np.uint8))
    return list(logits.argmax(axis=1).astype(np.uint8))


def evaluate(model: MobileUtr, samples: Sequence[Sample], batch_size: int = 8) -> MetricsReport:
    preds = predict_masks(model, samples, batch_size)
    return evaluate_masks(preds, [s.mask for s in samples], model.config.num_classes)


def save_checkpoint(path: Union[str, Path], model: MobileUtr, optimizer: Optional[SGD] = None,
                    meta: Optional[dict] = None) -> Path:
    """Write a manifest plus one portable tensor file per entry, in build order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []

    def put(kind, name, arr):
        fname = f"{len(entries):04d}.mutr"
        save_tensor(path / fname, np.asarray(arr))
        entries.append({"kind": kind, "name": name, "file": fname})

    for name, p in model.named_parameters():
        put("param", name, p.data)
    for name, b in model.named_buffers():
        put("buffer", name, b)
    if optimizer is not None:
        for name, _ in optimizer.named:
            put("momentum", name, optimizer.buffers[name])
    manifest = {"config": json.loads(json.dumps(asdict(model.config))), "entries": entries,
                "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Union[str, Path], dtype=np.float32):
    """Rebuild the model (and momentum buffers, if stored) from a checkpoint directory."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise InputError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    cfg = ModelConfig().with_overrides(**manifest["config"])
    model = MobileUtr(cfg, dtype=dtype)
    state, momentum = {}, {}
    for e in manifest["entries"]:
        arr = load_tensor(path / e["file"])
        (momentum if e["kind"] == "momentum" else state)[e["name"]] = arr
    model.load_state_dict(state)
    return model, momentum, manifest.get("meta", {})


def _batch(samples: Sequence[Sample], dtype) -> tuple:
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples])
    return Tensor(images), masks


def fit(model: MobileUtr, train_set: Sequence[Sample], val_set: Sequence[Sample], plan: TrainPlan,
        out_dir: Optional[Union[str, Path]] = None) -> tuple:
    """Train ``model`` in place. Returns (optimizer, list of EpochLog).

    The global iteration index drives the poly schedule. Checkpoints go to
    ``out_dir/checkpoint`` every ``plan.checkpoint_every`` epochs and at the end;
    the log is appended to ``out_dir/train_log.csv``.
    """
    if not train_set:
        raise InputError("training set is empty")
    rng = np.random.default_rng(plan.seed)
    opt = SGD(model.named_parameters(), plan.momentum, plan.weight_decay)
    dtype = model.head.weight.dtype
    max_iter = plan.max_iter(len(train_set))
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        log_path.write_text(LOG_HEADER + "\n")
    history = []
    it = 0
    for epoch in range(1, plan.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        losses = []
        lr = poly_lr(it, max_iter, plan.base_lr, plan.power)
        for start in range(0, len(order), plan.batch_size):
            chunk = [train_set[i] for i in order[start:start + plan.batch_size]]
            if plan.augment:
                chunk = [augment(s, rng) for s in chunk]
            images, masks = _batch(chunk, dtype)
            lr = poly_lr(it, max_iter, plan.base_lr, plan.power)
            opt.zero_grad()
            with Tape() as tape:
                value = loss(model(images), masks)
            if not np.isfinite(value.data).all():
                raise NumericError(f"non-finite loss at epoch {epoch}, iteration {it}")
            tape.backward(value, leaves=model.parameters())
            opt.step(lr)
            losses.append(float(value.data))
            it += 1
        val = evaluate(model, val_set).mean_iou if val_set else math.nan
        entry = EpochLog(epoch, it, lr, float(np.mean(losses)), val)
        history.append(entry)
        log.info("epoch %d loss %.5f val_miou %.4f", epoch, entry.train_loss, val)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(entry.line() + "\n")
        if out is not None and plan.checkpoint_every and epoch % plan.checkpoint_every == 0:
            save_checkpoint(out / "checkpoint", model, opt, {"epoch": epoch, "iteration": it})
    if out is not None:
        save_checkpoint(out / "checkpoint", model, opt, {"epoch": plan.epochs, "iteration": it})
    return opt, history


def fit_steps(model: MobileUtr, images: np.ndarray, masks: np.ndarray, steps: int,
              base_lr: float = 0.01, power: float = 0.9, momentum: float = 0.9,
              weight_decay: float = 1e-4, stop_below: Optional[float] = None) -> list:
    """Repeated SGD steps on one fixed batch (overfitting check). Returns per-step losses.

    The poly schedule spans ``steps``; with ``stop_below`` the loop ends at the
    first loss under that value.
    """
    opt = SGD(model.named_parameters(), momentum, weight_decay)
    x = Tensor(images.astype(model.head.weight.dtype))
    model.train()
    losses = []
    for it in range(steps):
        opt.zero_grad()
        with Tape() as tape:
            value = loss(model(x), masks)
        tape.backward(value, leaves=model.parameters())
        opt.step(poly_lr(it, steps, base_lr, power))
        losses.append(float(value.data))
        if stop_below is not None and losses[-1] < stop_below:
            break
    return losses
