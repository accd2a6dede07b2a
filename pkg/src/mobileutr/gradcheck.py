"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude.

    ``floor`` bounds the scale from below so that structurally zero gradients
    (e.g. a conv bias feeding train-mode BN) are not judged on rounding noise.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    if scale < 1e-12:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                   indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t``.

    ``t.data`` is perturbed in place and restored. When ``indices`` (flat) is
    given only those entries are probed; the rest of the result is NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


@dataclass
class GradReport:
    name: str
    errors: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def check_gradients(name: str, f: Callable[[], Tensor], tensors: Sequence[tuple[str, Tensor]],
                    h: float = 1e-5, max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None,
                    floor_ratio: float = 1e-3) -> GradReport:
    """Compare tape gradients of ``f`` against central differences.

    ``tensors`` are (label, leaf) pairs; each leaf must have ``requires_grad``.
    With ``max_entries`` only a random subset of each tensor is probed. Each
    tensor's error is scaled by at least ``floor_ratio`` times the largest
    analytic gradient seen in the whole check.
    """
    for _, t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss, leaves=[t for _, t in tensors])
    rng = rng or np.random.default_rng(0)
    floor = floor_ratio * max(np.abs(t.grad).max(initial=0.0) for _, t in tensors)
    errors = {}
    for label, t in tensors:
        analytic = t.grad.copy()
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numerical_grad(f, t, h=h, indices=idx)
        if idx is not None:
            a, n = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
        else:
            a, n = analytic, numeric
        errors[label] = relative_error(a, n, floor)
    return GradReport(name, errors)


# ---------------------------------------------------------------- block suite

def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _module_check(name, module, inputs, rng, h, max_entries) -> GradReport:
    """Check d(sum(out * c)) w.r.t. every parameter of ``module`` and its inputs."""
    out_shape = module(*inputs).shape
    weights = rng.standard_normal(out_shape)

    def f():
        return (module(*inputs) * weights).sum()

    tensors = [(f"input{i}", x) for i, x in enumerate(inputs)] + list(module.named_parameters())
    return check_gradients(name, f, tensors, h=h, max_entries=max_entries, rng=rng)


def block_reports(seed: int = 0, h: float = 1e-5, max_entries: Optional[int] = 40) -> list:
    """f64 gradient checks of each building block (train-mode BN) at small sizes."""
    from . import blocks
    from .train import loss

    rng = np.random.default_rng(seed)
    f64 = np.float64
    reports = [
        _module_check("convutr", blocks.ConvUtrBlock(4, 3, rng=rng, dtype=f64),
                      [_leaf(rng, 2, 4, 5, 5)], rng, h, max_entries),
        _module_check("lgl", blocks.LGLBlock(8, 3, 2, 4, rng=rng, dtype=f64),
                      [_leaf(rng, 2, 8, 4, 4)], rng, h, max_entries),
        _module_check("transformer", blocks.TransformerBlock(8, 4, rng=rng, dtype=f64),
                      [_leaf(rng, 2, 8, 3, 3)], rng, h, max_entries),
        _module_check("decoder_stage", blocks.DecoderStage(6, 4, 3, rng=rng, dtype=f64),
                      [_leaf(rng, 2, 6, 3, 3), _leaf(rng, 2, 3, 12, 12)], rng, h, max_entries),
        _module_check("skip_fusion", blocks.SkipFusion(4, 3, 4, rng=rng, dtype=f64),
                      [_leaf(rng, 2, 4, 4, 4), _leaf(rng, 2, 3, 8, 8)], rng, h, max_entries),
    ]
    logits = _leaf(rng, 2, 1, 4, 4)
    target = (rng.random((2, 4, 4)) < 0.5).astype(np.uint8)
    reports.append(check_gradients("loss", lambda: loss(logits, target), [("logits", logits)], h=h))
    multi = _leaf(rng, 2, 3, 4, 4)
    labels = rng.integers(0, 3, (2, 4, 4))
    reports.append(check_gradients("loss_multiclass", lambda: loss(multi, labels), [("logits", multi)], h=h))
    return reports


def end_to_end_report(cfg=None, size: int = 32, seed: int = 0, h: float = 1e-6,
                      max_entries: Optional[int] = 6) -> GradReport:
    """Whole-model f64 check of the segmentation loss on a 2-image batch.

    The smaller default step keeps probes from crossing ReLU and max-pool
    kinks, which are dense across a full network.
    """
    from .model import TINY, MobileUtr
    from .train import loss

    cfg = TINY if cfg is None else cfg
    rng = np.random.default_rng(seed)
    model = MobileUtr(cfg, seed=seed, dtype=np.float64)
    image = Tensor(rng.random((2, 3, size, size)))
    yy, xx = np.mgrid[0:size, 0:size]
    target = np.stack([((yy - size / 2) ** 2 + (xx - size / 2) ** 2 < (size / 4) ** 2)] * 2).astype(np.uint8)
    return check_gradients("end_to_end", lambda: loss(model(image), target),
                           list(model.named_parameters()), h=h, max_entries=max_entries, rng=rng)
