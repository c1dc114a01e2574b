"""Central finite-difference checks for every differentiable op and the full model loss."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .losses import LossConfig, batch_hard_triplet, center_loss, composite_loss, cross_entropy
from .model import BackboneConfig, BranchSpec, branch_pool, build_model, classify, collaborative_attention

STEP = 1e-5
TOLERANCE = 1e-4
ABS_FLOOR = 1e-6  # denominators below this count as absolute error


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place, then restored)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in (range(arr.size) if coords is None else coords):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_function(fn: Callable, inputs: list[np.ndarray], rng: np.random.Generator,
                   h: float = STEP) -> float:
    """Worst relative error of d<fn(inputs), R>/d(inputs) for a random projection R."""
    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    with T.Tape() as tape:
        out = fn(*leaves)
        if isinstance(out, list):
            out = T.stack(out, axis=0)
        proj = rng.standard_normal(out.shape)
        loss = T.sum(out * proj)
    tape.backward(loss)

    def value():
        o = fn(*[T.Tensor(x.data) for x in leaves])
        if isinstance(o, list):
            o = T.stack(o, axis=0)
        return float((o.data * proj).sum())

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, numerical_grad(value, leaf.data, h)))
    return worst


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _onehot(k, n):
    t = np.zeros((n, k))
    t[np.arange(n), np.arange(n) % k] = 1
    return t


_LABELS = np.array([0, 0, 1, 1, 2, 2])

# name -> (function of tensors, input generator)
OP_CASES: dict[str, tuple[Callable, Callable]] = {
    "add": (T.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
    "sub": (T.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
    "mul": (T.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "div": (T.div, lambda r: [r.standard_normal((3, 4)), _pos(r, (3, 4))]),
    "neg": (T.neg, lambda r: [r.standard_normal((5,))]),
    "exp": (T.exp, lambda r: [r.standard_normal((2, 3))]),
    "log": (T.log, lambda r: [_pos(r, (2, 3))]),
    "sqrt": (T.sqrt, lambda r: [_pos(r, (2, 3))]),
    "relu": (T.relu, lambda r: [r.standard_normal((4, 3))]),
    "maximum": (T.maximum, lambda r: [r.standard_normal((4, 3)), r.standard_normal((4, 3))]),
    "matmul": (T.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "matmul_batched": (T.matmul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 2))]),
    "sum": (lambda x: T.sum(x, axis=1), lambda r: [r.standard_normal((3, 4))]),
    "mean": (lambda x: T.mean(x, axis=0), lambda r: [r.standard_normal((3, 4))]),
    "reduce_max": (lambda x: T.reduce(x, 1, "max"), lambda r: [r.standard_normal((3, 5))]),
    "reduce_mean": (lambda x: T.reduce(x, 0, "mean"), lambda r: [r.standard_normal((3, 5))]),
    "concat": (lambda a, b: T.concat([a, b], axis=1),
               lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "slice": (lambda x: T.slice(x, 1, 1, 2), lambda r: [r.standard_normal((2, 4))]),
    "reshape": (lambda x: T.reshape(x, (4, 3)), lambda r: [r.standard_normal((2, 6))]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 4))]),
    "take": (lambda x: T.take(x, np.array([0, 2, 2])), lambda r: [r.standard_normal((3, 4))]),
    "take_along_axis": (lambda x: T.take_along_axis(x, np.array([[1], [0], [3]]), axis=1),
                        lambda r: [r.standard_normal((3, 4))]),
    "softmax": (T.softmax, lambda r: [r.standard_normal((3, 5))]),
    "log_softmax": (T.log_softmax, lambda r: [r.standard_normal((3, 5))]),
    "l2_normalize": (T.l2_normalize, lambda r: [r.standard_normal((3, 5))]),
    "conv2d": (lambda x, w, b: nn.conv2d(x, w, b, stride=1, padding=1),
               lambda r: [r.standard_normal((3, 5, 4)), r.standard_normal((2, 3, 3, 3)),
                          r.standard_normal((2,))]),
    "conv2d_strided": (lambda x, w, b: nn.conv2d(x, w, b, stride=2, padding=1),
                       lambda r: [r.standard_normal((2, 2, 6, 5)), r.standard_normal((3, 2, 3, 3)),
                                  r.standard_normal((3,))]),
    "adaptive_max_pool": (lambda x: nn.adaptive_pool2d(x, 3, 1, "max"),
                          lambda r: [r.standard_normal((2, 7, 3))]),
    "adaptive_avg_pool": (lambda x: nn.adaptive_pool2d(x, 3, 2, "avg"),
                          lambda r: [r.standard_normal((2, 7, 4))]),
    "branch_pool": (lambda x: T.concat(list(branch_pool(x, 3)), axis=-2),
                    lambda r: [r.standard_normal((2, 3, 6, 2))]),
    "collaborative_attention": (collaborative_attention, lambda r: [r.standard_normal((2, 4, 5, 1))]),
    "classify": (lambda f, w: classify(f, w, 16.0),
                 lambda r: [r.standard_normal((6,)), r.standard_normal((4, 6))]),
    "cross_entropy": (lambda z: cross_entropy(T.softmax(z), _onehot(4, 3)),
                      lambda r: [r.standard_normal((3, 4))]),
    "batch_hard_triplet": (lambda f: batch_hard_triplet(f, _LABELS, 0.3),
                           lambda r: [r.standard_normal((6, 3))]),
    "center_loss": (lambda f: center_loss(f, _LABELS, np.linspace(-1, 1, 12).reshape(3, 4)),
                    lambda r: [r.standard_normal((6, 4))]),
}


def check_ops(trials: int = 100, seed: int = 0, names=None) -> dict[str, float]:
    """Worst relative error per op over ``trials`` random inputs."""
    rng = np.random.default_rng(seed)
    results = {}
    for name, (fn, gen) in OP_CASES.items():
        if names is not None and name not in names:
            continue
        results[name] = max(check_function(fn, gen(rng), rng) for _ in range(trials))
    return results


def toy_model(seed: int = 0, collaborative: bool = True):
    return build_model(
        BackboneConfig(stem_channels=4, stem_stride=2, widths=(4, 6, 8, 8), strides=(1, 2, 2, 1),
                       input_h=48, input_w=16),
        BranchSpec((1, 3)), embed_dim=8, num_classes=2, seed=seed,
        collaborative_attention=collaborative)


def check_model_loss(seed: int = 0, coords_per_param: int = 6,
                     config: LossConfig | None = None) -> dict[str, float]:
    """Composite-loss gradient of a toy model (48x16 input, branches {1,3}, 2 ids x 2 images).

    Returns the worst relative error per parameter over sampled coordinates.
    """
    rng = np.random.default_rng(seed)
    model = toy_model(seed)
    model.centers[:] = rng.standard_normal(model.centers.shape) * 0.1
    images = rng.standard_normal((4, 3, 48, 16))
    labels = np.array([0, 0, 1, 1])
    cfg = config or LossConfig(center_weight=0.05)

    model.zero_grad()
    with T.Tape() as tape:
        br = composite_loss(model(images), labels, cfg, model.centers)
    tape.backward(br.total)

    def value():
        return composite_loss(model(images), labels, cfg, model.centers).total.item()

    results = {}
    for p in model.parameters():
        n = min(coords_per_param, p.size)
        coords = rng.choice(p.size, size=n, replace=False)
        numeric = numerical_grad(value, p.data, coords=coords)
        results[p.name] = relative_error(p.grad.reshape(-1)[coords], numeric.reshape(-1)[coords])
    return results


def run_all(trials: int = 100, seed: int = 0) -> dict[str, float]:
    results = check_ops(trials, seed)
    model = check_model_loss(seed)
    results["composite_loss_toy_model"] = max(model.values())
    return results
