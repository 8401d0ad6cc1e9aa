"""AdamW, cosine-annealed learning rate, early stopping, gradient norms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


_CHUNK = 1 << 15


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float) -> dict:
    """One bias-corrected Adam update with decoupled weight decay.

    ``params`` maps names to tensors and is updated in place (the ``values``
    array of each tensor is replaced).  A missing or ``None`` gradient counts
    as zero.  Returns ``params``.
    """
    if lr < 0:
        raise ContractError("learning rate must be >= 0")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    step_size = lr / c1
    decay = 1.0 - lr * state.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        elif g.shape != p.values.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, param {p.values.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        new = np.array(p.values, dtype=np.float64, order="C")
        m, v = state.m[name].reshape(-1), state.v[name].reshape(-1)
        flat_g, flat_p = np.ascontiguousarray(g).reshape(-1), new.reshape(-1)
        # chunked so the temporaries stay cache-resident; the head matrices
        # hold millions of entries and otherwise dominate the step time
        for lo in range(0, flat_p.size, _CHUNK):
            sl = slice(lo, lo + _CHUNK)
            gc, mc, vc, pc = flat_g[sl], m[sl], v[sl], flat_p[sl]
            tmp = gc * (1 - b1)
            mc *= b1
            mc += tmp
            np.multiply(gc, gc, out=tmp)
            tmp *= 1 - b2
            vc *= b2
            vc += tmp
            np.divide(vc, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += state.eps
            np.divide(mc, tmp, out=tmp)
            tmp *= step_size
            if state.weight_decay:
                pc *= decay
            pc -= tmp
        p.values = new
    return params


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 4e-3
    min_lr: float = 2e-4
    total_epochs: int = 60
    warmup_epochs: int = 5

    def __post_init__(self):
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError("need 0 <= min_lr <= base_lr")
        if self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigError("bad epoch counts in schedule")


def lr_at(t: int, s: LrSchedule) -> float:
    """Linear warm-up to ``base_lr`` over ``warmup_epochs``, then cosine decay
    reaching ``min_lr`` at the last epoch.  ``t`` is 1-based."""
    if not 1 <= t <= s.total_epochs:
        raise ContractError(f"epoch {t} outside [1, {s.total_epochs}]")
    if t < s.warmup_epochs:
        return s.base_lr * t / s.warmup_epochs
    start = max(s.warmup_epochs, 1)
    if s.total_epochs == start:
        return s.base_lr
    progress = (t - start) / (s.total_epochs - start)
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def grad_global_norm(grads) -> float:
    """L2 norm of all gradient buffers taken together (``None`` entries skipped)."""
    values = grads.values() if isinstance(grads, dict) else grads
    total = 0.0
    for g in values:
        if g is not None:
            g = np.asarray(g, dtype=np.float64)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


@dataclass
class EarlyStop:
    """Stops after ``patience`` consecutive observations without an
    improvement larger than ``tolerance`` (lower metric is better)."""

    patience: int = 15
    tolerance: float = 1e-6
    best_metric: float = math.inf
    epochs_since_best: int = 0

    def update(self, metric: float) -> bool:
        if not math.isfinite(metric):
            raise ContractError(f"non-finite validation metric {metric}")
        if metric < self.best_metric - self.tolerance:
            self.best_metric = metric
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best >= self.patience


def early_stop_update(es: EarlyStop, metric: float) -> bool:
    return es.update(metric)
