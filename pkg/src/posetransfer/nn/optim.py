"""AdamW with decoupled weight decay, and JSON parameter checkpoints."""
from __future__ import annotations

import json
import logging
from typing import Dict, Optional, Sequence

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "posetransfer-params"
CHECKPOINT_VERSION = 1


def adamw_update(param, grad, m, v, step: int, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One functional AdamW step. Returns (param, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1**step)
    vhat = v / (1 - b2**step)
    param = param * (1 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
                 clip_norm: Optional[float] = None):
        self.params = list(params)
        self.clip_norm = clip_norm
        self.last_grad_norm = 0.0
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        """Apply one update. Returns False (and skips) if any gradient is non-finite.

        With ``clip_norm`` the global gradient norm is capped first.
        """
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
            return False
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        self.last_grad_norm = norm
        if self.clip_norm is not None and norm > self.clip_norm:
            grads = [g * (self.clip_norm / norm) for g in grads]
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p.data, self.m[i], self.v[i] = adamw_update(
                p.data, g, self.m[i], self.v[i], self.t, self.lr, self.betas, self.eps, self.weight_decay
            )
        return True


def cosine_lr(base: float, step: int, total: int, floor: float = 0.02) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    if total <= 1:
        return base
    c = 0.5 * (1 + np.cos(np.pi * min(step, total - 1) / (total - 1)))
    return base * (floor + (1 - floor) * c)


def save_checkpoint(path, state: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write name -> (shape, row-major values) as JSON; floats round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(np.shape(a)), "values": [float(x) for x in np.asarray(a, np.float64).ravel()]}
            for name, a in sorted(state.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    """Returns (state, meta)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    state = {}
    for name, rec in doc["params"].items():
        vals = np.asarray(rec["values"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"{path}: {name} has {vals.size} values for shape {shape}")
        state[name] = vals.reshape(shape)
    return state, doc.get("meta", {})
