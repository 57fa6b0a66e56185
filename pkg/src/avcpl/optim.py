"""AdaGrad with global-norm clipping and a warm-up / hold / halve-on-plateau schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class LrSchedule:
    """Linear warm-up to ``peak``, hold until ``hold_until``, then halve every
    ``decay_every`` steps whenever validation WER has not improved."""

    peak: float = 0.03
    warmup_steps: int = 100
    hold_until: int = 1000
    decay_every: int = 500
    factor: float = 0.5
    scale: float = 1.0
    best_wer: float = math.inf
    last_check: int = 0

    def lr(self, step: int) -> float:
        warm = min(1.0, (step + 1) / self.warmup_steps) if self.warmup_steps > 0 else 1.0
        return self.peak * warm * self.scale

    def due(self, step: int) -> bool:
        return step >= self.hold_until and step - max(self.last_check, self.hold_until) >= self.decay_every

    def report(self, step: int, wer: float) -> bool:
        """Record a validation WER; returns True if the rate was halved."""
        self.last_check = step
        if wer < self.best_wer:
            self.best_wer = wer
            return False
        if step >= self.hold_until:
            self.scale *= self.factor
            return True
        return False

    def state(self) -> dict:
        return asdict(self)


@dataclass
class AdaGrad:
    eps: float = 1e-10
    clip: float = 1.0
    accum: dict = field(default_factory=dict)

    def reset(self):
        self.accum = {}

    def step(self, params, grads: dict, lr: float) -> float:
        """Clip by global norm, accumulate squares, update ``params`` in place.

        ``grads`` maps parameter name -> array; missing names get zero gradient.
        Returns the pre-clip global norm.
        """
        sq = 0.0
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
            sq += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
        norm = math.sqrt(sq)
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g * p.data.dtype.type(scale) if scale != 1.0 else g
            acc = self.accum.get(name)
            if acc is None:
                acc = np.zeros_like(p.data)
                self.accum[name] = acc
            acc += g * g
            p.data -= p.data.dtype.type(lr) * g / (np.sqrt(acc) + p.data.dtype.type(self.eps))
        return norm
