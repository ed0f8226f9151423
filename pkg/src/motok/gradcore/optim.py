"""Decoupled-weight-decay adaptive optimizer over Parameter state."""

from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter

log = logging.getLogger(__name__)


class AdamW:
    """AdamW with bias correction. Weight decay is decoupled from the moment
    update and defaults to 0; parameters with non-finite gradients are skipped
    for the step and reported back."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: list[Parameter] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> list[str]:
        """Apply one update; returns the names of skipped parameters."""
        skipped: list[str] = []
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                skipped.append(p.name or f"<unnamed {p.shape}>")
                continue
            p.step += 1
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * (g * g)
            m_hat = p.m / (1.0 - self.beta1 ** p.step)
            v_hat = p.v / (1.0 - self.beta2 ** p.step)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.assign_(p.data - self.lr * update)
        if skipped:
            log.warning("optimizer skipped %d parameter(s) with non-finite "
                        "gradients: %s", len(skipped), ", ".join(skipped))
        return skipped

    def state_blocks(self) -> dict[str, np.ndarray]:
        """Optimizer moments keyed for checkpointing (names must be set)."""
        blocks: dict[str, np.ndarray] = {}
        for p in self.params:
            if not p.name:
                raise ValueError("state_blocks requires named parameters")
            blocks[p.name + ".adam_m"] = p.m
            blocks[p.name + ".adam_v"] = p.v
            blocks[p.name + ".adam_step"] = np.asarray([float(p.step)])
        return blocks

    def load_state_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        for p in self.params:
            key = p.name + ".adam_m"
            if key in blocks:
                p.m = np.array(blocks[key], dtype=np.float64)
                p.v = np.array(blocks[p.name + ".adam_v"], dtype=np.float64)
                p.step = int(blocks[p.name + ".adam_step"][0])
