"""SGD with momentum, Nesterov, and step-wise momentum fusion.

Optimizers here own no state: momentum buffers are passed in and handed
back, so the server can align them across clients between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import ParamVector

SGDM = "sgdm"
NAG = "nag"


@dataclass(frozen=True)
class OptimConfig:
    eta: float = 0.05
    beta: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_per_round: float = 0.998
    variant: str = SGDM
    # "exponential": eta * decay**(n-1); "inverse": eta * offset / (offset + n - 1)
    lr_schedule: str = "exponential"
    lr_offset: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("must be > 0", "optim.eta")
        if not 0 <= self.beta < 1:
            raise ConfigurationError("must be in [0, 1)", "optim.beta")
        if self.weight_decay < 0:
            raise ConfigurationError("must be >= 0", "optim.weight_decay")
        if not 0 < self.lr_decay_per_round <= 1:
            raise ConfigurationError("must be in (0, 1]", "optim.lr_decay_per_round")
        if self.variant not in (SGDM, NAG):
            raise ConfigurationError(f"unknown variant {self.variant!r}", "optim.variant")
        if self.lr_schedule not in ("exponential", "inverse"):
            raise ConfigurationError(f"unknown schedule {self.lr_schedule!r}", "optim.lr_schedule")
        if not self.lr_offset > 0:
            raise ConfigurationError("must be > 0", "optim.lr_offset")

    def lr_at(self, round_index: int) -> float:
        """Learning rate for 1-based communication round ``round_index``."""
        k = max(round_index - 1, 0)
        if self.lr_schedule == "inverse":
            return self.eta * self.lr_offset / (self.lr_offset + k)
        return self.eta * self.lr_decay_per_round**k


@dataclass(frozen=True)
class MomentumBuffer:
    values: ParamVector
    owner: int = -1
    step_created: int = 0

    @classmethod
    def zeros(cls, like: ParamVector, owner: int = -1) -> MomentumBuffer:
        return cls(like.zeros_like(), owner, 0)


@dataclass(frozen=True)
class HistoryEntry:
    """Post-update buffer of a client that has run all its local steps."""

    buffer: MomentumBuffer
    finish_step: int

    def __post_init__(self):
        if self.finish_step < 1:
            raise UsageError("finish_step must be >= 1")


def _effective_grad(params: ParamVector, grads: ParamVector, cfg: OptimConfig) -> np.ndarray:
    params.check_shape(grads)
    if cfg.weight_decay:
        return grads.values + cfg.weight_decay * params.values
    return grads.values


def _momentum_update(params, grads, prev: MomentumBuffer, cfg: OptimConfig, lr, step):
    params.check_shape(prev.values)
    d = _effective_grad(params, grads, cfg)
    buf = cfg.beta * prev.values.values + d
    new_params = params.with_values(params.values - lr * buf)
    return new_params, MomentumBuffer(params.with_values(buf), prev.owner, step)


def sgdm_step(params: ParamVector, grads: ParamVector, buffer_in: MomentumBuffer | None, cfg: OptimConfig,
              lr: float | None = None, step: int = 0):
    """buffer <- beta*buffer + grad (+ wd*params); params <- params - lr*buffer."""
    if buffer_in is None:
        buffer_in = MomentumBuffer.zeros(params)
    return _momentum_update(params, grads, buffer_in, cfg, cfg.eta if lr is None else lr, step)


def aligned_sgdm_step(params: ParamVector, grads: ParamVector, aligned_buffer: MomentumBuffer, cfg: OptimConfig,
                      lr: float | None = None, step: int = 0, owner: int = -1):
    """Momentum step seeded from the fused buffer instead of the client's own."""
    prev = MomentumBuffer(aligned_buffer.values, owner, aligned_buffer.step_created)
    return _momentum_update(params, grads, prev, cfg, cfg.eta if lr is None else lr, step)


def nag_lookahead(params: ParamVector, buffer_in: MomentumBuffer | None, cfg: OptimConfig,
                  lr: float | None = None) -> ParamVector:
    """Point where the caller must evaluate gradients for :func:`nag_step`."""
    if buffer_in is None:
        return params
    params.check_shape(buffer_in.values)
    lr = cfg.eta if lr is None else lr
    return params.with_values(params.values - lr * cfg.beta * buffer_in.values.values)


def nag_step(params: ParamVector, grads_at_lookahead: ParamVector, buffer_in: MomentumBuffer | None,
             cfg: OptimConfig, lr: float | None = None, step: int = 0):
    """Nesterov step in the look-ahead gradient form.

    Same buffer recurrence as SGDM, but the gradient was taken at
    ``params - lr*beta*buffer_in``; the buffer is therefore fusable exactly
    like an SGDM buffer.
    """
    return sgdm_step(params, grads_at_lookahead, buffer_in, cfg, lr, step)


def staleness(tau: int, finish_step: int, alpha: float) -> float:
    """Polynomial down-weight (tau - finish_step + 1) ** alpha."""
    if alpha >= 0:
        raise UsageError("staleness exponent must be negative")
    if tau < finish_step:
        raise UsageError(f"history consulted at step {tau} before the client finished at {finish_step}")
    return float((tau - finish_step + 1) ** alpha)


def fuse_momentum(active: Sequence[MomentumBuffer], history: Sequence[HistoryEntry], tau: int,
                  alpha: float) -> MomentumBuffer:
    """Average current buffers (weight 1) and stale finished ones (weight s_alpha).

    The denominator is the total number of buffers, i.e. the round cohort
    size. Terms are summed in ascending owner id so the result does not depend
    on the order workers finished in.
    """
    total = len(active) + len(history)
    if total == 0:
        raise UsageError("nothing to fuse")
    terms = [(b.owner, 1.0, b) for b in active]
    terms += [(h.buffer.owner, staleness(tau, h.finish_step, alpha), h.buffer) for h in history]
    terms.sort(key=lambda t: t[0])
    ref = terms[0][2].values
    for _, _, b in terms[1:]:
        ref.check_shape(b.values)

    if all(w == 1.0 for _, w, _ in terms) and all(np.array_equal(ref.values, b.values.values) for _, _, b in terms):
        fused = ref.values.copy()
    else:
        acc = terms[0][1] * ref.values
        for _, w, b in terms[1:]:
            acc = acc + w * b.values.values
        fused = acc / total
    return MomentumBuffer(ref.with_values(fused), -1, tau)
