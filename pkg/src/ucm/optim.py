"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    """A named trainable tensor; the name doubles as the checkpoint key."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        if not self.tensor.requires_grad:
            raise ValueError(f"parameter {self.name!r} must require gradients")


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter map.

    The effective learning rate is a continuous piecewise-linear function of
    the step count: it ramps from 0 to ``lr`` over the first
    ``warmup_fraction * total_steps`` steps, then decays linearly to 0 at
    ``total_steps``. ``total_steps == 0`` disables the schedule (constant lr).
    """

    def __init__(
        self,
        params: Mapping[str, Tensor] | Iterable[Parameter],
        lr: float = 5e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        warmup_fraction: float = 0.1,
        total_steps: int = 0,
    ):
        if isinstance(params, Mapping):
            self.params = dict(params)
        else:
            self.params = {p.name: p.tensor for p in params}
        if len(self.params) == 0:
            raise ValueError("AdamW needs at least one parameter")
        if not 0.0 <= warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1], got {warmup_fraction}")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_fraction = warmup_fraction
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.lr
        warm = self.warmup_fraction * self.total_steps
        if warm > 0 and step <= warm:
            return self.lr * step / warm
        if self.total_steps <= warm:
            return self.lr
        return self.lr * max(0.0, (self.total_steps - step) / (self.total_steps - warm))

    def step(self) -> None:
        """One update; grads are left untouched for the caller to zero."""
        self.step_count += 1
        t = self.step_count
        lr_t = self.lr_at(t)
        b1, b2 = self.betas
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr_t * self.weight_decay
            p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # resume support -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"__step__": np.asarray(self.step_count)}
        for name in self.params:
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(arrays["__step__"])
        for name in self.params:
            self.m[name] = np.asarray(arrays[f"m:{name}"], dtype=np.float64).copy()
            self.v[name] = np.asarray(arrays[f"v:{name}"], dtype=np.float64).copy()
