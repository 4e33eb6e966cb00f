"""AdamW with decoupled weight decay and the two-drop step schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def lr_at(step: int, total_steps: int, base_lr: float, milestones=(0.9, 0.95), factor: float = 0.1) -> float:
    """``base_lr`` divided by 10 once per passed milestone fraction of training."""
    frac = step / max(total_steps, 1)
    return base_lr * factor ** sum(frac >= m for m in milestones)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], state: AdamState, lrs: dict[str, float], weight_decay: float = 0.05,
               betas=(0.9, 0.999), eps: float = 1e-8):
    """One in-place update of every parameter that has a gradient."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        lr = lrs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """Parameter groups are expressed as a per-name learning-rate multiplier."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, weight_decay: float = 0.05,
                 total_steps: int = 1, multipliers: dict[str, float] | None = None, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.multipliers = multipliers or {}
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def lrs(self, step: int | None = None) -> dict[str, float]:
        base = lr_at(self.state.step if step is None else step, self.total_steps, self.lr)
        return {n: base * self.multipliers.get(n, 1.0) for n in self.params}

    def group_lrs(self, step: int | None = None) -> tuple[float, ...]:
        """Distinct learning rates, largest first."""
        return tuple(sorted(set(self.lrs(step).values()), reverse=True))

    def step(self):
        adamw_step(self.params, self.state, self.lrs(), self.weight_decay, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array(self.state.step, dtype=np.float64)}
        for n in self.state.m:
            out[f"optim.m.{n}"] = self.state.m[n]
            out[f"optim.v.{n}"] = self.state.v[n]
        return out

    def load_state_dict(self, blob: dict[str, np.ndarray]):
        self.state = AdamState(step=int(np.asarray(blob["optim.step"]).reshape(-1)[0]))
        for key, val in blob.items():
            if key.startswith("optim.m."):
                name = key[len("optim.m."):]
                self.state.m[name] = np.array(val, dtype=self.params[name].dtype)
                self.state.v[name] = np.array(blob[f"optim.v.{name}"], dtype=self.params[name].dtype)
