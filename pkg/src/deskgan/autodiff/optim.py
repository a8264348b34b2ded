"""Parameter containers and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ParameterStore:
    """Named trainable tensors plus their Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def set_value(self, name: str, value: np.ndarray) -> None:
        old = self.params[name]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise ShapeError(f"{name}: expected {old.shape}, got {value.shape}")
        self.params[name] = Tensor(value.copy(), requires_grad=True, name=name)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.params.items():
            out[f"param/{name}"] = t.data
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for name in self.params:
            self.set_value(name, arrays[f"param/{name}"])
            self.m[name] = np.array(arrays[f"adam_m/{name}"], dtype=self.params[name].dtype)
            self.v[name] = np.array(arrays[f"adam_v/{name}"], dtype=self.params[name].dtype)
        self.step = int(step)


def adam_step(store: ParameterStore, grads: dict[str, Tensor | np.ndarray], lr: float,
              beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8) -> ParameterStore:
    """Bias-corrected Adam, applied to every parameter named in ``grads``.

    Parameters are replaced by fresh tensors (never mutated in place), so
    graphs built before the step still see the old values.
    """
    for name, g in grads.items():
        p = store.params[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = store.params[name]
        dt = p.dtype.type
        g = (g.data if isinstance(g, Tensor) else np.asarray(g)).astype(p.dtype, copy=False)
        m = store.m[name] * dt(beta1) + g * dt(1.0 - beta1)
        v = store.v[name] * dt(beta2) + (g * g) * dt(1.0 - beta2)
        store.m[name] = m
        store.v[name] = v
        update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))
        store.params[name] = Tensor(p.data - dt(lr) * update, requires_grad=True, name=name)
    return store
