"""Parameter containers shared by the embedding, encoder and pretraining heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .functional import BatchNormStats
from .tensor import Parameter, Tensor, get_default_dtype


@dataclass
class Context:
    """Per-forward settings: train/eval mode and the dropout key (seed, step)."""

    training: bool = False
    seed: int = 0
    step: int = 0

    def rng(self, site: int) -> np.random.Generator | None:
        if not self.training:
            return None
        return np.random.default_rng([self.seed, self.step, site])


EVAL = Context(training=False)


class Module:
    """Holds named parameters, child modules and batch-norm buffers."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_stats", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, BatchNormStats):
            self._stats[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield prefix + key, p
        for key, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_stats(self, prefix: str = "") -> Iterator[tuple[str, BatchNormStats]]:
        for key, s in self._stats.items():
            yield prefix + key, s
        for key, child in self._children.items():
            yield from child.named_stats(f"{prefix}{key}.")

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters(prefix)}
        for name, s in self.named_stats(prefix):
            for k, arr in s.state().items():
                out[f"{name}.{k}"] = arr
        return out

    def load_state_dict(self, state, prefix: str = "", strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns names that were absent from ``state``."""
        missing = []
        for name, p in self.named_parameters(prefix):
            if name in state:
                p.assign(state[name])
            else:
                missing.append(name)
        for name, s in self.named_stats(prefix):
            keys = {k: f"{name}.{k}" for k in ("running_mean", "running_var", "tracked")}
            if all(v in state for v in keys.values()):
                s.load({k: state[v] for k, v in keys.items()})
            else:
                missing.append(name)
        if strict and missing:
            raise KeyError(f"missing entries: {missing}")
        return missing

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _param(rng: np.random.Generator, shape, std: float | None = None, fan_in: int | None = None,
           fill: float | None = None) -> Parameter:
    dtype = get_default_dtype()
    if fill is not None:
        return Parameter(np.full(shape, fill), dtype=dtype)
    if std is None:
        bound = 1.0 / np.sqrt(fan_in)
        return Parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)
    return Parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _param(rng, (din, dout), fan_in=din)
        self.bias = _param(rng, (dout,), fill=0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = _param(None, (d,), fill=1.0)
        self.beta = _param(None, (d,), fill=0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta, self.eps)


class BatchNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.gamma = _param(None, (channels,), fill=1.0)
        self.beta = _param(None, (channels,), fill=0.0)
        self.stats = BatchNormStats(channels, momentum)

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return F.batchnorm3d(x, self.gamma, self.beta, self.stats, self.eps, training=ctx.training)


class MLP3(Module):
    """Three linear layers with GELU between them."""

    def __init__(self, din: int, dhidden: int, dout: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(din, dhidden, rng)
        self.fc2 = Linear(dhidden, dhidden, rng)
        self.fc3 = Linear(dhidden, dout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc3(F.gelu(self.fc2(F.gelu(self.fc1(x)))))
