"""Parameter containers built on the numeric kernel."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numkernel import FloatArray, Tensor, layer_norm, linear, relu


def uniform(rng: np.random.Generator, shape: Sequence[int], bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)))


class Module:
    """Every ``Tensor`` attribute of a module is a parameter.

    Submodules are found in attributes holding a ``Module``, or a list or dict
    of them; traversal follows attribute insertion order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{key}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, FloatArray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, FloatArray], strict: bool = True) -> List[str]:
        """Copy matching tensors in; returns the names that were loaded."""
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        loaded = []
        for name, value in state.items():
            if name not in params:
                continue
            target = params[name]
            if tuple(np.shape(value)) != target.shape:
                raise DimensionError(f"{name}: checkpoint {np.shape(value)} vs model {target.shape}")
            target.assign_(value)
            loaded.append(name)
        return loaded


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = uniform(rng, (out_features, in_features), bound)
        if bias:
            self.bias = Tensor(np.zeros(out_features))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, getattr(self, "bias", None))


class LoraLinear(Module):
    """A frozen base ``Linear`` plus a low-rank update ``(alpha / r) * B @ A``."""

    def __init__(self, base: Linear, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1 or rank > min(base.in_features, base.out_features):
            raise ConfigurationError(
                f"LoRA rank {rank} invalid for a {base.out_features}x{base.in_features} layer"
            )
        self.base = base
        self.lora_a = uniform(rng, (rank, base.in_features), 1.0 / math.sqrt(base.in_features))
        self.lora_b = Tensor(np.zeros((base.out_features, rank)))
        self.scaling = alpha / rank

    @property
    def rank(self) -> int:
        return self.lora_a.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        update = linear(linear(x, self.lora_a), self.lora_b)
        return self.base(x) + update * self.scaling


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ConfigurationError("an MLP needs at least input and output widths")
        self.layers = [Linear(d_in, d_out, rng) for d_in, d_out in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
