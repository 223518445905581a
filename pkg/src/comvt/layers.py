"""Parameter containers and the small nn building blocks.

Module gives named-parameter traversal (attribute order, hence
deterministic) for the optimizer, checkpointing and gradient checks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .errors import ContractError
from .rng import SeededRng

INIT_STD = 0.1  # embedding tables


class Module:
    """Base class whose Tensor attributes (recursively) are the parameters."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for name, val in vars(self).items():
            key = prefix + name
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, state: dict, prefix: str = "", strict: bool = True) -> list[str]:
        """Copy arrays from a name->ndarray dict into matching parameters.

        Returns the list of loaded names. strict=True requires every own
        parameter to be present and shape-matched.
        """
        loaded = []
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                if strict:
                    raise ContractError(f"load_state: missing parameter {key!r}")
                continue
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"load_state: shape mismatch on {key!r}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.copy()
            loaded.append(key)
        return loaded

    def state_arrays(self, prefix: str = "") -> dict:
        return {prefix + name: p.data.copy() for name, p in self.named_parameters()}


class Linear(Module):
    """Affine map with fan-in-scaled Gaussian init."""

    def __init__(self, d_in: int, d_out: int, rng: SeededRng, bias: bool = True):
        self.w = parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)))
        self.b = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.w, self.b)


class TwoLayerMlp(Module):
    """hidden = GELU(x W1 + b1); out = hidden W2 + b2."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: SeededRng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)
