"""Parameter containers shared by the aggregation operators and the network."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import BatchNormState, Tensor, batch_norm, leaky_relu, linear, relu


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Tiny container: walks attributes for parameters, buffers and sub-modules."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def buffer_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.named_buffers():
            out[name + ".running_mean"] = st.running_mean.astype(np.float32)
            out[name + ".running_var"] = st.running_var.astype(np.float32)
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        unexpected = set(arrays) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
            p.data = np.array(arrays[name], dtype=p.dtype)
        if buffers is not None:
            for name, st in self.named_buffers():
                st.mean_acc = np.asarray(buffers[name + ".running_mean"], dtype=np.float64)
                st.var_acc = np.asarray(buffers[name + ".running_var"], dtype=np.float64)
                st.weight = 1.0

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(kaiming_uniform(rng, c_in, (c_in, c_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Per-feature batch normalization; ``enabled=False`` makes it the identity."""

    def __init__(self, c: int, momentum: float = 0.99, eps: float = 1e-5, enabled: bool = True):
        self.enabled = enabled
        if enabled:
            self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
            self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
            self.state = BatchNormState(c, momentum, eps)

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return batch_norm(x, self.gamma, self.beta, self.state, training=self.training)


class Unary(Module):
    """1x1 convolution: bias-free linear map, batch norm, optional activation."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, activation: str | None = "leaky",
                 norm: bool = True, slope: float = 0.1):
        self.linear = Linear(c_in, c_out, rng, bias=not norm)
        self.norm = BatchNorm(c_out, enabled=norm)
        self.activation = activation
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        y = self.norm(self.linear(x))
        if self.activation == "leaky":
            return leaky_relu(y, self.slope)
        if self.activation == "relu":
            return relu(y)
        return y
