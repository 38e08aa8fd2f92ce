"""
Neural network building blocks on top of looped_vlm.tensor.
"""

from typing import Callable, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .tensor import Array, Parameter

# Receives the keys and values a layer computed for its current rows.
KVSink = Callable[[np.ndarray, np.ndarray], None]
PastKV = Tuple[np.ndarray, np.ndarray]


class Module:
    """
    Base class for anything holding parameters.

    Parameters are discovered from instance attributes in assignment order:
    Parameter attributes, nested Modules and lists of Modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy values into the parameters in place.

        Raises:
            CheckpointError: If strict and names differ
            ShapeError: If a stored array has the wrong shape
        """
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise CheckpointError(f"State mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, values in state.items():
            if name not in own:
                continue
            param = own[name]
            if tuple(values.shape) != param.shape:
                raise ShapeError(f"{name}: stored shape {tuple(values.shape)} != parameter shape {param.shape}")
            param.data[...] = values


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 init_std: float = 0.02, bias: bool = True):
        self.weight = Parameter(T.randn((in_features, out_features), init_std, rng))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Array) -> Array:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, init_std: float = 0.02):
        self.weight = Parameter(T.randn((num, dim), init_std, rng))

    def __call__(self, ids) -> Array:
        return T.embedding(self.weight, ids)


class RMSNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))

    def __call__(self, x: Array) -> Array:
        return T.rmsnorm(x, self.gain)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, init_std: float = 0.02):
        if dim % heads != 0:
            raise ShapeError(f"hidden width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, init_std)
        self.k_proj = Linear(dim, dim, rng, init_std)
        self.v_proj = Linear(dim, dim, rng, init_std)
        self.o_proj = Linear(dim, dim, rng, init_std)

    def __call__(self, x: Array, causal: bool = True, past: Optional[PastKV] = None,
                 kv_sink: Optional[KVSink] = None, identity: bool = False, batch: int = 1) -> Array:
        """
        Args:
            x: Rows to attend from (n x h), or batch sequences of equal length stacked row-wise
            causal: Mask keys after each query's absolute position
            past: Keys and values of earlier positions, prepended to this call's own
            kv_sink: Called with this call's keys and values (for caching)
            identity: Skip token mixing; each row only sees itself
            batch: Number of stacked sequences

        Raises:
            ShapeError: If cached keys are combined with a batch of sequences
        """
        if batch > 1 and past is not None:
            raise ShapeError("cached keys and values are only supported for a single sequence")
        v = self.v_proj(x)
        if identity:
            return self.o_proj(v)
        q = self.q_proj(x)
        k = self.k_proj(x)
        if kv_sink is not None:
            kv_sink(k.data, v.data)
        if past is not None:
            k = T.concat([Array(past[0]), k], axis=0)
            v = T.concat([Array(past[1]), v], axis=0)
        return self.o_proj(T.attention(q, k, v, self.heads, causal=causal, batch=batch))


class DecoderBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x)) with a GELU MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, init_std: float = 0.02):
        self.attn_norm = RMSNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, init_std)
        self.mlp_norm = RMSNorm(dim)
        self.fc_in = Linear(dim, mlp_ratio * dim, rng, init_std)
        self.fc_out = Linear(mlp_ratio * dim, dim, rng, init_std)

    def __call__(self, x: Array, causal: bool = True, past: Optional[PastKV] = None,
                 kv_sink: Optional[KVSink] = None, identity: bool = False, batch: int = 1) -> Array:
        x = x + self.attn(self.attn_norm(x), causal=causal, past=past, kv_sink=kv_sink,
                          identity=identity, batch=batch)
        return x + self.fc_out(T.gelu(self.fc_in(self.mlp_norm(x))))
