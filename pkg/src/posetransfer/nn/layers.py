"""Layers built on the autodiff Tensor: linear, MLP, layer norm, attention, encoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_BIAS = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 256
    keypoint_hidden: int = 256
    decoder_hidden: int = 256

    def __post_init__(self):
        for k, v in asdict(self).items():
            if int(v) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @classmethod
    def full_size(cls) -> "TransformerConfig":
        """Large setting; the defaults are the single-core variant."""
        return cls(256, 6, 8, 2048, 1024, 1024)


class Module:
    """Parameter container; parameters are Tensors with requires_grad."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        own = dict(self.named_parameters())
        for name, p in own.items():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key!r}")
            val = np.asarray(state[key], dtype=np.float64)
            if val.shape != p.shape:
                raise ValueError(f"{key}: shape {val.shape} != {p.shape}")
            p.data = val.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(np.zeros(d_out))

    def __call__(self, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng, zero_out: bool = False):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng, zero=zero_out)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


def mask_bias(mask) -> Optional[np.ndarray]:
    """Additive attention bias (..., 1, 1, L) from a boolean key mask (..., L)."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, MASK_BIAS)[..., None, None, :]


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng):
        if d % heads:
            raise ValueError("model dim must be divisible by head count")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng, zero=True)
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, d = x.shape
        x = x.reshape(*lead, L, self.heads, d // self.heads)
        n = x.ndim
        return x.swapaxes(n - 3, n - 2)  # (..., h, L, dh)

    def __call__(self, xq, xkv, key_mask=None):
        xq, xkv = ad.as_tensor(xq), ad.as_tensor(xkv)
        if xq.shape[-1] != xkv.shape[-1]:
            raise ValueError("query and key/value widths differ")
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        dh = q.shape[-1]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        bias = mask_bias(key_mask)
        if bias is not None:
            scores = scores + bias
        att = ad.softmax(scores, axis=-1)
        self.last_weights = att.data
        out = att @ v  # (..., h, Lq, dh)
        n = out.ndim
        out = out.swapaxes(n - 3, n - 2)
        out = out.reshape(*out.shape[:-2], out.shape[-2] * out.shape[-1])
        return self.o(out)


class EncoderBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: TransformerConfig, rng):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.mlp = MLP(cfg.d_model, cfg.mlp_hidden, cfg.d_model, rng, zero_out=True)

    def __call__(self, x, mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.mlp(self.ln2(x))


class TransformerEncoder(Module):
    def __init__(self, cfg: TransformerConfig, rng):
        self.cfg = cfg
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_layers)]

    def __call__(self, tokens, mask=None):
        tokens = ad.as_tensor(tokens)
        if tokens.shape[-1] != self.cfg.d_model:
            raise ValueError(f"encoder expects width {self.cfg.d_model}, got {tokens.shape[-1]}")
        if mask is not None and np.shape(mask) != tokens.shape[:-1]:
            raise ValueError("mask shape does not match tokens")
        x = tokens
        for blk in self.blocks:
            x = blk(x, mask)
        return x


class CrossAttentionBlock(Module):
    """query + MHA(LN(query), LN(keyvalue))."""

    def __init__(self, d: int, heads: int, rng):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)

    def __call__(self, query, keyvalue, key_mask=None):
        return query + self.attn(self.ln_q(query), self.ln_kv(keyvalue), key_mask)
