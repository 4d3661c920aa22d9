"""Neural building blocks: linear layers, multi-head self-attention,
pre-norm encoder blocks, and the regression heads.

Parameter initialization: Xavier-uniform weights, zero biases, unit
layer-norm gains. Every module exposes ``named_parameters`` for the
optimizer, freezing logic, and checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "Linear",
    "LayerNorm",
    "MultiHeadAttention",
    "EncoderBlock",
    "Encoder",
    "RegressionHead",
]


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(xavier_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}gain": self.gain, f"{prefix}bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product self-attention over a [L, C] sequence."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"embedding dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, seq: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (output [L, C], attention weights [heads, L, L])."""
        if seq.ndim != 2 or seq.shape[1] != self.dim:
            raise ShapeError(f"attention input must be [L, {self.dim}], got {seq.shape}")
        length = seq.shape[0]
        if length == 0:
            raise ShapeError("attention over an empty sequence")

        def split(t: Tensor) -> Tensor:  # [L, C] -> [h, L, d]
            return t.reshape(length, self.heads, self.head_dim).transpose((1, 0, 2))

        q, k, v = split(self.wq(seq)), split(self.wk(seq)), split(self.wv(seq))
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose((1, 0, 2)).reshape(length, self.dim)
        return self.wo(ctx), attn

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            params.update(lin.named_parameters(f"{prefix}{name}."))
        return params


class EncoderBlock:
    """Pre-norm block: positional encoding is re-added before each sub-module.

    With ``pos_to_mlp`` (the default reading):
        u = seq + pos
        a = seq + Dropout(MHA(LN(u)))
        out = a + Dropout(MLP(LN(a + pos)))
    The alternative feeds LN(a) to the MLP, kept switchable for ablation.
    """

    def __init__(self, dim: int, heads: int, dropout: float, rng: np.random.Generator, pos_to_mlp: bool = True):
        self.ln_attn = LayerNorm(dim)
        self.mha = MultiHeadAttention(dim, heads, rng)
        self.ln_mlp = LayerNorm(dim)
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        self.dropout = dropout
        self.pos_to_mlp = pos_to_mlp

    def _mlp(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))

    def __call__(self, seq: Tensor, pos: Tensor, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        if seq.shape != pos.shape:
            raise ShapeError(f"sequence {seq.shape} and positional encoding {pos.shape} differ")
        attn_out, attn = self.mha(self.ln_attn(seq + pos))
        a = seq + T.dropout(attn_out, self.dropout, train, rng)
        mlp_in = a + pos if self.pos_to_mlp else a
        out = a + T.dropout(self._mlp(self.ln_mlp(mlp_in)), self.dropout, train, rng)
        return out, attn

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.ln_attn.named_parameters(f"{prefix}ln_attn."))
        params.update(self.mha.named_parameters(f"{prefix}mha."))
        params.update(self.ln_mlp.named_parameters(f"{prefix}ln_mlp."))
        params.update(self.fc1.named_parameters(f"{prefix}fc1."))
        params.update(self.fc2.named_parameters(f"{prefix}fc2."))
        return params


class Encoder:
    """Stack of identical blocks followed by a final layer norm."""

    def __init__(self, dim: int, heads: int, n_blocks: int, dropout: float, rng, pos_to_mlp: bool = True):
        if n_blocks < 1:
            raise ValueError(f"encoder needs at least one block, got {n_blocks}")
        self.blocks = [EncoderBlock(dim, heads, dropout, rng, pos_to_mlp) for _ in range(n_blocks)]
        self.ln_final = LayerNorm(dim)

    def __call__(self, seq: Tensor, pos: Tensor, train: bool = False, rng=None):
        """Returns (output [L, C], per-block attention maps [n][h, L, L])."""
        attns = []
        for block in self.blocks:
            seq, attn = block(seq, pos, train, rng)
            attns.append(attn)
        return self.ln_final(seq), attns

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            params.update(block.named_parameters(f"{prefix}block{i}."))
        params.update(self.ln_final.named_parameters(f"{prefix}ln_final."))
        return params


class RegressionHead:
    """Linear -> gelu -> Linear, mapping a token embedding to 3 or 4 outputs."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, t: Tensor) -> Tensor:
        if t.shape != (1, self.d_in):
            raise ShapeError(f"head expects [1, {self.d_in}], got {t.shape}")
        return self.fc2(T.gelu(self.fc1(t)))

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = self.fc1.named_parameters(f"{prefix}fc1.")
        params.update(self.fc2.named_parameters(f"{prefix}fc2."))
        return params
