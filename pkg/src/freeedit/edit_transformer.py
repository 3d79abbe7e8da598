"""Edit Transformer: self-view attention on the edited starting view, then
cross-view attention that injects it into every source view's tokens."""

from __future__ import annotations

from .nn import AttentionBlock, LayerNorm, Module
from .rng import SplitMix64
from .tensor import ContractError, Tensor


class EditTransformer(Module):
    def __init__(self, dim: int, rng: SplitMix64, heads: int = 8, ffn_dim: int = 256,
                 n_self: int = 2, n_cross: int = 2):
        super().__init__()
        self.self_blocks = [self.add_child(f"self{i}", AttentionBlock(dim, heads, ffn_dim, rng))
                            for i in range(n_self)]
        self.norm = self.add_child("norm", LayerNorm(dim))
        self.cross_blocks = [self.add_child(f"cross{i}", AttentionBlock(dim, heads, ffn_dim, rng))
                             for i in range(n_cross)]

    def self_view_attention(self, start_tokens: Tensor) -> Tensor:
        """(..., 49, C) edited starting-view tokens through the self-attention stack."""
        x = start_tokens
        for blk in self.self_blocks:
            x = blk(x)
        return x

    def cross_view_attention(self, source_tokens: Tensor, start_tokens: Tensor) -> Tensor:
        """Queries from each source view (M, 49, C); keys/values from (1, 49, C) start tokens."""
        x = source_tokens
        for blk in self.cross_blocks:
            x = blk(x, context=start_tokens)
        return x

    def __call__(self, start_tokens: Tensor, source_tokens: Tensor) -> Tensor:
        """h_m = H(f0, f_m) for all M source views at once."""
        if source_tokens.shape[0] == 0:
            raise ContractError("edit transform needs at least one source view")
        if start_tokens.ndim == 2:
            start_tokens = start_tokens.reshape((1,) + start_tokens.shape)
        ctx = self.norm(self.self_view_attention(start_tokens))
        return self.cross_view_attention(source_tokens, ctx)
