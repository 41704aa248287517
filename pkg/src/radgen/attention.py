"""Attention primitives, including the mask-calibrated text-to-image variant.

The text-to-image refinement adds ``k * sigmoid(M)`` to the raw cross
attention logits before the usual scaling, where ``M`` is a trainable
(T_max, L_max) logit grid sliced to the active sequence lengths and ``k`` is
a large constant that lets small mask changes move attention decisively. An
auxiliary loss pulls every mask cell toward openness so that suppression has
to be earned by the language-modeling objective.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import LengthExceededError, ShapeError


def sinusoidal_positions(length: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sin/cos position table of shape (length, width)."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, width, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / width)
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : width // 2])
    return table.to(dtype)


class LearnableMask(nn.Module):
    """Trainable logit grid recalibrating text-to-image attention."""

    def __init__(self, max_text_len: int, max_visual_len: int, scale: float = 1000.0):
        super().__init__()
        if scale < 0:
            raise ShapeError("mask scale must be non-negative")
        self.max_text_len = max_text_len
        self.max_visual_len = max_visual_len
        self.scale = scale
        self.logits = nn.Parameter(torch.zeros(max_text_len, max_visual_len))

    def _check(self, t: int, l: int) -> None:
        if t > self.max_text_len:
            raise LengthExceededError(f"text length {t} > {self.max_text_len}")
        if l > self.max_visual_len:
            raise LengthExceededError(f"visual length {l} > {self.max_visual_len}")

    def bias(self, t: int, l: int) -> torch.Tensor:
        """Additive logit term ``scale * sigmoid(M)`` for the active block."""
        self._check(t, l)
        return self.scale * torch.sigmoid(self.logits[:t, :l])


def mask_loss(mask: LearnableMask, t: int, l: int) -> torch.Tensor:
    """Openness penalty: sum of ``1 - sigmoid(M)`` over the active t x l block."""
    mask._check(t, l)
    return (1.0 - torch.sigmoid(mask.logits[:t, :l])).sum()


def batch_mask_loss(mask: LearnableMask, text_lengths: torch.Tensor, l: int) -> torch.Tensor:
    """Mean over the batch of per-sample active-block openness penalties."""
    t_max = int(text_lengths.max())
    mask._check(t_max, l)
    row_sums = (1.0 - torch.sigmoid(mask.logits[:t_max, :l])).sum(dim=1)
    prefix = torch.cumsum(row_sums, dim=0)
    return prefix[text_lengths - 1].mean()


def _attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    logit_bias: torch.Tensor | None = None,
    key_padding_mask: torch.Tensor | None = None,
    causal: bool = False,
    need_weights: bool = True,
):
    """Shared multi-head attention core.

    q: (B, T, d); k, v: (B, S, d). ``logit_bias`` (T, S) is added to the raw
    logits before the per-head sqrt scaling. ``key_padding_mask`` is (B, S)
    with True marking keys to ignore. Returns (B, T, d) plus per-head
    weights (B, heads, T, S); with ``need_weights=False`` the weights are
    None and the fused scaled-dot-product kernel is used instead.
    """
    bsz, t, d = q.shape
    s = k.shape[1]
    head_dim = d // heads
    qh = q.view(bsz, t, heads, head_dim).transpose(1, 2)
    kh = k.view(bsz, s, heads, head_dim).transpose(1, 2)
    vh = v.view(bsz, s, heads, head_dim).transpose(1, 2)

    if not need_weights:
        attn_mask = None
        if logit_bias is not None:
            attn_mask = (logit_bias / math.sqrt(head_dim)).to(q.dtype)
        if causal or key_padding_mask is not None:
            bool_bias = torch.zeros(bsz, 1, t, s, dtype=q.dtype, device=q.device)
            if causal:
                future = torch.triu(
                    torch.ones(t, s, dtype=torch.bool, device=q.device), 1
                )
                bool_bias = bool_bias.masked_fill(future, float("-inf"))
            if key_padding_mask is not None:
                bool_bias = bool_bias.masked_fill(
                    key_padding_mask[:, None, None, :], float("-inf")
                )
            attn_mask = bool_bias if attn_mask is None else attn_mask + bool_bias
        out = torch.nn.functional.scaled_dot_product_attention(
            qh, kh, vh, attn_mask=attn_mask
        )
        return out.transpose(1, 2).reshape(bsz, t, d), None

    logits = qh @ kh.transpose(-1, -2)
    if logit_bias is not None:
        logits = logits + logit_bias
    logits = logits / math.sqrt(head_dim)
    if causal:
        future = torch.triu(torch.ones(t, s, dtype=torch.bool, device=q.device), 1)
        logits = logits.masked_fill(future, float("-inf"))
    if key_padding_mask is not None:
        logits = logits.masked_fill(
            key_padding_mask[:, None, None, :], float("-inf")
        )
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(bsz, t, d)
    return out, weights


class MultiHeadAttention(nn.Module):
    """Projection wrapper around the shared attention core."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(width, width, bias=False)
        self.k_proj = nn.Linear(width, width, bias=False)
        self.v_proj = nn.Linear(width, width, bias=False)
        self.out_proj = nn.Linear(width, width, bias=False)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        logit_bias: torch.Tensor | None = None,
        key_padding_mask: torch.Tensor | None = None,
        causal: bool = False,
        need_weights: bool = True,
    ):
        out, weights = _attention(
            self.q_proj(query),
            self.k_proj(key),
            self.v_proj(value),
            self.heads,
            logit_bias=logit_bias,
            key_padding_mask=key_padding_mask,
            causal=causal,
            need_weights=need_weights,
        )
        return self.out_proj(out), weights


def masked_cross_attention(
    query: torch.Tensor,
    key: torch.Tensor,
    value: torch.Tensor,
    mask: LearnableMask,
    attn: MultiHeadAttention,
    enabled: bool = True,
):
    """Text-to-image attention with the learnable mask term.

    query is (T, d) or (B, T, d) text-side states; key/value are the (L, d)
    or (B, L, d) visual states. With the mask disabled the bias term is
    omitted entirely and this is vanilla scaled-dot-product attention.
    Returns (outputs, per-head weights).
    """
    squeeze = query.ndim == 2
    if squeeze:
        query, key, value = query[None], key[None], value[None]
    t, l = query.shape[1], key.shape[1]
    bias = mask.bias(t, l) if enabled else None
    if not enabled:
        mask._check(t, l)
    out, weights = attn(query, key, value, logit_bias=bias)
    if squeeze:
        out, weights = out.squeeze(0), weights.squeeze(0)
    return out, weights
