"""Encoder-decoder transformer with mask-calibrated cross attention.

Three pre-norm encoder layers self-attend over the visual feature sequence;
three pre-norm decoder layers run causal self-attention over the report
prefix and cross-attend to the encoder output. Each decoder layer owns one
learnable text-to-image mask shared across its heads. Hidden states are
mapped to vocabulary distributions by a linear head plus softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import (
    LearnableMask,
    MultiHeadAttention,
    masked_cross_attention,
    sinusoidal_positions,
)
from .errors import ConfigError, LengthExceededError, ShapeError
from .vocab import PAD_ID


@dataclass
class TransformerConfig:
    layers: int = 3
    width: int = 48
    heads: int = 2
    ffn_width: int = 96
    dropout: float = 0.1
    max_text_len: int = 48
    max_visual_len: int = 196
    mask_scale: float = 1000.0

    def validate(self) -> None:
        if self.width % self.heads:
            raise ConfigError("width must be divisible by head count")
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if self.mask_scale <= 0:
            raise ConfigError("mask_scale must be positive")


@dataclass
class DecoderOutput:
    """Per-step decoder states and distributions, plus attention for export."""

    hidden: torch.Tensor                    # (B, T, d)
    log_probs: torch.Tensor                 # (B, T, vocab)
    cross_attention: tuple[torch.Tensor, ...] = field(default_factory=tuple)
    # one (B, heads, T, L) tensor per decoder layer

    def distributions(self) -> torch.Tensor:
        return self.log_probs.exp()

    def final_layer_attention(self) -> torch.Tensor:
        """Head-averaged final-layer cross attention, (B, T, L)."""
        return self.cross_attention[-1].mean(dim=1)


class FeedForward(nn.Module):
    def __init__(self, width: int, ffn_width: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(width, ffn_width),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_width, width),
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.width, cfg.heads)
        self.ffn = FeedForward(cfg.width, cfg.ffn_width, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.width)
        self.norm2 = nn.LayerNorm(cfg.width)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        h = self.norm1(x)
        attn_out, _ = self.self_attn(h, h, h, need_weights=False)
        x = x + self.dropout(attn_out)
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.width, cfg.heads)
        self.cross_attn = MultiHeadAttention(cfg.width, cfg.heads)
        self.mask = LearnableMask(cfg.max_text_len, cfg.max_visual_len, cfg.mask_scale)
        self.ffn = FeedForward(cfg.width, cfg.ffn_width, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.width)
        self.norm2 = nn.LayerNorm(cfg.width)
        self.norm3 = nn.LayerNorm(cfg.width)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_pad_mask, mask_enabled):
        h = self.norm1(x)
        attn_out, _ = self.self_attn(
            h, h, h, key_padding_mask=self_pad_mask, causal=True, need_weights=False
        )
        x = x + self.dropout(attn_out)
        cross_out, weights = masked_cross_attention(
            self.norm2(x), memory, memory, self.mask, self.cross_attn,
            enabled=mask_enabled,
        )
        x = x + self.dropout(cross_out)
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x, weights


class Seq2SeqTransformer(nn.Module):
    """Visual-to-report transformer; inputs are already width-d features."""

    def __init__(self, cfg: TransformerConfig, vocab_size: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.decoder_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.encoder_norm = nn.LayerNorm(cfg.width)
        self.decoder_norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, vocab_size)
        self.dropout = nn.Dropout(cfg.dropout)
        max_len = max(cfg.max_text_len, cfg.max_visual_len)
        self.register_buffer(
            "positions", sinusoidal_positions(max_len, cfg.width), persistent=False
        )

    def encode(self, visual_feats: torch.Tensor) -> torch.Tensor:
        l = visual_feats.shape[1]
        if l > self.cfg.max_visual_len:
            raise LengthExceededError(f"visual length {l} > {self.cfg.max_visual_len}")
        x = self.dropout(visual_feats + self.positions[:l])
        for layer in self.encoder_layers:
            x = layer(x)
        return self.encoder_norm(x)

    def decode(
        self,
        text_feats: torch.Tensor,
        memory: torch.Tensor,
        text_pad_mask: torch.Tensor | None = None,
        mask_enabled: bool = False,
    ) -> DecoderOutput:
        t = text_feats.shape[1]
        if t > self.cfg.max_text_len:
            raise LengthExceededError(f"text length {t} > {self.cfg.max_text_len}")
        x = self.dropout(text_feats + self.positions[:t])
        attn_maps = []
        for layer in self.decoder_layers:
            x, weights = layer(x, memory, text_pad_mask, mask_enabled)
            attn_maps.append(weights)
        hidden = self.decoder_norm(x)
        log_probs = torch.log_softmax(self.head(hidden), dim=-1)
        return DecoderOutput(
            hidden=hidden, log_probs=log_probs, cross_attention=tuple(attn_maps)
        )

    def forward(self, visual_feats, text_feats, text_pad_mask=None, mask_enabled=False):
        memory = self.encode(visual_feats)
        return self.decode(text_feats, memory, text_pad_mask, mask_enabled)


def cross_entropy_loss(
    distributions: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID
) -> torch.Tensor:
    """Summed negative log-likelihood of the targets (natural log).

    ``distributions`` holds probabilities, (T, V) or (B, T, V); targets are
    (T,) or (B, T). PAD positions are excluded. Batched input returns the
    mean over samples of the per-sample sums.
    """
    if distributions.ndim == 2:
        distributions, targets = distributions[None], targets[None]
    if distributions.shape[:2] != targets.shape:
        raise ShapeError(
            f"distributions {tuple(distributions.shape)} vs targets {tuple(targets.shape)}"
        )
    return nll_from_log_probs(distributions.log(), targets, pad_id)


def nll_from_log_probs(
    log_probs: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID
) -> torch.Tensor:
    """Same contract as :func:`cross_entropy_loss` but takes log-probabilities."""
    if log_probs.ndim == 2:
        log_probs, targets = log_probs[None], targets[None]
    picked = log_probs.gather(-1, targets.unsqueeze(-1).clamp(min=0)).squeeze(-1)
    keep = (targets != pad_id).to(log_probs.dtype)
    return -(picked * keep).sum(dim=1).mean()
