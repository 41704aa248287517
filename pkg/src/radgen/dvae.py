"""Discrete VAE image tokenizer.

A small convolutional encoder maps an image to a grid of logits over a
codebook; taking the per-position argmax yields the visual token sequence.
A mirrored decoder reconstructs the image from the selected codes. Training
uses a temperature-annealed softmax relaxation of the categorical choice
(Gumbel-softmax style, but noise-free so runs are bit-reproducible): the
decoder sees ``softmax(logits / tau) @ codebook``, and as tau shrinks the
relaxation approaches the hard argmax lookup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass
class DvaeConfig:
    codebook_size: int = 512
    code_dim: int = 64
    channels: int = 1
    downsample: int = 8
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 16
    temp_start: float = 1.0
    temp_end: float = 0.0625
    seed: int = 0

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.temp_start <= 0 or self.temp_end <= 0:
            raise ConfigError("temperatures must be positive")
        n = math.log2(self.downsample)
        if self.downsample < 2 or n != int(n):
            raise ConfigError("downsample must be a power of two >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


class DiscreteVae(nn.Module):
    """Encoder/decoder pair with a learnable codebook."""

    def __init__(self, config: DvaeConfig):
        super().__init__()
        config.validate()
        self.config = config
        n_down = int(math.log2(config.downsample))
        widths = [min(16 * 2**i, 128) for i in range(n_down)]

        enc = []
        in_ch = config.channels
        for w in widths:
            enc += [nn.Conv2d(in_ch, w, 4, stride=2, padding=1), nn.ReLU()]
            in_ch = w
        enc.append(nn.Conv2d(in_ch, config.codebook_size, 1))
        self.encoder = nn.Sequential(*enc)

        self.codebook = nn.Parameter(
            torch.randn(config.codebook_size, config.code_dim) * 0.1
        )

        dec = [nn.Conv2d(config.code_dim, widths[-1], 1), nn.ReLU()]
        for w_in, w_out in zip(widths[::-1], widths[-2::-1]):
            dec += [nn.ConvTranspose2d(w_in, w_out, 4, stride=2, padding=1), nn.ReLU()]
        dec += [
            nn.ConvTranspose2d(widths[0], config.channels, 4, stride=2, padding=1),
            nn.Sigmoid(),
        ]
        self.decoder = nn.Sequential(*dec)

    def _check_image_shape(self, images: torch.Tensor) -> None:
        m, c = self.config.downsample, self.config.channels
        _, ch, h, w = images.shape
        if ch != c:
            raise ShapeError(f"expected {c} channels, got {ch}")
        if h % m or w % m:
            raise ShapeError(f"image dims {h}x{w} not divisible by {m}")

    def encode_logits(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, L, K) logit grid, row-major over the token grid."""
        self._check_image_shape(images)
        grid = self.encoder(images)  # (B, K, H/M, W/M)
        return grid.flatten(2).transpose(1, 2)

    def decode_codes(self, codes: torch.Tensor, grid_hw: tuple[int, int]) -> torch.Tensor:
        """(B, L, code_dim) -> reconstructed (B, C, H, W)."""
        b, l, d = codes.shape
        gh, gw = grid_hw
        return self.decoder(codes.transpose(1, 2).reshape(b, d, gh, gw))

    def relaxed_forward(self, images: torch.Tensor, temperature: float) -> torch.Tensor:
        """Differentiable reconstruction through the softmax relaxation."""
        logits = self.encode_logits(images)
        soft = torch.softmax(logits / temperature, dim=-1)
        codes = soft @ self.codebook
        gh = images.shape[2] // self.config.downsample
        gw = images.shape[3] // self.config.downsample
        return self.decode_codes(codes, (gh, gw))


def _to_batch(image: np.ndarray, channels: int) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected HxWxC image, got shape {arr.shape}")
    if arr.shape[2] != channels:
        raise ShapeError(f"expected {channels} channels, got {arr.shape[2]}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def encode_image(model: DiscreteVae, image: np.ndarray) -> np.ndarray:
    """Image (H, W, C) in [0,1] -> logit grid D of shape (L, codebook_size)."""
    with torch.no_grad():
        logits = model.encode_logits(_to_batch(image, model.config.channels))
    return logits[0].numpy()


def discretize(d: np.ndarray | torch.Tensor) -> np.ndarray:
    """Per-row argmax of the logit grid; ties break to the lowest index."""
    arr = d.detach().numpy() if isinstance(d, torch.Tensor) else np.asarray(d)
    if arr.ndim != 2:
        raise ShapeError(f"expected (L, K) logit grid, got shape {arr.shape}")
    return np.argmax(arr, axis=1).astype(np.int64)


def tokenize_images(model: DiscreteVae, images: torch.Tensor) -> torch.Tensor:
    """Batched hard tokenization: (B, C, H, W) -> (B, L) int64 token ids."""
    with torch.no_grad():
        return model.encode_logits(images).argmax(dim=-1)


def reconstruct(model: DiscreteVae, image: np.ndarray) -> np.ndarray:
    """Round-trip an image through hard tokens; output clamped to [0,1]."""
    batch = _to_batch(image, model.config.channels)
    with torch.no_grad():
        tokens = tokenize_images(model, batch)
        codes = model.codebook[tokens]
        gh = batch.shape[2] // model.config.downsample
        gw = batch.shape[3] // model.config.downsample
        recon = model.decode_codes(codes, (gh, gw)).clamp(0.0, 1.0)
    return recon[0].numpy().transpose(1, 2, 0)


def reconstruction_mse(model: DiscreteVae, images: np.ndarray) -> float:
    """Mean per-pixel squared error of hard-token reconstructions."""
    errs = [float(np.mean((reconstruct(model, img) - img) ** 2)) for img in images]
    return sum(errs) / len(errs)


def build_dvae(config: DvaeConfig) -> DiscreteVae:
    """Construct a seeded model without touching the global RNG state."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        return DiscreteVae(config)


def train_dvae(images: np.ndarray, config: DvaeConfig) -> DiscreteVae:
    """Train a tokenizer on (N, H, W, C) images with MSE reconstruction loss.

    The categorical relaxation temperature anneals linearly from
    ``temp_start`` to ``temp_end`` over the configured number of steps.
    """
    config.validate()
    model = build_dvae(config)
    data = np.asarray(images, dtype=np.float32)
    if data.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) dataset, got shape {data.shape}")
    if config.steps == 0:
        return model

    tensors = torch.from_numpy(np.ascontiguousarray(data.transpose(0, 3, 1, 2)))
    model._check_image_shape(tensors[:1])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(tensors))
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(tensors))
            cursor = 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        frac = step / max(config.steps - 1, 1)
        temp = config.temp_start + (config.temp_end - config.temp_start) * frac
        batch = tensors[idx]
        recon = model.relaxed_forward(batch, temp)
        loss = torch.mean((recon - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def relaxation_agreement(model: DiscreteVae, images: np.ndarray, temperature: float) -> float:
    """Fraction of positions where the relaxed forward's top code equals argmax."""
    data = np.asarray(images, dtype=np.float32)
    tensors = torch.from_numpy(np.ascontiguousarray(data.transpose(0, 3, 1, 2)))
    with torch.no_grad():
        logits = model.encode_logits(tensors)
        soft = torch.softmax(logits / temperature, dim=-1)
        agree = (soft.argmax(dim=-1) == logits.argmax(dim=-1)).float().mean()
    return float(agree)
