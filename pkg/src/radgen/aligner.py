"""Cross-modal feature alignment.

A single modality-agnostic module processes image and report embeddings
alike: every token attends over a shared, fixed orthonormal basis (rescaled
elementwise by a trainable gain and bias), and the attended features are
fused with the raw embeddings through an input/forget gate pair. Pooled,
L2-normalized sequence features are aligned across modalities with a triplet
hinge loss mined against in-batch hard negatives.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .basis import DEFAULT_BASIS_ROWS, random_orthonormal_basis
from .errors import BatchTooSmallError, ShapeError, ZeroNormError


def scale_basis(basis: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Elementwise rescaling ``gain * basis + bias``."""
    if gain.shape != basis.shape or bias.shape != basis.shape:
        raise ShapeError(
            f"gain {tuple(gain.shape)} / bias {tuple(bias.shape)} "
            f"do not match basis {tuple(basis.shape)}"
        )
    return gain * basis + bias


def basis_attention(
    e: torch.Tensor,
    b_hat: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Multi-head attention of token embeddings over the scaled basis rows.

    ``e`` is (..., T, d); ``b_hat`` is (R, d). Queries come from ``e`` and
    both keys and values from ``b_hat``; per head the logits are scaled by
    sqrt(head_dim) and the softmax runs over the R basis rows. Head outputs
    are concatenated and projected by ``wo``. All projection matrices are
    applied on the right (``x @ w``) and must be (d, d).
    """
    d = e.shape[-1]
    if b_hat.shape[-1] != d:
        raise ShapeError(f"basis dim {b_hat.shape[-1]} != embedding dim {d}")
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (d, d):
            raise ShapeError(f"{name} must be ({d}, {d}), got {tuple(w.shape)}")
    head_dim = d // heads
    squeeze = e.ndim == 2
    if squeeze:
        e = e.unsqueeze(0)
    bsz, t, _ = e.shape
    r = b_hat.shape[0]

    q = (e @ wq).view(bsz, t, heads, head_dim).transpose(1, 2)       # (B, h, T, dh)
    if not return_weights:
        k = (b_hat @ wk).view(r, heads, head_dim).transpose(0, 1)    # (h, R, dh)
        v = (b_hat @ wv).view(r, heads, head_dim).transpose(0, 1)
        attended = torch.nn.functional.scaled_dot_product_attention(
            q, k.unsqueeze(0).expand(bsz, -1, -1, -1),
            v.unsqueeze(0).expand(bsz, -1, -1, -1),
        )
        out = attended.transpose(1, 2).reshape(bsz, t, d) @ wo
        return out.squeeze(0) if squeeze else out

    k = (b_hat @ wk).view(r, heads, head_dim).permute(1, 2, 0)       # (h, dh, R)
    v = (b_hat @ wv).view(r, heads, head_dim).transpose(0, 1)        # (h, R, dh)
    logits = q @ k / head_dim**0.5                                   # (B, h, T, R)
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(bsz, t, d) @ wo
    if squeeze:
        out = out.squeeze(0)
        weights = weights.squeeze(0)
    return out, weights


def gate(x: torch.Tensor, y: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """Sigmoid gate ``sigmoid(x @ w1 + y @ w2)``; values strictly in (0, 1)."""
    if x.shape != y.shape:
        raise ShapeError(f"gate inputs differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if w1.shape != w2.shape or x.shape[-1] != w1.shape[0]:
        raise ShapeError("gate weight shapes do not conform with inputs")
    return torch.sigmoid(x @ w1 + y @ w2)


def dual_gate_fuse(
    e: torch.Tensor,
    f_tilde: torch.Tensor,
    wi1: torch.Tensor,
    wi2: torch.Tensor,
    wf1: torch.Tensor,
    wf2: torch.Tensor,
) -> torch.Tensor:
    """Blend raw embeddings with basis-attended features.

    ``G_in * tanh(e + f_tilde) + G_forget * e + f_tilde`` where each gate is
    a sigmoid of its own pair of weight matrices over (e, f_tilde).
    """
    if e.shape != f_tilde.shape:
        raise ShapeError(
            f"embeddings {tuple(e.shape)} vs attended {tuple(f_tilde.shape)}"
        )
    g_in = gate(e, f_tilde, wi1, wi2)
    g_forget = gate(e, f_tilde, wf1, wf2)
    return g_in * torch.tanh(e + f_tilde) + g_forget * e + f_tilde


def pool_global(f: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Masked mean over rows followed by L2 normalization.

    ``f`` is (T, d) or (B, T, d); ``mask`` (same leading dims, T) marks rows
    that count. Raises ZeroNormError when a mean vector has norm < 1e-12.
    """
    squeeze = f.ndim == 2
    if squeeze:
        f = f.unsqueeze(0)
        mask = mask.unsqueeze(0) if mask is not None else None
    if f.shape[1] == 0:
        raise ShapeError("cannot pool an empty sequence")
    if mask is None:
        mean = f.mean(dim=1)
    else:
        m = mask.to(f.dtype).unsqueeze(-1)
        denom = m.sum(dim=1).clamp(min=1.0)
        mean = (f * m).sum(dim=1) / denom
    norms = mean.norm(dim=-1, keepdim=True)
    if bool((norms < 1e-12).any()):
        raise ZeroNormError("pooled feature has near-zero norm")
    out = mean / norms
    return out.squeeze(0) if squeeze else out


def triplet_contrastive_loss(
    image_feats: torch.Tensor, report_feats: torch.Tensor, margin: float = 0.2
) -> torch.Tensor:
    """Bidirectional hinge loss with in-batch hard negatives.

    Both inputs are (B, d) and expected unit-norm, so cosine similarity is a
    plain dot product. For each matched pair the hard negative is the
    non-matching feature most similar to the anchor; the per-pair loss is the
    sum of the two hinge terms and the batch loss is their mean.
    """
    if image_feats.shape != report_feats.shape:
        raise ShapeError("image/report feature shapes differ")
    b = image_feats.shape[0]
    if b < 2:
        raise BatchTooSmallError("triplet loss needs a batch of >= 2 pairs")
    sim = image_feats @ report_feats.T                       # (B, B)
    pos = sim.diagonal()
    off_diag = torch.eye(b, dtype=torch.bool, device=sim.device)
    neg_inf = torch.finfo(sim.dtype).min
    hardest_report = sim.masked_fill(off_diag, neg_inf).max(dim=1).values
    hardest_image = sim.masked_fill(off_diag, neg_inf).max(dim=0).values
    terms = torch.relu(margin - pos + hardest_report) + torch.relu(
        margin - pos + hardest_image
    )
    return terms.sum() / b


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a_n = a / a.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    b_n = b / b.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    return a_n @ b_n.T


def paired_cosine_similarities(
    image_feats: torch.Tensor, report_feats: torch.Tensor
) -> np.ndarray:
    """Cosine similarity of each matched (image, report) pair."""
    a = image_feats / image_feats.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    b = report_feats / report_feats.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    return (a * b).sum(dim=-1).detach().cpu().numpy()


def alignment_score(image_feats: torch.Tensor, report_feats: torch.Tensor) -> float:
    """Fraction of matched pairs whose similarity exceeds 0.5 after min-max
    normalization over the evaluated set. Degenerate (all-equal) similarity
    sets score 0."""
    if image_feats.shape[0] < 2:
        raise BatchTooSmallError("alignment score needs >= 2 pairs")
    sims = paired_cosine_similarities(image_feats, report_feats)
    lo, hi = float(sims.min()), float(sims.max())
    if hi == lo:
        return 0.0
    normalized = (sims - lo) / (hi - lo)
    return float(np.mean(normalized > 0.5))


class CrossModalAligner(nn.Module):
    """Shared aligner applied identically to image and report embeddings.

    The basis is built once from a seeded standard-normal matrix, stored as a
    non-trainable buffer, and only the elementwise gain/bias plus the
    attention and gate projections learn.
    """

    def __init__(
        self,
        width: int,
        heads: int = 4,
        basis_rows: int = DEFAULT_BASIS_ROWS,
        basis_seed: int = 0,
    ):
        super().__init__()
        if width % heads:
            raise ShapeError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        b = random_orthonormal_basis(width, rows=basis_rows, seed=basis_seed)
        self.register_buffer("basis", torch.from_numpy(b).to(torch.float32))
        self.gain = nn.Parameter(torch.ones(basis_rows, width))
        self.bias = nn.Parameter(torch.zeros(basis_rows, width))
        self.wq = nn.Parameter(torch.empty(width, width))
        self.wk = nn.Parameter(torch.empty(width, width))
        self.wv = nn.Parameter(torch.empty(width, width))
        self.wo = nn.Parameter(torch.empty(width, width))
        self.wi1 = nn.Parameter(torch.empty(width, width))
        self.wi2 = nn.Parameter(torch.empty(width, width))
        self.wf1 = nn.Parameter(torch.empty(width, width))
        self.wf2 = nn.Parameter(torch.empty(width, width))
        for p in (self.wq, self.wk, self.wv, self.wo,
                  self.wi1, self.wi2, self.wf1, self.wf2):
            nn.init.xavier_uniform_(p)

    def scaled_basis(self) -> torch.Tensor:
        return scale_basis(self.basis, self.gain, self.bias)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        b_hat = self.scaled_basis()
        f_tilde = basis_attention(
            e, b_hat, self.wq, self.wk, self.wv, self.wo, self.heads
        )
        return dual_gate_fuse(
            e, f_tilde, self.wi1, self.wi2, self.wf1, self.wf2
        )
