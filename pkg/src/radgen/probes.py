"""Analysis probes: retrieval ranking, similarity/Gram heatmaps, attention
heatmap export, and the attention-localization scorer for the synthetic
corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .aligner import cosine_similarity_matrix
from .data import (
    SyntheticFindingSpec,
    parse_report_sentences,
    region_token_weights,
)
from .errors import BatchTooSmallError, ShapeError
from .model import Bundle
from .trainer import BatchBuilder
from .vocab import tokenize


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


@dataclass
class RetrievalResult:
    query_index: int
    ranked_indices: list[int]
    similarities: list[float]        # non-increasing
    rank_of_truth: int               # 1-based


def _rank_queries(sim: np.ndarray) -> list[RetrievalResult]:
    results = []
    for i in range(sim.shape[0]):
        order = np.argsort(-sim[i], kind="stable")
        rank = int(np.where(order == i)[0][0]) + 1
        results.append(
            RetrievalResult(
                query_index=i,
                ranked_indices=[int(j) for j in order],
                similarities=[float(sim[i, j]) for j in order],
                rank_of_truth=rank,
            )
        )
    return results


def retrieval_probe(image_feats: torch.Tensor, report_feats: torch.Tensor) -> dict:
    """Bidirectional retrieval over matched feature pairs.

    Image queries rank all reports by cosine similarity (and symmetrically
    for report queries); recall@{1,5,10} summarizes the ground-truth ranks.
    """
    if image_feats.shape[0] < 2:
        raise BatchTooSmallError("retrieval needs >= 2 pairs")
    sim = cosine_similarity_matrix(image_feats, report_feats).detach().cpu().numpy()
    i2r = _rank_queries(sim)
    r2i = _rank_queries(sim.T)

    def recalls(results):
        ranks = np.array([r.rank_of_truth for r in results])
        return {f"recall@{k}": float(np.mean(ranks <= k)) for k in (1, 5, 10)}

    return {
        "image_to_report": i2r,
        "report_to_image": r2i,
        "image_to_report_recalls": recalls(i2r),
        "report_to_image_recalls": recalls(r2i),
    }


def similarity_heatmap(features: torch.Tensor, path: str | Path | None = None) -> np.ndarray:
    """Symmetric pairwise cosine-similarity matrix, optionally rendered."""
    if features.shape[0] < 2:
        raise BatchTooSmallError("heatmap needs >= 2 samples")
    sim = cosine_similarity_matrix(features, features).detach().cpu().numpy()
    sim = (sim + sim.T) / 2.0
    if path is not None:
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(sim, vmin=-1.0, vmax=1.0, cmap="viridis")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("sample")
        ax.set_ylabel("sample")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
    return sim


def gram_export(
    matrix: np.ndarray | torch.Tensor,
    png_path: str | Path | None = None,
    csv_path: str | Path | None = None,
) -> np.ndarray:
    """Column Gram matrix M^T M, optionally written as heatmap + CSV."""
    m = matrix.detach().cpu().numpy() if isinstance(matrix, torch.Tensor) else np.asarray(matrix)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    gram = m.T @ m
    if csv_path is not None:
        np.savetxt(csv_path, gram, delimiter=",")
    if png_path is not None:
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(gram, cmap="viridis")
        fig.colorbar(im, ax=ax)
        fig.savefig(png_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
    return gram


def export_attention_heatmaps(
    attn: np.ndarray,
    word_indices: list[int],
    words: list[str],
    grid: tuple[int, int],
    image: np.ndarray,
    out_dir: str | Path,
    prefix: str = "attn",
) -> list[Path]:
    """Write one overlay PNG per selected word plus a JSON sidecar.

    ``attn`` is the head-averaged (T, L) cross-attention of a decoded report;
    row t is the attention used when emitting word t. L must equal gh * gw
    (single view) and each row is reshaped to the token grid and upsampled
    onto the image.
    """
    attn = np.asarray(attn)
    gh, gw = grid
    if attn.ndim != 2 or attn.shape[1] != gh * gw:
        raise ShapeError(f"attention shape {attn.shape} does not match grid {grid}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plt = _plt()
    paths = []
    sidecar = []
    for w in word_indices:
        if not 0 <= w < attn.shape[0]:
            raise IndexError(f"word index {w} outside [0, {attn.shape[0]})")
        row = attn[w]
        cells = row.reshape(gh, gw)
        scale = image.shape[0] // gh, image.shape[1] // gw
        overlay = np.kron(cells, np.ones(scale))
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0)
        ax.imshow(overlay, cmap="inferno", alpha=0.45)
        ax.set_title(words[w])
        ax.axis("off")
        path = out / f"{prefix}_{w:03d}_{words[w]}.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        paths.append(path)
        sidecar.append({"word_index": w, "word": words[w], "weights": row.tolist()})
    (out / f"{prefix}_weights.json").write_text(
        json.dumps(sidecar, indent=2), encoding="utf-8"
    )
    return paths


def attention_region_mass(
    attn_row: np.ndarray, cell: tuple[int, int], grid: tuple[int, int]
) -> float:
    """Share of one attention row's mass inside a finding's grid region.

    Token cells straddling the region boundary contribute proportionally to
    their overlap.
    """
    row = np.asarray(attn_row, dtype=np.float64)
    gh, gw = grid
    weights = region_token_weights(cell, grid)
    total = row.sum()
    if total <= 0:
        return 0.0
    return float((row.reshape(gh, gw) * weights).sum() / total)


def model_global_features(
    bundle: Bundle, builder: BatchBuilder, indices, batch_size: int = 32
):
    """Pooled unit-norm (image, report) features for a set of samples."""
    model = bundle.model
    was_training = model.training
    model.eval()
    img, rep = [], []
    with torch.no_grad():
        for lo in range(0, len(indices), batch_size):
            chunk = indices[lo : lo + batch_size]
            g_i, g_r = model.global_features(
                builder.visual(chunk, "infer"), builder.text(chunk)
            )
            img.append(g_i)
            rep.append(g_r)
    model.train(was_training)
    return torch.cat(img), torch.cat(rep)


@dataclass
class LocalizationStats:
    """Per-keyword region attention masses over a set of samples."""

    masses: list[float] = field(default_factory=list)
    missed_keywords: int = 0    # present findings whose sentence did not parse

    def fraction_localized(self, mass_threshold: float = 0.4) -> float:
        if not self.masses:
            return 0.0
        return float(np.mean(np.asarray(self.masses) >= mass_threshold))


def localization_stats(
    bundle: Bundle,
    builder: BatchBuilder,
    indices,
    specs: tuple[SyntheticFindingSpec, ...],
    grid: tuple[int, int],
    mask_enabled: bool = True,
) -> LocalizationStats:
    """Score text-to-image localization of present-finding keywords.

    For every present finding of every sample, the generated report is
    parsed back to the template grammar, the keyword (the first token where
    the present phrasing forks from the absent one) is located, and the
    head-averaged final-layer cross-attention row that emitted that keyword
    is scored by the share of its mass inside the finding's grid cell. A
    present finding whose sentence was generated with the wrong polarity (or
    that does not parse) counts as mass 0.
    """
    model = bundle.model
    corpus = builder.corpus
    stats = LocalizationStats()
    spec_by_name = {s.name: s for s in specs}
    model.eval()
    with torch.no_grad():
        for i in indices:
            truth_present = set(corpus.findings[i])
            if not truth_present:
                continue
            visual = builder.visual([i], "infer")
            gen = model.generate(visual, mask_enabled=mask_enabled)[0]
            words = bundle.vocabulary.decode(gen)
            sentences = parse_report_sentences(words, specs)
            by_finding = {s.finding: s for s in sentences} if sentences else {}
            # teacher-force the generated sequence to read its attention maps
            ids = torch.tensor([gen], dtype=torch.int64)
            out = model(visual, ids, mask_enabled=mask_enabled)
            attn = out.decoder.final_layer_attention()[0].cpu().numpy()  # (T-1, L)
            for name in sorted(truth_present):
                sent = by_finding.get(name)
                if sent is None or not sent.present:
                    stats.masses.append(0.0)
                    stats.missed_keywords += 1
                    continue
                offset, _ = spec_by_name[name].keyword_offset()
                word_pos = sent.start + offset       # position in decoded words
                # decoder row that emitted this word: word w sits at sequence
                # index w+1 (after BOS) and was predicted by row w
                stats.masses.append(
                    attention_region_mass(attn[word_pos], spec_by_name[name].cell, grid)
                )
    return stats
