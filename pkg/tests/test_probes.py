import json
import math

import numpy as np
import pytest
import torch

from radgen.basis import random_orthonormal_basis
from radgen.errors import BatchTooSmallError, ShapeError
from radgen.probes import (
    attention_region_mass,
    export_attention_heatmaps,
    gram_export,
    retrieval_probe,
    similarity_heatmap,
)


def _unit_rows(mat):
    t = torch.as_tensor(mat, dtype=torch.float32)
    return t / t.norm(dim=-1, keepdim=True)


# -------------------------------------------------------------------- retrieval

def test_exact_match_ranks_first():
    img = _unit_rows([[1.0, 0.0], [0.0, 1.0]])
    out = retrieval_probe(img, img.clone())
    assert [r.rank_of_truth for r in out["image_to_report"]] == [1, 1]
    assert out["image_to_report"][0].similarities[0] == pytest.approx(1.0)
    assert out["image_to_report_recalls"]["recall@1"] == 1.0


def test_orthogonal_truth_ranks_below_identical_distractor():
    img = _unit_rows([[1.0, 0.0], [0.0, 1.0]])
    # truth of query 0 is orthogonal to it; the other report equals the query
    rep = _unit_rows([[0.0, 1.0], [1.0, 0.0]])
    out = retrieval_probe(img, rep)
    assert out["image_to_report"][0].rank_of_truth > 1


def test_retrieval_matches_exhaustive_sort_oracle():
    g = torch.Generator().manual_seed(12)
    img = _unit_rows(torch.randn(20, 6, generator=g))
    rep = _unit_rows(torch.randn(20, 6, generator=g))
    out = retrieval_probe(img, rep)
    sims = (img @ rep.T).numpy()
    for i, res in enumerate(out["image_to_report"]):
        order = sorted(range(20), key=lambda j: -sims[i, j])
        assert res.ranked_indices == order
        assert res.rank_of_truth == order.index(i) + 1
        assert res.similarities == sorted(res.similarities, reverse=True)


def test_retrieval_needs_two_pairs():
    single = _unit_rows([[1.0, 0.0]])
    with pytest.raises(BatchTooSmallError):
        retrieval_probe(single, single)


# --------------------------------------------------------------------- heatmaps

def test_similarity_identical_features(tmp_path):
    feats = _unit_rows([[0.6, 0.8], [0.6, 0.8]])
    sim = similarity_heatmap(feats, path=tmp_path / "sim.png")
    assert np.allclose(sim, 1.0, atol=1e-6)
    assert (tmp_path / "sim.png").exists()


def test_similarity_orthogonal_and_symmetric():
    feats = _unit_rows([[1.0, 0.0], [0.0, 1.0]])
    sim = similarity_heatmap(feats)
    assert sim[0, 1] == pytest.approx(0.0, abs=1e-6)
    g = torch.Generator().manual_seed(3)
    feats = _unit_rows(torch.randn(5, 4, generator=g))
    sim = similarity_heatmap(feats)
    assert np.allclose(sim, sim.T)
    assert np.allclose(np.diag(sim), 1.0, atol=1e-6)


def test_similarity_needs_two_samples():
    with pytest.raises(BatchTooSmallError):
        similarity_heatmap(_unit_rows([[1.0, 0.0]]))


# ------------------------------------------------------------------ gram export

def test_gram_of_orthonormal_basis_is_identity(tmp_path):
    basis = random_orthonormal_basis(16, rows=256, seed=4)
    gram = gram_export(basis, png_path=tmp_path / "g.png", csv_path=tmp_path / "g.csv")
    assert np.max(np.abs(gram - np.eye(16))) <= 1e-6
    assert (tmp_path / "g.png").exists()
    loaded = np.loadtxt(tmp_path / "g.csv", delimiter=",")
    assert np.allclose(loaded, gram)


def test_gram_equal_columns():
    m = np.ones((5, 3))
    gram = gram_export(m)
    assert np.all(gram == 5.0)


def test_gram_matches_direct_multiplication():
    rng = np.random.default_rng(9)
    m = rng.standard_normal((7, 4))
    assert np.allclose(gram_export(m), m.T @ m)


def test_gram_rejects_empty():
    with pytest.raises(ShapeError):
        gram_export(np.zeros((0, 3)))


# ---------------------------------------------------------- attention heatmaps

def _image(size=32):
    return np.zeros((size, size), dtype=np.float32)


def test_uniform_attention_row_gives_flat_overlay(tmp_path):
    attn = np.full((3, 16), 1.0 / 16.0)
    paths = export_attention_heatmaps(
        attn, [1], ["a", "b", "c"], grid=(4, 4), image=_image(),
        out_dir=tmp_path, prefix="t",
    )
    assert paths[0].exists()
    sidecar = json.loads((tmp_path / "t_weights.json").read_text())
    weights = np.array(sidecar[0]["weights"]).reshape(4, 4)
    assert np.allclose(weights, weights[0, 0])


def test_one_hot_attention_hotspot(tmp_path):
    attn = np.zeros((2, 16))
    attn[0, 9] = 1.0   # grid cell (2, 1)
    export_attention_heatmaps(
        attn, [0], ["word", "x"], grid=(4, 4), image=_image(),
        out_dir=tmp_path, prefix="t",
    )
    sidecar = json.loads((tmp_path / "t_weights.json").read_text())
    weights = np.array(sidecar[0]["weights"]).reshape(4, 4)
    assert weights[2, 1] == 1.0
    assert weights.sum() == 1.0


def test_exported_rows_conserve_mass(tmp_path):
    g = torch.Generator().manual_seed(5)
    attn = torch.softmax(torch.randn(4, 16, generator=g), dim=-1).numpy()
    export_attention_heatmaps(
        attn, [0, 1, 2, 3], ["a", "b", "c", "d"], grid=(4, 4),
        image=_image(), out_dir=tmp_path, prefix="m",
    )
    sidecar = json.loads((tmp_path / "m_weights.json").read_text())
    for entry in sidecar:
        assert sum(entry["weights"]) == pytest.approx(1.0, abs=1e-6)


def test_invalid_word_index(tmp_path):
    attn = np.full((2, 16), 1.0 / 16.0)
    with pytest.raises(IndexError):
        export_attention_heatmaps(
            attn, [5], ["a", "b"], grid=(4, 4), image=_image(), out_dir=tmp_path
        )


def test_grid_shape_mismatch(tmp_path):
    with pytest.raises(ShapeError):
        export_attention_heatmaps(
            np.zeros((2, 15)), [0], ["a", "b"], grid=(4, 4),
            image=_image(), out_dir=tmp_path,
        )


# ------------------------------------------------------------- region masses

def test_uniform_row_mass_equals_area_fraction():
    row = np.full(64, 1.0 / 64.0)   # 8x8 token grid
    mass = attention_region_mass(row, cell=(0, 0), grid=(8, 8))
    assert mass == pytest.approx(1.0 / 16.0)


def test_one_hot_inside_and_outside_region():
    row = np.zeros(64)
    row[0] = 1.0   # token (0,0) lies fully inside cell (0,0) on an 8x8 grid
    assert attention_region_mass(row, (0, 0), (8, 8)) == pytest.approx(1.0)
    assert attention_region_mass(row, (3, 3), (8, 8)) == 0.0


def test_partial_overlap_weighting():
    # on a 2x2 token grid each token covers four grid cells equally
    row = np.array([1.0, 0.0, 0.0, 0.0])
    assert attention_region_mass(row, (0, 0), (2, 2)) == pytest.approx(0.25)
