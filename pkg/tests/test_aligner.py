import math

import numpy as np
import pytest
import torch

from radgen.aligner import (
    CrossModalAligner,
    alignment_score,
    basis_attention,
    dual_gate_fuse,
    gate,
    pool_global,
    scale_basis,
    triplet_contrastive_loss,
)
from radgen.errors import BatchTooSmallError, ShapeError, ZeroNormError
from radgen.gradcheck import finite_difference_check


# ---------------------------------------------------------------- scale_basis

def test_scale_basis_identity():
    b = torch.randn(16, 4)
    out = scale_basis(b, torch.ones_like(b), torch.zeros_like(b))
    assert torch.equal(out, b)


def test_scale_basis_zero_gain_gives_bias():
    b = torch.randn(8, 3)
    out = scale_basis(b, torch.zeros_like(b), torch.full_like(b, 0.7))
    assert torch.all(out == 0.7)


def test_scale_basis_scalar_arithmetic():
    b = torch.tensor([[0.5]])
    out = scale_basis(b, torch.tensor([[2.0]]), torch.tensor([[0.1]]))
    assert out.item() == pytest.approx(1.1)


def test_scale_basis_shape_error():
    with pytest.raises(ShapeError):
        scale_basis(torch.randn(8, 3), torch.randn(8, 2), torch.randn(8, 3))


# ----------------------------------------------------------------------- gate

def test_gate_zero_inputs_give_half():
    x = torch.zeros(3, 4)
    w = torch.randn(4, 4)
    assert torch.all(gate(x, x, w, w) == 0.5)


def test_gate_scalar_log3():
    x = torch.tensor([[1.0]])
    y = torch.tensor([[0.0]])
    w1 = torch.tensor([[math.log(3.0)]])
    w2 = torch.tensor([[5.0]])
    assert gate(x, y, w1, w2).item() == pytest.approx(0.75)


def test_gate_monotone_and_in_open_interval():
    w = torch.eye(1, dtype=torch.float64)
    values = [
        gate(torch.tensor([[float(v)]], dtype=torch.float64),
             torch.zeros(1, 1, dtype=torch.float64), w, w).item()
        for v in (-30, -1, 0, 1, 30)
    ]
    assert all(0.0 < v < 1.0 for v in values)
    assert values == sorted(values)


# ------------------------------------------------------------ basis attention

def test_zero_query_projection_gives_uniform_attention():
    torch.manual_seed(1)
    d, heads, rows = 8, 2, 10
    e = torch.randn(3, d)
    b_hat = torch.randn(rows, d)
    wq = torch.zeros(d, d)
    wk = torch.randn(d, d)
    wv = torch.randn(d, d)
    wo = torch.eye(d)
    out, weights = basis_attention(e, b_hat, wq, wk, wv, wo, heads, return_weights=True)
    assert torch.allclose(weights, torch.full_like(weights, 1.0 / rows), atol=1e-6)
    expected = (b_hat @ wv).mean(dim=0)
    assert torch.allclose(out, expected.expand(3, d), atol=1e-5)


def test_two_key_hand_computation():
    # single head, one scalar query, two basis rows
    e = torch.tensor([[2.0]])
    b_hat = torch.tensor([[1.0], [-1.0]])
    one = torch.tensor([[1.0]])
    wv = torch.tensor([[3.0]])
    out, weights = basis_attention(e, b_hat, one, one, wv, one, heads=1,
                                   return_weights=True)
    # logits = [2, -2]; softmax = e^2/(e^2+e^-2), e^-2/(e^2+e^-2)
    p = math.exp(2.0) / (math.exp(2.0) + math.exp(-2.0))
    assert weights[0, 0, 0].item() == pytest.approx(p, abs=1e-7)
    assert out.item() == pytest.approx(3.0 * p - 3.0 * (1 - p), abs=1e-6)


def test_attention_rows_sum_to_one():
    torch.manual_seed(2)
    d = 12
    e = torch.randn(2, 5, d)
    b_hat = torch.randn(30, d)
    ws = [torch.randn(d, d) * 0.3 for _ in range(4)]
    _, weights = basis_attention(e, b_hat, *ws, heads=3, return_weights=True)
    sums = weights.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_fast_path_matches_weighted_path():
    torch.manual_seed(3)
    d = 16
    e = torch.randn(4, 7, d)
    b_hat = torch.randn(50, d)
    ws = [torch.randn(d, d) * 0.2 for _ in range(4)]
    fast = basis_attention(e, b_hat, *ws, heads=4)
    slow, _ = basis_attention(e, b_hat, *ws, heads=4, return_weights=True)
    assert torch.allclose(fast, slow, atol=1e-5)


def test_basis_attention_shape_checks():
    e = torch.randn(3, 8)
    with pytest.raises(ShapeError):
        basis_attention(e, torch.randn(10, 4), *(torch.randn(8, 8),) * 4, heads=2)
    with pytest.raises(ShapeError):
        basis_attention(e, torch.randn(10, 8), *(torch.randn(8, 4),) * 4, heads=2)


# ------------------------------------------------------------- dual-gate fuse

def test_dual_gate_zero_everything():
    z = torch.zeros(2, 3)
    w = torch.zeros(3, 3)
    out = dual_gate_fuse(z, z, w, w, w, w)
    assert torch.all(out == 0.0)


def test_dual_gate_scalar_hand_value():
    one = torch.tensor([[1.0]])
    w = torch.zeros(1, 1)
    out = dual_gate_fuse(one, one, w, w, w, w)
    expected = 0.5 * math.tanh(2.0) + 0.5 * 1.0 + 1.0
    assert out.item() == pytest.approx(expected, abs=1e-6)
    assert out.item() == pytest.approx(1.9820137900379085, abs=1e-6)


def test_dual_gate_zero_embeddings_reduce():
    f = torch.randn(4, 3)
    z = torch.zeros_like(f)
    w = torch.zeros(3, 3)
    out = dual_gate_fuse(z, f, w, w, w, w)
    assert torch.allclose(out, 0.5 * torch.tanh(f) + f, atol=1e-6)


# ----------------------------------------------------------------- pool_global

def test_pool_identical_rows():
    v = torch.tensor([3.0, 4.0])
    f = v.expand(5, 2)
    out = pool_global(f)
    assert torch.allclose(out, v / 5.0, atol=1e-6)   # ||(3,4)|| = 5


def test_pool_cancellation_raises():
    v = torch.tensor([[1.0, 2.0], [-1.0, -2.0]])
    with pytest.raises(ZeroNormError):
        pool_global(v)


def test_pool_two_rows_hand_value():
    f = torch.tensor([[3.0, 0.0], [1.0, 2.0]])
    out = pool_global(f)
    expected = torch.tensor([2.0, 1.0]) / math.sqrt(5.0)
    assert torch.allclose(out, expected, atol=1e-6)


def test_pool_respects_mask():
    f = torch.tensor([[[1.0, 0.0], [9.0, 9.0]]])
    mask = torch.tensor([[True, False]])
    out = pool_global(f, mask=mask)
    assert torch.allclose(out[0], torch.tensor([1.0, 0.0]), atol=1e-6)


def test_pool_unit_norm():
    torch.manual_seed(4)
    out = pool_global(torch.randn(6, 9))
    assert out.norm().item() == pytest.approx(1.0, abs=1e-6)


# ------------------------------------------------------------- triplet loss

def _unit(v):
    return v / v.norm(dim=-1, keepdim=True)


def test_triplet_identical_features():
    g = _unit(torch.ones(4, 6, dtype=torch.float64))
    loss = triplet_contrastive_loss(g, g.clone(), margin=0.2)
    assert loss.item() == pytest.approx(0.4, abs=1e-9)


def test_triplet_separated_pairs_zero_loss():
    u = torch.tensor([1.0, 0.0])
    feats_i = torch.stack([u, -u])
    feats_r = torch.stack([u, -u])
    loss = triplet_contrastive_loss(feats_i, feats_r, margin=0.5)
    assert loss.item() == 0.0


def _triplet_oracle(image_feats, report_feats, margin):
    """Exhaustive in-batch hard-negative search with explicit loops."""
    sim = image_feats @ report_feats.T
    b = sim.shape[0]
    terms = []
    for i in range(b):
        hardest_report = max(sim[i, j] for j in range(b) if j != i)
        hardest_image = max(sim[j, i] for j in range(b) if j != i)
        t1 = torch.relu(margin - sim[i, i] + hardest_report)
        t2 = torch.relu(margin - sim[i, i] + hardest_image)
        terms.append(t1 + t2)
    return torch.stack(terms).sum() / b


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_triplet_matches_exhaustive_oracle(dtype):
    for trial in range(100):
        g = torch.Generator().manual_seed(trial)
        b = int(torch.randint(2, 9, (1,), generator=g))
        img = _unit(torch.randn(b, 8, generator=g).to(dtype))
        rep = _unit(torch.randn(b, 8, generator=g).to(dtype))
        loss = triplet_contrastive_loss(img, rep, margin=0.2)
        oracle = _triplet_oracle(img, rep, 0.2)
        assert torch.equal(loss, oracle), f"trial {trial}"


def test_triplet_bounds():
    for trial in range(20):
        g = torch.Generator().manual_seed(1000 + trial)
        img = _unit(torch.randn(6, 5, generator=g))
        rep = _unit(torch.randn(6, 5, generator=g))
        loss = triplet_contrastive_loss(img, rep, margin=0.2).item()
        assert 0.0 <= loss <= 2 * (0.2 + 2.0)


def test_triplet_batch_too_small():
    g = _unit(torch.ones(1, 4))
    with pytest.raises(BatchTooSmallError):
        triplet_contrastive_loss(g, g)


def test_triplet_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(5)
    img = torch.randn(5, 6, generator=g, dtype=torch.float64)
    rep = torch.randn(5, 6, generator=g, dtype=torch.float64)
    img.requires_grad_(True)
    rep.requires_grad_(True)

    def loss_fn():
        return triplet_contrastive_loss(_unit(img), _unit(rep), margin=0.2)

    err = finite_difference_check(loss_fn, [img, rep], eps=1e-6, num_coords=60, seed=1)
    assert err <= 1e-4


# --------------------------------------------------------------- alignment score

def _pairs_with_similarities(sims):
    img, rep = [], []
    for s in sims:
        img.append(torch.tensor([1.0, 0.0]))
        rep.append(torch.tensor([s, math.sqrt(max(0.0, 1 - s * s))]))
    return torch.stack(img), torch.stack(rep)


def test_alignment_score_footnote_example():
    img, rep = _pairs_with_similarities([0.9, 0.5, 0.1])
    assert alignment_score(img, rep) == pytest.approx(1.0 / 3.0)


def test_alignment_score_degenerate_equal():
    img, rep = _pairs_with_similarities([0.4, 0.4, 0.4])
    assert alignment_score(img, rep) == 0.0


def test_alignment_score_two_extremes():
    img, rep = _pairs_with_similarities([1.0, -1.0])
    assert alignment_score(img, rep) == pytest.approx(0.5)


def test_alignment_score_requires_pairs():
    img, rep = _pairs_with_similarities([0.5])
    with pytest.raises(BatchTooSmallError):
        alignment_score(img, rep)


def test_minmax_normalization_preserves_order():
    sims = [0.83, -0.2, 0.55, 0.1, 0.99]
    img, rep = _pairs_with_similarities(sims)
    from radgen.aligner import paired_cosine_similarities

    raw = paired_cosine_similarities(img, rep)
    lo, hi = raw.min(), raw.max()
    normalized = (raw - lo) / (hi - lo)
    assert list(np.argsort(raw)) == list(np.argsort(normalized))


# ----------------------------------------------------------------- full module

def test_module_is_modality_agnostic():
    torch.manual_seed(6)
    aligner = CrossModalAligner(width=8, heads=2, basis_rows=32, basis_seed=1)
    x = torch.randn(3, 5, 8)
    assert torch.equal(aligner(x), aligner(x.clone()))


def test_module_basis_is_orthonormal_and_frozen():
    aligner = CrossModalAligner(width=8, heads=2, basis_rows=64, basis_seed=2)
    basis = aligner.basis.to(torch.float64)
    gram = basis.T @ basis
    assert torch.max(torch.abs(gram - torch.eye(8, dtype=torch.float64))) < 1e-5
    before = aligner.basis.numpy().tobytes()

    opt = torch.optim.AdamW(aligner.parameters(), lr=1e-2)
    out = aligner(torch.randn(2, 4, 8)).sum()
    opt.zero_grad()
    out.backward()
    opt.step()
    assert aligner.basis.numpy().tobytes() == before
    assert not torch.all(aligner.gain == 1.0)   # gain trained


def test_module_identity_scaling_at_init():
    aligner = CrossModalAligner(width=8, heads=2, basis_rows=32, basis_seed=3)
    assert torch.equal(aligner.scaled_basis(), aligner.basis)


def test_full_module_gradients_match_finite_differences():
    torch.manual_seed(7)
    aligner = CrossModalAligner(width=8, heads=2, basis_rows=24, basis_seed=4).double()
    e_img = torch.randn(3, 4, 8, dtype=torch.float64)
    e_txt = torch.randn(3, 3, 8, dtype=torch.float64)

    def loss_fn():
        f_img = pool_global(aligner(e_img))
        f_txt = pool_global(aligner(e_txt))
        return triplet_contrastive_loss(f_img, f_txt, margin=0.2)

    err = finite_difference_check(
        loss_fn, list(aligner.parameters()), eps=1e-5, num_coords=120, seed=2
    )
    assert err <= 1e-4
