import numpy as np
import pytest
import torch

from facevq import BANK_ORDER
from facevq.config import ArchConfig
from facevq.fusion import (CodebookBank, FusionError, FusionNet, fuse,
                           multi_quantize, predict_weights, weight_summary)
from facevq.vqcore import Codebook, quantize

ARCH = ArchConfig()


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


def test_bank_order_and_shared_init():
    shared = Codebook(32, 16, "shared")
    bank = CodebookBank.from_shared(shared)
    assert len(bank) == 5
    assert [bank[k].domain for k in range(5)] == list(BANK_ORDER)
    for k in range(5):
        assert torch.equal(bank[k].codes, shared.codes)
    assert bank.dim == 16


def test_multi_quantize_matches_per_book_oracle():
    bank = CodebookBank(16, 8)
    z = rand(4, 4, 8, seed=1) * 2 - 1
    outs = multi_quantize(z, bank)
    assert len(outs) == 5
    for k, out in enumerate(outs):
        codes = bank[k].codes.detach().numpy()
        flat = z.reshape(-1, 8).numpy()
        expected = np.empty_like(flat)
        for i, cell in enumerate(flat):
            d = ((codes - cell[None]) ** 2).sum(1)
            expected[i] = codes[int(np.flatnonzero(d == d.min())[0])]
        assert np.array_equal(out.detach().reshape(-1, 8).numpy(), expected)


def test_multi_quantize_identical_books_agree():
    shared = Codebook(16, 8)
    bank = CodebookBank.from_shared(shared)
    z = rand(4, 4, 8, seed=2)
    outs = multi_quantize(z, bank)
    single, _ = quantize(z, shared)
    for out in outs:
        assert torch.equal(out, single)


def test_predict_weights_simplex_and_deterministic():
    net = FusionNet(ARCH, seed=0).eval()
    z = rand(8, 8, 64, seed=3)
    w1 = predict_weights(z, net)
    w2 = predict_weights(z, net)
    assert w1.shape == (8, 8, 5)
    assert torch.equal(w1, w2)
    assert (w1 >= 0).all()
    assert torch.allclose(w1.sum(-1), torch.ones(8, 8), atol=1e-5)


def test_predict_weights_peaked_logits():
    # Pin the head to constant logits (10, -10, -10, -10, -10): the first
    # book should take essentially all the weight at every cell.
    net = FusionNet(ARCH, seed=0).eval()
    head = net.head[-1]
    torch.nn.init.zeros_(head.weight)
    with torch.no_grad():
        head.bias.copy_(torch.tensor([10.0, -10.0, -10.0, -10.0, -10.0]))
    w = predict_weights(rand(8, 8, 64, seed=4), net)
    assert (w[..., 0] > 0.999).all()


def test_predict_weights_shape_check():
    net = FusionNet(ARCH, seed=0)
    with pytest.raises(FusionError, match="expected 8x8"):
        predict_weights(rand(4, 4, 64), net)


def test_fuse_one_hot_selects_book():
    bank = CodebookBank(16, 8)
    z = rand(4, 4, 8, seed=5)
    outs = multi_quantize(z, bank)
    for m in range(5):
        w = torch.zeros(4, 4, 5)
        w[..., m] = 1.0
        assert torch.equal(fuse(outs, w), outs[m])


def test_fuse_uniform_is_average():
    grids = [rand(3, 3, 4, seed=s) for s in range(2)]
    w = torch.full((3, 3, 2), 0.5)
    expected = (grids[0] + grids[1]) / 2
    assert torch.allclose(fuse(grids, w), expected, atol=1e-7)


def test_fuse_matches_per_cell_loop():
    grids = [rand(4, 4, 6, seed=10 + k) for k in range(5)]
    logits = rand(4, 4, 5, seed=20)
    w = torch.softmax(logits * 3, dim=-1)
    out = fuse(grids, w).numpy()
    for i in range(4):
        for j in range(4):
            expected = sum(w[i, j, k].item() * grids[k][i, j].numpy() for k in range(5))
            assert np.allclose(out[i, j], expected, atol=1e-6)


def test_fuse_linear_in_weights():
    grids = [rand(4, 4, 6, seed=30 + k) for k in range(3)]
    w1 = torch.softmax(rand(4, 4, 3, seed=40), dim=-1)
    w2 = torch.softmax(rand(4, 4, 3, seed=41), dim=-1)
    alpha = 0.3
    mixed = fuse(grids, alpha * w1 + (1 - alpha) * w2)
    expected = alpha * fuse(grids, w1) + (1 - alpha) * fuse(grids, w2)
    assert torch.allclose(mixed, expected, atol=1e-6)


def test_fused_cells_in_convex_hull():
    grids = [rand(4, 4, 6, seed=50 + k) for k in range(5)]
    w = torch.softmax(rand(4, 4, 5, seed=60) * 2, dim=-1)
    out = fuse(grids, w)
    stacked = torch.stack(grids, dim=-1)
    lo = stacked.min(dim=-1).values
    hi = stacked.max(dim=-1).values
    assert (out >= lo - 1e-6).all()
    assert (out <= hi + 1e-6).all()


def test_fuse_shape_errors():
    grids = [rand(4, 4, 6, seed=70 + k) for k in range(3)]
    with pytest.raises(FusionError, match="weight channels"):
        fuse(grids, torch.ones(4, 4, 5) / 5)
    with pytest.raises(FusionError, match="does not match"):
        fuse(grids, torch.ones(2, 2, 3) / 3)
    bad = grids[:2] + [rand(2, 2, 6)]
    with pytest.raises(FusionError, match="disagree"):
        fuse(bad, torch.ones(4, 4, 3) / 3)


def test_single_book_degenerate_path():
    # one-book fusion with weight 1 reproduces plain quantization bit-exactly
    book = Codebook(16, 8)
    z = rand(5, 5, 8, seed=80)
    q, _ = quantize(z, book)
    fusedl = fuse([q], torch.ones(5, 5, 1))
    assert torch.equal(fusedl, q)


def test_weight_summary_cases():
    one_hot = torch.zeros(4, 4, 5)
    one_hot[..., 2] = 1.0
    s = weight_summary(one_hot)
    assert np.allclose(s, [0, 0, 1, 0, 0])

    uniform = torch.full((4, 4, 5), 0.2)
    assert np.allclose(weight_summary(uniform), [0.2] * 5)

    random_w = torch.softmax(rand(6, 6, 5, seed=90), dim=-1)
    assert weight_summary(random_w).sum() == pytest.approx(1.0, abs=1e-5)
