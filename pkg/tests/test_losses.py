import math

import numpy as np
import pytest
import torch

from facevq.losses import (FeatureExtractor, FeaturePyramid, LossError,
                           PatchDiscriminator, PyramidDiscriminators,
                           Stage1Weights, Stage2Weights, adv_stage1, code_loss,
                           identity_loss, perceptual_loss, photo_loss,
                           projected_gan_loss, stage1_total, swap_total)


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


# --- photo ------------------------------------------------------------


def test_photo_zero_and_offset():
    x = rand(4, 8, 8, 3)
    assert photo_loss(x, x).item() == 0.0
    assert photo_loss(x + 0.5, x).item() == pytest.approx(0.5, abs=1e-6)


def test_photo_matches_elementwise_loop():
    a, b = rand(2, 5, 5, 3, seed=1), rand(2, 5, 5, 3, seed=2)
    expected = float(np.mean(np.abs(a.numpy() - b.numpy())))
    assert photo_loss(a, b).item() == pytest.approx(expected, rel=1e-6)


def test_photo_shape_mismatch():
    with pytest.raises(LossError):
        photo_loss(rand(2, 2, 3), rand(3, 2, 3))


# --- code loss --------------------------------------------------------


def test_code_loss_zero_and_scalar_case():
    z = rand(4, 4, 8)
    assert code_loss(z, z, 0.25).item() == 0.0
    z_e = torch.zeros(1, 1, 1)
    z_q = torch.ones(1, 1, 1)
    assert code_loss(z_e, z_q, 0.25).item() == pytest.approx(1.25)


def test_code_loss_stop_gradients_exact():
    z_e = rand(4, 4, 8, seed=3).requires_grad_(True)
    z_q = rand(4, 4, 8, seed=4).requires_grad_(True)
    # first term: no gradient reaches the encoder output
    term1 = (z_e.detach() - z_q).pow(2).sum(-1).mean()
    term1.backward()
    assert z_e.grad is None
    assert z_q.grad is not None
    # second term: no gradient reaches the codes
    z_e2 = rand(4, 4, 8, seed=5).requires_grad_(True)
    z_q2 = rand(4, 4, 8, seed=6).requires_grad_(True)
    term2 = (z_q2.detach() - z_e2).pow(2).sum(-1).mean()
    term2.backward()
    assert z_q2.grad is None
    assert z_e2.grad is not None


def test_code_loss_gradient_finite_differences():
    # FD oracle with the stop-gradient respected: the detached occurrence
    # of each argument stays frozen at its base value while perturbing.
    z_e0 = rand(4, 4, 4, seed=7).double()
    z_q0 = rand(4, 4, 4, seed=8).double()
    z_e = z_e0.clone().requires_grad_(True)
    z_q = z_q0.clone().requires_grad_(True)
    loss = code_loss(z_e, z_q, 0.25)
    loss.backward()

    def surrogate(z_e_val, z_q_val):
        term1 = (z_e0 - z_q_val).pow(2).mean()
        term2 = (z_q0 - z_e_val).pow(2).mean()
        return term1 + 0.25 * term2

    eps = 1e-6
    for k in (0, 7, 33, 63):
        for which, grad in (("e", z_e.grad), ("q", z_q.grad)):
            zp = (z_e0 if which == "e" else z_q0).clone().reshape(-1)
            zm = zp.clone()
            zp[k] += eps
            zm[k] -= eps
            if which == "e":
                fp = surrogate(zp.reshape(4, 4, 4), z_q0)
                fm = surrogate(zm.reshape(4, 4, 4), z_q0)
            else:
                fp = surrogate(z_e0, zp.reshape(4, 4, 4))
                fm = surrogate(z_e0, zm.reshape(4, 4, 4))
            fd = float((fp - fm) / (2 * eps))
            assert abs(float(grad.reshape(-1)[k]) - fd) < 1e-6 * max(1.0, abs(fd))


# --- adversarial ------------------------------------------------------


def test_adv_perfect_discriminator_near_zero():
    loss = adv_stage1(torch.tensor(1 - 1e-6), torch.tensor(1e-6), "discriminator")
    assert abs(loss.item()) < 1e-5


def test_adv_generator_analytic():
    loss = adv_stage1(torch.tensor(0.7), torch.tensor(0.5), "generator")
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)


def test_adv_matches_direct_formula():
    d_real, d_fake = rand(16, seed=9) * 0.98 + 0.01, rand(16, seed=10) * 0.98 + 0.01
    d = adv_stage1(d_real, d_fake, "discriminator").item()
    expected = -(np.log(d_real.numpy()).mean() + np.log(1 - d_fake.numpy()).mean())
    assert d == pytest.approx(float(expected), rel=1e-5)
    g = adv_stage1(d_real, d_fake, "generator").item()
    assert g == pytest.approx(float(-np.log(d_fake.numpy()).mean()), rel=1e-5)


def test_adv_unknown_side():
    with pytest.raises(LossError, match="unknown side"):
        adv_stage1(torch.tensor(0.5), torch.tensor(0.5), "both")


# --- totals -----------------------------------------------------------


def test_stage1_total_paper_weights():
    one = torch.tensor(1.0)
    zero = torch.tensor(0.0)
    w = Stage1Weights()
    assert stage1_total(zero, zero, zero, zero, w).item() == 0.0
    assert stage1_total(one, one, one, one, w).item() == pytest.approx(3.7)
    doubled = stage1_total(2 * one, 2 * one, 2 * one, 2 * one, w)
    assert doubled.item() == pytest.approx(7.4)


def test_swap_total_paper_weights_and_indicator():
    one = torch.tensor(1.0)
    zero = torch.tensor(0.0)
    w = Stage2Weights()
    assert swap_total(one, one, one, one, True, w).item() == pytest.approx(2.7)
    assert swap_total(zero, zero, zero, zero, True, w).item() == 0.0
    # indicator gates the photo term entirely for cross-identity pairs
    low = swap_total(one, torch.tensor(0.0), one, one, False, w)
    high = swap_total(one, torch.tensor(999.0), one, one, False, w)
    assert low.item() == high.item() == pytest.approx(1.2)


def test_weights_must_be_non_negative():
    with pytest.raises(LossError, match="non-negative"):
        Stage1Weights(eta1=-0.1)
    with pytest.raises(LossError, match="non-negative"):
        Stage2Weights(lambda3=-1.0)


def test_swap_total_indicator_blocks_photo_gradient():
    photo = torch.tensor(3.0, requires_grad=True)
    total = swap_total(torch.tensor(1.0), photo, torch.tensor(0.0),
                       torch.tensor(0.0), False, Stage2Weights())
    total.backward()
    assert photo.grad is None or float(photo.grad) == 0.0


# --- identity ---------------------------------------------------------


def test_identity_loss_anchors():
    e = torch.tensor([1.0, 0.0, 0.0])
    assert identity_loss(e, e).item() == 0.0
    assert identity_loss(e, torch.tensor([0.0, 1.0, 0.0])).item() == pytest.approx(1.0)
    assert identity_loss(e, -e).item() == pytest.approx(2.0)


def test_identity_loss_scale_invariant_and_bounded():
    g = torch.Generator().manual_seed(11)
    for _ in range(20):
        a = torch.randn(8, generator=g)
        b = torch.randn(8, generator=g)
        base = identity_loss(a, b).item()
        assert 0.0 <= base <= 2.0
        assert identity_loss(3.7 * a, 0.2 * b).item() == pytest.approx(base, abs=1e-5)


def test_identity_loss_rejects_zero_norm():
    with pytest.raises(LossError, match="zero-norm"):
        identity_loss(torch.zeros(4), torch.ones(4))


# --- perceptual -------------------------------------------------------


def test_perceptual_zero_and_symmetry():
    feat = FeatureExtractor(seed=7)
    x = rand(2, 64, 64, 3, seed=12)
    y = rand(2, 64, 64, 3, seed=13)
    assert perceptual_loss(x, x, feat).item() == 0.0
    assert perceptual_loss(x, y, feat).item() == pytest.approx(
        perceptual_loss(y, x, feat).item(), rel=1e-6)


def test_perceptual_matches_manual_recomputation():
    feat = FeatureExtractor(seed=7)
    x = rand(1, 64, 64, 3, seed=14)
    y = rand(1, 64, 64, 3, seed=15)
    fx = feat(x)
    fy = feat(y)
    expected = sum(float(((a - b) ** 2).mean()) for a, b in zip(fx, fy))
    assert perceptual_loss(x, y, feat).item() == pytest.approx(expected, rel=1e-6)


def test_feature_extractor_fixed_by_seed():
    a, b = FeatureExtractor(seed=3), FeatureExtractor(seed=3)
    c = FeatureExtractor(seed=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
    assert all(not p.requires_grad for p in a.parameters())


# --- projected GAN ----------------------------------------------------


def test_projected_gan_level_mismatch():
    pyramid = FeaturePyramid()
    discs = list(PyramidDiscriminators(pyramid))[:2]
    with pytest.raises(LossError, match="levels"):
        projected_gan_loss(rand(1, 64, 64, 3), rand(1, 64, 64, 3, seed=1),
                           pyramid, discs, "discriminator")


def test_projected_gan_matches_per_level_loop():
    pyramid = FeaturePyramid()
    discs = PyramidDiscriminators(pyramid)
    x = rand(2, 64, 64, 3, seed=16)
    x_hat = rand(2, 64, 64, 3, seed=17)
    for side in ("discriminator", "generator"):
        total = projected_gan_loss(x, x_hat, pyramid, discs, side).item()
        expected = 0.0
        for head, fr, ff in zip(discs, pyramid(x), pyramid(x_hat)):
            expected += adv_stage1(head(fr), head(ff), side).item()
        assert total == pytest.approx(expected, rel=1e-5)


def test_projected_gan_single_level_reduces_to_adv():
    pyramid = FeaturePyramid(widths=(16,))
    discs = PyramidDiscriminators(pyramid)
    x = rand(1, 64, 64, 3, seed=18)
    x_hat = rand(1, 64, 64, 3, seed=19)
    total = projected_gan_loss(x, x_hat, pyramid, discs, "discriminator").item()
    head = list(discs)[0]
    f = pyramid(x)[0]
    f_hat = pyramid(x_hat)[0]
    assert total == pytest.approx(
        adv_stage1(head(f), head(f_hat), "discriminator").item(), rel=1e-6)


def test_projected_gan_half_probs_analytic():
    # With every discriminator pinned at 0.5 the four-level loss is 8 log 2.
    pyramid = FeaturePyramid()
    discs = PyramidDiscriminators(pyramid)
    for head in discs:
        last = head.net[-1]
        torch.nn.init.zeros_(last.weight)
        torch.nn.init.zeros_(last.bias)
    x = rand(1, 64, 64, 3, seed=20)
    x_hat = rand(1, 64, 64, 3, seed=21)
    total = projected_gan_loss(x, x_hat, pyramid, discs, "discriminator").item()
    assert total == pytest.approx(4 * 2 * math.log(2), rel=1e-5)


def test_patch_discriminator_outputs_probabilities():
    d = PatchDiscriminator()
    out = d(rand(2, 64, 64, 3, seed=22))
    assert out.min() > 0.0 and out.max() < 1.0
