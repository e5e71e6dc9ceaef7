import math

import numpy as np
import pytest
import torch
from numpy.lib.stride_tricks import sliding_window_view

from unmark import losses as L
from unmark.errors import ConfigError, ShapeError
from unmark.losses import LossWeights
from unmark.networks import PipelineOutputs, SplitOutputs
from unmark.procedural import make_host

from fdcheck import directional_check, full_check

TOL = 1e-3


def t64(a):
    return torch.as_tensor(np.asarray(a, np.float64))


# -- hand values ----------------------------------------------------------------


def test_relative_l1_half_case():
    pred = t64([[[[0.5, 0.9], [0.2, 0.7]]]])
    gt = t64([[[[0.0, 0.4], [0.9, 0.1]]]])
    m = t64([[[[1, 1], [0, 0]]]])
    assert abs(float(L.relative_l1(pred, gt, m)) - 0.5) <= 1e-6


def test_relative_l1_zero_when_equal_and_support_invariance(rng):
    x = t64(rng.random((1, 1, 4, 4)))
    m = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    assert float(L.relative_l1(x, x, m)) == 0.0
    pred = x + 0.2
    small = torch.zeros_like(m)
    small[..., :1, :2] = 1
    assert abs(float(L.relative_l1(pred, x, m)) - float(L.relative_l1(pred, x, small))) <= 1e-12


def test_relative_l1_channel_broadcast_counts_channels():
    pred = torch.full((1, 3, 2, 2), 0.1, dtype=torch.float64)
    gt = torch.zeros_like(pred)
    m = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    assert abs(float(L.relative_l1(pred, gt, m)) - 0.3) <= 1e-12


def test_relative_l1_empty_mask_is_zero():
    pred, gt = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
    assert float(L.relative_l1(pred, gt, torch.zeros(1, 1, 4, 4))) == 0.0


def test_relative_l1_ignores_unmasked_error(rng):
    gt = t64(rng.random((2, 3, 5, 5)))
    pred = t64(rng.random((2, 3, 5, 5)))
    m = t64(rng.random((2, 1, 5, 5)) > 0.5)
    noisy = pred + (1 - m) * t64(rng.normal(size=(2, 3, 5, 5)))
    assert float(L.relative_l1(pred, gt, m)) == pytest.approx(float(L.relative_l1(noisy, gt, m)), abs=1e-12)


def test_relative_l1_pred_cases():
    one = lambda v: torch.full((1, 1, 1, 1), v, dtype=torch.float64)
    assert abs(float(L.relative_l1_pred(one(1.0), one(0.8), one(0.5), one(1.0))) - 0.3) <= 1e-6
    assert float(L.relative_l1_pred(one(0.3), one(0.3), one(1.0), one(1.0))) == 0.0
    # empty ground-truth mask: guard returns 0 even though the prediction mask is not empty
    assert float(L.relative_l1_pred(one(1.0), one(0.0), one(0.9), one(0.0))) == 0.0


def test_bce_closed_forms():
    gt = t64(np.random.default_rng(0).random((1, 1, 4, 4)) > 0.5)
    half = torch.full_like(gt, 0.5)
    assert abs(float(L.mask_bce(half, gt)) - math.log(2)) <= 1e-6
    assert abs(float(L.mask_bce(half, 1 - gt)) - math.log(2)) <= 1e-6
    ones = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    assert abs(float(L.mask_bce(torch.full_like(ones, 0.9), ones)) - (-math.log(0.9))) <= 1e-6
    perfect = float(L.mask_bce(ones, ones))
    assert 0 < perfect < 2e-7


def test_watermark_loss_fixture():
    pred = t64([[[[0.5, 0.5], [0.3, 0.0]]]])
    gt = t64([[[[0.0, 0.0], [0.1, 0.0]]]])
    m_gt = t64([[[[1, 1], [0, 0]]]])
    m_pred = t64([[[[1.0, 0.5], [0.2, 0.0]]]])
    # relative part (0.5 + 0.5) / 2; prediction part (0.5 + 0.25 + 0.06) / 2
    assert abs(float(L.watermark_loss(pred, gt, m_pred, m_gt)) - (0.5 + 0.405)) <= 1e-6
    assert float(L.watermark_loss(gt, gt, m_gt, m_gt)) == 0.0
    total = L.watermark_loss(pred, gt, m_pred, m_gt)
    parts = L.relative_l1(pred, gt, m_gt) + L.relative_l1_pred(pred, gt, m_pred, m_gt)
    assert float(total) == float(parts)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        L.relative_l1(torch.rand(1, 3, 2, 2), torch.rand(1, 3, 2, 3), torch.ones(1, 1, 2, 2))
    with pytest.raises(ShapeError):
        L.ssim(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8))


# -- SSIM -----------------------------------------------------------------------


def ssim_oracle(x, y, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window SSIM in numpy for B x C x H x W float64 arrays."""
    c = np.arange(win) - win // 2
    g = np.exp(-c ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    w = np.outer(g, g)
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for b in range(x.shape[0]):
        for ch in range(x.shape[1]):
            px = sliding_window_view(x[b, ch], (win, win))
            py = sliding_window_view(y[b, ch], (win, win))
            mx = (px * w).sum((-1, -2))
            my = (py * w).sum((-1, -2))
            vx = (px ** 2 * w).sum((-1, -2)) - mx ** 2
            vy = (py ** 2 * w).sum((-1, -2)) - my ** 2
            cxy = (px * py * w).sum((-1, -2)) - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_direct_evaluation(rng):
    x = rng.random((2, 3, 20, 17))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert abs(float(L.ssim(t64(x), t64(y))) - ssim_oracle(x, y)) <= 1e-10


def test_ssim_identity_and_inversion():
    x = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    x[..., ::2, :] = 1.0
    assert abs(float(L.ssim(x, x)) - 1.0) <= 1e-12
    assert float(L.ssim_loss(x, x)) == pytest.approx(0.0, abs=1e-12)
    assert float(L.ssim(x, 1 - x)) < 1.0


def test_ssim_loss_gradient(rng):
    gt = t64(rng.random((1, 1, 16, 16)))
    x = t64(rng.random((1, 1, 16, 16)))
    assert full_check(lambda t: L.ssim_loss(t, gt), x) <= TOL


# -- finite differences for the remaining losses -----------------------------------


def test_pixel_loss_gradients(rng):
    gt = t64(rng.random((1, 3, 4, 4)))
    m = t64(rng.random((1, 1, 4, 4)) > 0.4)
    mp = t64(rng.uniform(0.1, 0.9, (1, 1, 4, 4)))
    x = t64(rng.random((1, 3, 4, 4)))
    assert full_check(lambda t: L.relative_l1(t, gt, m), x) <= TOL
    assert full_check(lambda t: L.relative_l1_pred(t, gt, mp, m), x) <= TOL
    assert full_check(lambda t: L.relative_l1_pred(x, gt, t, m), mp) <= TOL
    assert full_check(lambda t: L.mask_bce(t, m), mp) <= TOL
    assert full_check(lambda t: L.watermark_loss(t, gt, mp, m), x) <= TOL


def test_perceptual_gradient(vgg_weights, rng):
    ext = L.PerceptualExtractor(vgg_weights).double()
    gt = t64(rng.random((1, 3, 16, 16)))
    x = t64(rng.random((1, 3, 16, 16)))
    assert directional_check(lambda t: L.perceptual_loss(t, gt, ext), x, n_dirs=6) <= TOL


def test_stage_and_total_gradients(vgg_weights, rng):
    ext = L.PerceptualExtractor(vgg_weights).double()
    w = LossWeights()
    gt = t64(rng.random((1, 3, 16, 16)))
    m = t64(rng.random((1, 1, 16, 16)) > 0.5)
    mp = t64(rng.uniform(0.1, 0.9, (1, 1, 16, 16)))
    bg = t64(rng.random((1, 3, 16, 16)))
    x = t64(rng.random((1, 3, 16, 16)))
    assert directional_check(lambda t: L.stage_loss(t, gt, bg, mp, m, w, ext), x, n_dirs=4) <= TOL
    assert directional_check(lambda t: L.stage_loss(x, gt, t, mp, m, w, ext), bg, n_dirs=4) <= TOL

    def total_of(t):
        outs = SplitOutputs(t, mp, t * 0.5)
        return L.total_loss(PipelineOutputs(outs, t, x, t * 0.9), gt, gt, m, w, ext)[0]

    assert directional_check(total_of, bg, n_dirs=4) <= TOL


# -- perceptual -------------------------------------------------------------------


def natural_image(size=32):
    return torch.from_numpy(make_host(np.random.default_rng(5), size).transpose(2, 0, 1).copy())[None]


def test_perceptual_basic(vgg_weights):
    ext = L.PerceptualExtractor(vgg_weights)
    img = natural_image()
    assert float(L.perceptual_loss(img, img, ext)) == 0.0
    shifted = float(L.perceptual_loss(img + 0.1, img, ext))
    assert shifted > 0
    noisy = float(L.perceptual_loss(torch.rand_like(img), img, ext))
    assert noisy >= 0
    assert all(not p.requires_grad for p in ext.parameters())
    ext.train()
    assert not ext.training


def test_perceptual_matches_reference_vgg_layout(vgg_weights):
    tv = pytest.importorskip("torchvision")
    ref = tv.models.vgg16(weights=None)
    ref.load_state_dict(torch.load(vgg_weights), strict=False)
    ext = L.PerceptualExtractor(vgg_weights)
    img = natural_image()
    x = (img - torch.tensor(L.IMAGENET_MEAN).view(1, 3, 1, 1)) / torch.tensor(L.IMAGENET_STD).view(1, 3, 1, 1)
    taps = []
    with torch.no_grad():
        for i, layer in enumerate(ref.features[:16]):
            x = layer(x)
            if i in (3, 8, 15):
                taps.append(x)
        ours = ext(img)
    for a, b in zip(ours, taps):
        torch.testing.assert_close(a, b)


def test_perceptual_missing_weights(tmp_path):
    with pytest.raises(ConfigError):
        L.PerceptualExtractor("")
    with pytest.raises(ConfigError):
        L.PerceptualExtractor(tmp_path / "nope.pth")
    bad = tmp_path / "bad.pth"
    torch.save({"features.0.weight": torch.zeros(1)}, bad)
    with pytest.raises(ConfigError):
        L.PerceptualExtractor(bad)
    with pytest.raises(ConfigError):
        L.stage_terms(*(torch.rand(1, 3, 16, 16),) * 3, torch.rand(1, 1, 16, 16), torch.ones(1, 1, 16, 16),
                      LossWeights(), None)


# -- assembly -----------------------------------------------------------------------


def random_stage(rng, size=16):
    gt = t64(rng.random((2, 3, size, size)))
    return dict(
        image_x=t64(rng.random((2, 3, size, size))), gt=gt, stage_bg=t64(rng.random((2, 3, size, size))),
        mask_pred=t64(rng.uniform(0, 1, (2, 1, size, size))), mask_gt=t64(rng.random((2, 1, size, size)) > 0.6),
    )


def test_stage_loss_equals_hand_assembly(vgg_weights, rng):
    ext = L.PerceptualExtractor(vgg_weights).double()
    s = random_stage(rng)
    x, gt, bg, mp, m = s["image_x"], s["gt"], s["stage_bg"], s["mask_pred"], s["mask_gt"]
    with torch.no_grad():
        vgg = sum(float((a - b).abs().mean()) for a, b in zip(ext(x), ext(gt)))
    rel_gt = float((m * (bg - gt)).abs().sum() / m.sum())
    rel_pred = float((mp * bg - m * gt).abs().sum() / m.sum())
    l1 = float((x - gt).abs().mean())
    ssim_term = 1 - ssim_oracle(x.numpy(), gt.numpy())
    expected = 0.025 * vgg + rel_gt + 0.15 * ssim_term + l1 + rel_pred
    got = float(L.stage_loss(**s, weights=LossWeights(0.025, 0.15), extractor=ext))
    assert abs(got - expected) <= 1e-6
    assert LossWeights() == LossWeights(0.025, 0.15)


def test_stage_loss_weight_linearity(vgg_weights, rng):
    ext = L.PerceptualExtractor(vgg_weights).double()
    s = random_stage(rng)
    terms = L.stage_terms(**s, weights=LossWeights(), extractor=ext)
    f = lambda a, b: float(L.stage_loss(**s, weights=LossWeights(a, b), extractor=ext))
    d = 0.5
    assert (f(0.025 + d, 0.15) - f(0.025, 0.15)) / d == pytest.approx(float(terms["vgg"]), abs=1e-9)
    assert (f(0.025, 0.15 + d) - f(0.025, 0.15)) / d == pytest.approx(float(terms["ssim"]), abs=1e-9)
    three = float(terms["rel_gt"] + terms["rel_pred"] + terms["l1"])
    assert float(L.stage_loss(**s, weights=LossWeights(0.0, 0.0))) == pytest.approx(three, abs=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(ConfigError):
        LossWeights(-0.1, 0.15)


def perfect_outputs(gt, wm, m):
    outs = SplitOutputs(gt.clone(), m.clone(), wm.clone())
    return PipelineOutputs(outs, gt.clone(), gt.clone(), gt.clone())


def test_total_loss_perfect_and_sum(vgg_weights, rng):
    ext = L.PerceptualExtractor(vgg_weights).double()
    gt = t64(rng.random((1, 3, 16, 16)))
    wm = t64(rng.random((1, 3, 16, 16)))
    m = t64(rng.random((1, 1, 16, 16)) > 0.5)
    total, parts = L.total_loss(perfect_outputs(gt, wm, m), gt, wm * m, m, LossWeights(), ext)
    assert 0 <= float(total) < 1e-6
    noisy = perfect_outputs(gt, wm, m)
    noisy = PipelineOutputs(SplitOutputs(noisy.outputs.bg * 0.9, torch.full_like(m, 0.7), noisy.outputs.wm),
                            noisy.coarse * 0.8, noisy.refined, noisy.final + 0.05)
    total, parts = L.total_loss(noisy, gt, wm, m, LossWeights(), ext)
    assert float(total) == pytest.approx(float(parts["coarse"] + parts["refine"] + parts["wm"] + parts["mask"]),
                                         abs=1e-12)
    for k in ("coarse.rel_gt", "refine.ssim", "coarse.vgg"):
        assert k in parts
    assert all(float(v) >= 0 for v in parts.values())


def test_bce_logits_matches_probability_form(rng):
    z = torch.tensor(rng.uniform(-8, 8, (2, 1, 5, 5)))
    m = torch.tensor(rng.random((2, 1, 5, 5)) > 0.5, dtype=torch.float64)
    assert abs(float(L.mask_bce_logits(z, m)) - float(L.mask_bce(torch.sigmoid(z), m))) < 1e-9


def test_bce_logits_keeps_gradient_when_saturated():
    # a confidently wrong pixel: logit 30, target 0, among 4 pixels
    z = torch.tensor([[[[30.0, -5.0], [2.0, 0.0]]]], dtype=torch.float64, requires_grad=True)
    m = torch.tensor([[[[0.0, 0.0], [1.0, 1.0]]]], dtype=torch.float64)
    (g,) = torch.autograd.grad(L.mask_bce_logits(z, m), z)
    expected = (torch.sigmoid(z.detach()) - m) / 4
    assert torch.allclose(g, expected, atol=1e-12)
    assert g[0, 0, 0, 0] > 0.24
    # the clamped probability form has no gradient there
    zp = z.detach().clone().requires_grad_(True)
    (gp,) = torch.autograd.grad(L.mask_bce(torch.sigmoid(zp), m), zp)
    assert gp[0, 0, 0, 0] == 0


def test_bce_logits_gradient(rng):
    m = torch.tensor(rng.random((1, 1, 4, 4)) > 0.5, dtype=torch.float64)
    assert full_check(lambda t: L.mask_bce_logits(t, m), torch.tensor(rng.normal(0, 3, (1, 1, 4, 4)))) < 1e-6


def test_total_loss_prefers_logits(vgg_weights, rng):
    ext = L.PerceptualExtractor(vgg_weights).double()
    d = torch.float64
    gt = torch.tensor(rng.random((1, 3, 16, 16)), dtype=d)
    m = torch.tensor(rng.random((1, 1, 16, 16)) > 0.7, dtype=d)
    z = torch.tensor(rng.normal(0, 3, (1, 1, 16, 16)), dtype=d)
    p = torch.sigmoid(z)
    plain = PipelineOutputs(SplitOutputs(gt * 0.9, p, gt), gt * 0.8, gt * 0.7, gt * 0.95)
    with_logits = plain._replace(outputs=plain.outputs._replace(mask_logits=z))
    a, pa = L.total_loss(plain, gt, gt, m, LossWeights(), ext)
    b, pb = L.total_loss(with_logits, gt, gt, m, LossWeights(), ext)
    assert abs(float(a - b)) < 1e-9 and abs(float(pb["mask"] - L.mask_bce_logits(z, m))) < 1e-12
    # far in the saturated region only the logit form still sees the error
    far = plain._replace(outputs=plain.outputs._replace(mask=torch.sigmoid(z * 20), mask_logits=z * 20))
    _, pf = L.total_loss(far, gt, gt, m, LossWeights(), ext)
    assert float(pf["mask"]) > float(L.mask_bce(torch.sigmoid(z * 20), m))
