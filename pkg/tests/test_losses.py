import math

import pytest
import torch
import torch.nn.functional as F

from conftest import SmoothExtractor, make_batch, make_pair
from dualsearch.contrastive import build_extractor
from dualsearch.errors import ExtractorUnavailable, ImageTooSmall, NoEvaluableCandidates, NotColorImage, ShapeMismatch
from dualsearch.losses import (LOSS_CANDIDATES, LossCandidate, LossFamily, LossParams, LossReference, aggregate,
                               candidate_values, color_loss, combine, grad_loss, masked_weights, mef_ssim_loss,
                               perceptual_loss, pixel_loss, psnr_loss, sobel_magnitude, ssim_loss, tv_loss)


def _const(value, channels=3, size=16):
    return torch.full((1, channels, size, size), float(value), dtype=torch.float64)


def _noise(seed, shape=(1, 3, 32, 32)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_candidate_catalogue():
    assert len(LOSS_CANDIDATES) == 17
    names = [candidate.name for candidate in LOSS_CANDIDATES]
    assert len(set(names)) == 17
    assert sum(candidate.requires_reference for candidate in LOSS_CANDIDATES) == 6
    assert LossCandidate.from_name("SSIM:I_u") == LossCandidate(LossFamily.SSIM, LossReference.I_u)
    with pytest.raises(ValueError):
        LossCandidate(LossFamily.PSNR, LossReference.I_o)


def test_pixel_loss():
    x = _noise(0)
    assert float(pixel_loss(x, x)) == 0.0
    assert float(pixel_loss(_const(0.5), _const(0.25), norm=1)) == pytest.approx(0.25)
    assert float(pixel_loss(_const(0.5), _const(0.25), norm=2)) == pytest.approx(0.0625)
    with pytest.raises(ShapeMismatch):
        pixel_loss(_const(0.5), _const(0.5, size=8))


def test_ssim_loss():
    x = _noise(1)
    assert float(ssim_loss(x, x)) == pytest.approx(0.0, abs=1e-10)
    c1 = 0.01 ** 2
    expected = 1 - (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
    assert float(ssim_loss(_const(0.6), _const(0.5))) == pytest.approx(expected, abs=1e-6)
    assert float(ssim_loss(_noise(2, (1, 3, 64, 64)), _noise(3, (1, 3, 64, 64)))) > 0.9
    with pytest.raises(ImageTooSmall):
        ssim_loss(_const(0.5, size=8), _const(0.5, size=8))


def test_mef_ssim_loss():
    pair = make_pair(0, 24)
    same = pair.under.pixels
    assert float(mef_ssim_loss(same, (same, same))) == pytest.approx(0.0, abs=1e-3)
    under, over = _noise(4, (1, 1, 24, 24)), _noise(5, (1, 1, 24, 24))
    assert float(mef_ssim_loss(_const(0.5, channels=1, size=24), (under, over))) > 0.95


def test_sobel_magnitude_of_step_edge():
    step = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    step[..., 4:] = 1.0
    magnitude = sobel_magnitude(step)
    assert torch.allclose(magnitude[0, 0, :, 3:5], torch.full((8, 2), 4.0, dtype=torch.float64))
    assert float(magnitude[0, 0, :, :3].max()) < 1e-5
    assert float(magnitude[0, 0, :, 5:].max()) < 1e-5


def test_grad_loss():
    assert float(grad_loss(_const(0.3), (_const(0.2), _const(0.9)))) == pytest.approx(0.0, abs=1e-12)
    over = _noise(6, (1, 3, 16, 16))
    assert float(grad_loss(over, (0.5 * over, over))) == pytest.approx(0.0, abs=1e-12)

    under = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    under[..., 4:] = 1.0
    # Two of eight columns carry a target magnitude of 4, the rest are flat.
    value = grad_loss(_const(0.5, channels=1, size=8), (under, 0.5 * under))
    assert float(value) == pytest.approx(1.0, abs=1e-5)


def test_perceptual_loss_matches_layer_by_layer_oracle():
    extractor = build_extractor().double()
    assert len(extractor(_const(0.5, size=8))) == 4
    f, r = _noise(7, (1, 3, 8, 8)), _noise(8, (1, 3, 8, 8))
    assert float(perceptual_loss(f, f, extractor)) == 0.0

    def features(x):
        outputs = []
        x = x - 0.5
        for index, stage in enumerate(extractor.stages):
            if index == 2:
                x = F.avg_pool2d(x, 2)
            conv = stage[-2]
            x = F.relu(F.conv2d(x, conv.weight, conv.bias, padding=1))
            outputs.append(x)
        return outputs

    expected = sum(float(((a - b) ** 2).mean()) for a, b in zip(features(f), features(r)))
    assert float(perceptual_loss(f, r, extractor)) == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ExtractorUnavailable):
        perceptual_loss(f, r, None)


def test_psnr_loss():
    x = _noise(9)
    assert float(psnr_loss(x, x)) == pytest.approx(-100.0)
    assert float(psnr_loss(_const(0.6), _const(0.5))) == pytest.approx(-20.0)
    assert float(psnr_loss(_const(1.0), _const(0.0))) == pytest.approx(0.0)


def test_color_loss():
    x = _noise(10) + 0.1
    assert float(color_loss(x, x)) == pytest.approx(0.0, abs=1e-6)
    red = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64).reshape(1, 3, 1, 1)
    green = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64).reshape(1, 3, 1, 1)
    assert float(color_loss(red, green)) == pytest.approx(math.pi / 2)
    assert float(color_loss(2 * x, x)) == pytest.approx(0.0, abs=1e-6)
    # Black pixels are skipped.
    assert float(color_loss(torch.zeros_like(red), green)) == 0.0
    with pytest.raises(NotColorImage):
        color_loss(_const(0.5, channels=1), _const(0.5, channels=1))


def test_tv_loss():
    assert float(tv_loss(_const(0.7))) == 0.0
    ramp = torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]])
    assert float(tv_loss(ramp)) == pytest.approx(0.5)
    assert float(tv_loss(ramp.transpose(-1, -2))) == pytest.approx(0.5)
    with pytest.raises(ImageTooSmall):
        tv_loss(torch.zeros(1, 1, 1, 4))


@pytest.mark.parametrize("candidate", LOSS_CANDIDATES, ids=lambda c: c.name)
def test_candidate_gradients_match_finite_differences(candidate):
    batch = make_batch([1], size=12, dtype=torch.float64)
    extractor = SmoothExtractor()
    f0 = 0.1 + 0.8 * torch.rand(1, 3, 12, 12, generator=torch.Generator().manual_seed(11), dtype=torch.float64)

    def value(f):
        values, _ = candidate_values([candidate], batch, f, extractor)
        return values[:, 0]

    assert torch.autograd.gradcheck(value, (f0.requires_grad_(True),), eps=1e-6, atol=1e-5, rtol=1e-3)


def test_reference_candidates_are_masked_per_sample():
    batch = make_batch([0, 1], size=16, references=[True, False], dtype=torch.float64)
    f = 0.5 * (batch.under + batch.over)
    values, mask = candidate_values(LOSS_CANDIDATES, batch, f, build_extractor().double())
    assert values.shape == mask.shape == (2, 17)
    assert bool(mask[0].all())
    assert int(mask[1].sum()) == 11
    assert bool((values[1][~mask[1]] == 0).all())

    weights = masked_weights(torch.zeros(17, dtype=torch.float64), mask)
    assert torch.allclose(weights.sum(dim=1), torch.ones(2, dtype=torch.float64))
    assert torch.allclose(weights[1][mask[1]], torch.full((11,), 1 / 11, dtype=torch.float64))
    assert bool((weights[1][~mask[1]] == 0).all())


def test_no_evaluable_candidates():
    params = LossParams([LossCandidate.from_name("PSNR:I_r")])
    batch = make_batch([0], references=[False])
    with pytest.raises(NoEvaluableCandidates):
        combine(params, batch, batch.over)


def test_combine_with_dominant_tv_weight():
    batch = make_batch([2], size=16, dtype=torch.float64)
    f = 0.3 * batch.under + 0.7 * batch.over
    beta = [20.0 if candidate.name == "TV:none" else 0.0 for candidate in LOSS_CANDIDATES]
    params = LossParams(beta=beta).double()
    value = combine(params, batch, f, build_extractor().double())
    assert float(value) == pytest.approx(float(tv_loss(f)), abs=1e-6)


def test_combine_with_uniform_weights_is_candidate_mean():
    batch = make_batch([3], size=16, dtype=torch.float64)
    extractor = build_extractor().double()
    f = 0.5 * (batch.under + batch.over)
    u, o, r = batch.under, batch.over, batch.reference
    singles = [
        pixel_loss(f, o), pixel_loss(f, u), pixel_loss(f, r),
        pixel_loss(f, o, 2), pixel_loss(f, u, 2), pixel_loss(f, r, 2),
        ssim_loss(f, o), ssim_loss(f, u), ssim_loss(f, r),
        mef_ssim_loss(f, (u, o)),
        grad_loss(f, (u, o)),
        perceptual_loss(f, o, extractor), perceptual_loss(f, u, extractor), perceptual_loss(f, r, extractor),
        psnr_loss(f, r), color_loss(f, r), tv_loss(f),
    ]
    expected = sum(float(v) for v in singles) / 17
    value = combine(LossParams().double(), batch, f, extractor)
    assert float(value) == pytest.approx(expected, rel=1e-9)


def test_combine_gradient_flows_to_beta_unless_detached():
    batch = make_batch([4], size=16)
    params = LossParams([LossCandidate.from_name("L1:I_o"), LossCandidate.from_name("TV:none")])
    f = batch.under.clone()
    combine(params, batch, f).backward()
    assert params.beta.grad is not None and float(params.beta.grad.abs().sum()) > 0
    params.beta.grad = None
    loss = combine(params, batch, f.requires_grad_(True), detach_weights=True)
    loss.backward()
    assert params.beta.grad is None
    assert f.grad is not None


def test_loss_params_report_and_round_trip():
    params = LossParams(beta=[0.0] * 16 + [math.log(2.0)])
    report = params.report()
    assert list(report) == [candidate.name for candidate in LOSS_CANDIDATES]
    assert sum(report.values()) == pytest.approx(1.0)
    assert report["TV:none"] == pytest.approx(2 / 18)
    restored = LossParams.from_dict(params.to_dict())
    assert torch.equal(restored.beta, params.beta)
    with pytest.raises(ShapeMismatch):
        LossParams(beta=[0.0] * 3)


def test_aggregate_averages_rows():
    weights = torch.tensor([[0.5, 0.5], [1.0, 0.0]])
    values = torch.tensor([[2.0, 4.0], [1.0, 100.0]])
    assert float(aggregate(weights, values)) == pytest.approx(2.0)
