import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from qsynth.losses import (
    LOSS_CSV_HEADER,
    FeatureExtractor,
    LossWeights,
    NonFiniteLossError,
    ac_loss,
    adv_loss_d,
    adv_loss_g,
    rec_loss,
    rec_target,
    self_similarity_map,
    total_loss,
)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def adv_d_oracle(real, fake):
    """Both branches, pixel map averaged before the log-loss."""
    total = 0.0
    for r, f in ((real[0], fake[0]), (real[1].mean(axis=(1, 2)), fake[1].mean(axis=(1, 2)))):
        total -= np.mean(log_sigmoid(r)) + np.mean(log_sigmoid(-f))
    return total


def rand_out(rng, b=3, h=4, w=4):
    return (torch.tensor(rng.standard_normal(b) * 2), torch.tensor(rng.standard_normal((b, h, w)) * 2))


def test_adv_losses_at_zero_logits():
    zero = (torch.zeros(2, dtype=torch.float64), torch.zeros(2, 4, 4, dtype=torch.float64))
    # each branch contributes 2 log 2 to D and log 2 to G
    assert float(adv_loss_d(zero, zero)) == pytest.approx(4 * math.log(2), abs=1e-12)
    assert float(adv_loss_g(zero)) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_adv_loss_d_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        real, fake = rand_out(rng), rand_out(rng)
        ref = adv_d_oracle([t.numpy() for t in real], [t.numpy() for t in fake])
        assert float(adv_loss_d(real, fake)) == pytest.approx(ref, rel=1e-12)


def test_adv_loss_g_non_saturating():
    rng = np.random.default_rng(1)
    fake = rand_out(rng)
    ref = -(np.mean(log_sigmoid(fake[0].numpy())) + np.mean(log_sigmoid(fake[1].numpy().mean(axis=(1, 2)))))
    assert float(adv_loss_g(fake)) == pytest.approx(ref, rel=1e-12)
    # confident-fake logits still give a large, non-vanishing gradient
    logits = torch.full((2,), -20.0, dtype=torch.float64, requires_grad=True)
    adv_loss_g((logits, torch.zeros(2, 4, 4, dtype=torch.float64))).backward()
    assert torch.all(logits.grad.abs() > 0.4)


def test_adv_loss_per_pixel_variant():
    rng = np.random.default_rng(2)
    real, fake = rand_out(rng), rand_out(rng)
    per_pixel = -(np.mean(log_sigmoid(real[1].numpy())) + np.mean(log_sigmoid(-fake[1].numpy())))
    glob = -(np.mean(log_sigmoid(real[0].numpy())) + np.mean(log_sigmoid(-fake[0].numpy())))
    assert float(adv_loss_d(real, fake, pixel_mean=False)) == pytest.approx(per_pixel + glob, rel=1e-12)


def test_adv_loss_rejects_non_finite_logits():
    good = (torch.zeros(2), torch.zeros(2, 4, 4))
    bad_map = torch.zeros(2, 4, 4)
    bad_map[1, 2, 2] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        adv_loss_d(good, (torch.zeros(2), bad_map))
    assert "batch index 1" in str(info.value)
    with pytest.raises(NonFiniteLossError):
        adv_loss_g((torch.tensor([0.0, float("inf")]), torch.zeros(2, 4, 4)))


def test_rec_loss_is_mean_absolute_error():
    a = torch.tensor([[[[0.1, 0.5], [0.9, 0.0]]]])
    b = torch.tensor([[[[0.3, 0.5], [0.4, 0.2]]]])
    # (0.2 + 0 + 0.5 + 0.2) / 4
    assert float(rec_loss(a, b)) == pytest.approx(0.225, abs=1e-7)
    assert float(rec_loss(a, a)) == 0.0
    with pytest.raises(ValueError):
        rec_loss(a, b[..., :1])


def test_rec_target_uses_b0_for_zero_b():
    ref = torch.full((2, 1, 2, 2), 0.3)
    b0 = torch.full((1, 1, 2, 2), 0.9)
    q = torch.tensor([[0, 0, 0, 0.0], [1, 0, 0, 0.5]])
    t = rec_target(ref, b0, q)
    assert torch.all(t[0] == 0.9) and torch.all(t[1] == 0.3)


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor()


def test_extractor_frozen_and_deterministic(extractor):
    assert all(not p.requires_grad for p in extractor.parameters())
    other = FeatureExtractor()
    for a, b in zip(extractor.parameters(), other.parameters()):
        assert torch.equal(a, b)
    assert all(m.bias is None for m in extractor.net if isinstance(m, torch.nn.Conv2d))
    assert extractor(torch.rand(1, 1, 64, 64)).shape == (1, 64, 8, 8)


def _similarity_oracle(feat: np.ndarray, patch: int) -> np.ndarray:
    C, H, W = feat.shape
    f = feat / np.maximum(np.linalg.norm(feat, axis=0, keepdims=True), 1e-12)
    out = np.empty((H * W, patch * patch))
    for i in range(H):
        r0 = min(max(i - patch // 2, 0), H - patch)
        for j in range(W):
            c0 = min(max(j - patch // 2, 0), W - patch)
            win = f[:, r0:r0 + patch, c0:c0 + patch].reshape(C, -1)
            out[i * W + j] = f[:, i, j] @ win
    return out


def test_self_similarity_matches_oracle():
    ext = FeatureExtractor(strides=(1, 2, 1)).double()
    x = torch.rand(2, 1, 24, 24, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    sim = self_similarity_map(x, ext, patch=8)
    feats = ext(x).numpy()
    for b in range(2):
        np.testing.assert_allclose(sim[b].numpy(), _similarity_oracle(feats[b], 8), atol=1e-12)


def test_self_similarity_includes_self(extractor):
    x = torch.rand(1, 1, 64, 64, generator=torch.Generator().manual_seed(1)) + 0.1
    sim = self_similarity_map(x, extractor)
    assert sim.shape == (1, 64, 64)
    assert torch.allclose(sim.max(dim=2).values, torch.ones(64), atol=1e-5)


def test_ac_loss_properties(extractor):
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 1, 64, 64, generator=g)
    y = torch.rand(2, 1, 64, 64, generator=g)
    assert float(ac_loss(x, x, extractor)) == 0.0
    assert float(ac_loss(x, y, extractor)) > 0.0
    # bias-free ReLU features make cosine maps blind to a positive intensity scale
    assert float(ac_loss(3.0 * x, x, extractor)) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        ac_loss(x, y[..., :32], extractor)
    with pytest.raises(ValueError):
        ac_loss(torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16), extractor)


def test_gradcheck_losses():
    rng = np.random.default_rng(3)

    def out(t):
        return (t[:, 0, 0], t[:, 1:].reshape(t.shape[0], 4, 4))

    real = torch.tensor(rng.standard_normal((2, 17, 1)), requires_grad=True)
    fake = torch.tensor(rng.standard_normal((2, 17, 1)), requires_grad=True)
    for pm in (True, False):
        assert gradcheck(lambda r, f: adv_loss_d(out(r[..., 0, None]), out(f[..., 0, None]), pm),
                         (real, fake), eps=1e-6, atol=1e-8, rtol=1e-3)
        assert gradcheck(lambda f: adv_loss_g(out(f[..., 0, None]), pm), (fake,),
                         eps=1e-6, atol=1e-8, rtol=1e-3)
    x = torch.tensor(rng.uniform(0, 1, (2, 1, 8, 8)), requires_grad=True)
    y = torch.tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    assert gradcheck(lambda a: rec_loss(a, y), (x,), eps=1e-6, atol=1e-8, rtol=1e-3)
    # stride-1 extractor keeps an 8x8 feature map on 8x8 inputs
    ext = FeatureExtractor(strides=(1, 1, 1)).double()
    assert gradcheck(lambda a: ac_loss(a, y, ext), (x,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_total_loss_weights_and_finiteness():
    w = LossWeights(lambda_rec=100, lambda_ac=10)
    assert float(total_loss(torch.tensor(0.5), torch.tensor(0.01), torch.tensor(0.02), w)) == pytest.approx(1.7)
    with pytest.raises(NonFiniteLossError) as info:
        total_loss(torch.tensor(0.5), torch.tensor(float("nan")), torch.tensor(0.0), w)
    assert info.value.term == "loss_rec"


@pytest.mark.parametrize("kw", [{"lambda_rec": -1}, {"lambda_ac": float("nan")}])
def test_loss_weights_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_csv_header():
    assert LOSS_CSV_HEADER.split(",") == [
        "step", "loss_total", "loss_adv_g", "loss_adv_d", "loss_rec", "loss_ac", "lr_g", "lr_d",
    ]
