"""Training objectives: adversarial, b-aware reconstruction, anatomical self-similarity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PATCH_SIZE = 8
LOSS_CSV_HEADER = "step,loss_total,loss_adv_g,loss_adv_d,loss_rec,loss_ac,lr_g,lr_d"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, detail: str = ""):
        self.term = term
        self.detail = detail
        super().__init__(f"non-finite value in {term}{': ' + detail if detail else ''}")


@dataclass
class LossWeights:
    lambda_rec: float = 100.0
    lambda_ac: float = 100.0

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_ac"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def _check_logits(*tensors: torch.Tensor) -> None:
    for t in tensors:
        bad = ~torch.isfinite(t.detach())
        if bad.any():
            idx = int(bad.reshape(t.shape[0], -1).any(dim=1).nonzero()[0, 0])
            raise NonFiniteLossError("discriminator logits", f"batch index {idx}")


def _branch_logits(out, pixel_mean: bool) -> list[torch.Tensor]:
    score, pmap = out
    if pixel_mean:
        return [score, pmap.mean(dim=(1, 2))]
    return [score, pmap.reshape(pmap.shape[0], -1)]


def adv_loss_d(real_out, fake_out, pixel_mean: bool = True) -> torch.Tensor:
    """Discriminator log-loss summed over the global and pixel branches.

    Each branch is ``-mean[log s(real) + log(1 - s(fake))]`` with s the logistic
    function. With ``pixel_mean`` the pixel map is averaged before the log-loss,
    otherwise the per-pixel losses are averaged.
    """
    _check_logits(*real_out, *fake_out)
    total = 0.0
    for r, f in zip(_branch_logits(real_out, pixel_mean), _branch_logits(fake_out, pixel_mean)):
        total = total - (F.logsigmoid(r).mean() + F.logsigmoid(-f).mean())
    return total


def adv_loss_g(fake_out, pixel_mean: bool = True) -> torch.Tensor:
    """Non-saturating generator loss ``-log s(fake)`` summed over both branches."""
    _check_logits(*fake_out)
    return sum(-F.logsigmoid(f).mean() for f in _branch_logits(fake_out, pixel_mean))


def rec_loss(x_bn: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error.

    The caller picks the target: the reference DWI when b > 0, the input b0
    slice when b = 0 (:func:`rec_target`).
    """
    if x_bn.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(x_bn.shape)} vs {tuple(target.shape)}")
    return (x_bn - target).abs().mean()


def rec_target(reference: torch.Tensor, b0: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Per-sample target: ``b0`` where ``b_norm == 0``, else ``reference``. Shapes (B, 1, H, W)."""
    is_b0 = (q[:, 3] == 0)[:, None, None, None]
    return torch.where(is_b0, b0.expand_as(reference), reference)


class FeatureExtractor(nn.Module):
    """Frozen bias-free conv stack (1 -> 16 -> 32 -> 64), ReLU after each layer.

    Bias-free convolutions with ReLU are positively homogeneous, so the
    cosine self-similarity maps ignore a global positive intensity scale.
    Replicate padding keeps constant images constant.
    """

    def __init__(self, channels=(16, 32, 64), strides=(2, 2, 2), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 1
        for cout, s in zip(channels, strides):
            conv = nn.Conv2d(cin, cout, 3, stride=s, padding=1, bias=False,
                             padding_mode="replicate")
            bound = 1.0 / math.sqrt(cin * 9)
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
            layers += [conv, nn.ReLU()]
            cin = cout
        self.net = nn.Sequential(*layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.net(x)


def _window_index(size: int, patch: int, device) -> torch.Tensor:
    """(size, patch) index of the patch-long window around each position, shifted inside."""
    start = (torch.arange(size, device=device) - patch // 2).clamp(0, size - patch)
    return start[:, None] + torch.arange(patch, device=device)[None, :]


def self_similarity_map(x: torch.Tensor, extractor: nn.Module, patch: int = PATCH_SIZE) -> torch.Tensor:
    """Cosine similarity of each feature location against its ``patch x patch`` window.

    Windows near the border are shifted inward so every query sees exactly
    ``patch**2`` real locations (the query itself included). Returns
    (B, H'*W', patch*patch).
    """
    if x.shape[-2] < patch or x.shape[-1] < patch:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than patch {patch}")
    f = F.normalize(extractor(x), dim=1, eps=1e-12)
    B, C, H, W = f.shape
    if H < patch or W < patch:
        raise ValueError(f"feature map {H}x{W} smaller than patch {patch}")
    rows = _window_index(H, patch, f.device)  # (H, p)
    cols = _window_index(W, patch, f.device)  # (W, p)
    # neighbours[b, c, i, j, u, v] = f[b, c, rows[i, u], cols[j, v]]
    nb = f[:, :, rows[:, None, :, None], cols[None, :, None, :]]
    sim = (nb * f[:, :, :, :, None, None]).sum(dim=1)
    return sim.reshape(B, H * W, patch * patch)


def ac_loss(x_bn: torch.Tensor, x_ref: torch.Tensor, extractor: nn.Module,
            patch: int = PATCH_SIZE) -> torch.Tensor:
    """Mean absolute difference of the two self-similarity maps."""
    if x_bn.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {tuple(x_bn.shape)} vs {tuple(x_ref.shape)}")
    a = self_similarity_map(x_bn, extractor, patch)
    b = self_similarity_map(x_ref, extractor, patch)
    return (a - b).abs().mean()


def total_loss(adv, rec, ac, weights: LossWeights):
    """``adv + lambda_rec * rec + lambda_ac * ac``; raises on a non-finite part."""
    for name, v in (("loss_adv_g", adv), ("loss_rec", rec), ("loss_ac", ac)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFiniteLossError(name)
    return adv + weights.lambda_rec * rec + weights.lambda_ac * ac
