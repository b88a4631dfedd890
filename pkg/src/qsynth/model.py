"""Generator and conditional discriminator networks.

Tensors follow the NCHW layout. Q-space conditions are passed as a (B, 4)
tensor of ``(g_x, g_y, g_z, b_norm)`` rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MODALITIES = ("b0", "t1", "t2")
Q_DIM = 4
Q_HIDDEN = 64
IN_EPS = 1e-5
Q_TOL = 1e-4  # float32 slack for unit-norm checks


@dataclass
class GeneratorConfig:
    in_size: tuple[int, int] = (64, 64)
    base_channels: int = 32
    n_downsample: int = 2
    n_res_blocks: int = 4
    q_embed_dim: int = 64
    attention_reduction: int = 8
    seed: int = 0

    def __post_init__(self):
        self.in_size = tuple(int(s) for s in self.in_size)
        for name in ("base_channels", "n_downsample", "n_res_blocks", "q_embed_dim",
                     "attention_reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        step = 2 ** self.n_downsample
        if any(s % step for s in self.in_size):
            raise ValueError(f"in_size {self.in_size} not divisible by 2^{self.n_downsample}")
        if self.base_channels // self.attention_reduction < 1:
            raise ValueError("base_channels / attention_reduction must be >= 1")

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** self.n_downsample

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_size"] = list(self.in_size)
        return d


@dataclass
class DiscriminatorConfig:
    in_size: tuple[int, int] = (64, 64)
    base_channels: int = 32
    n_downsample: int = 3
    q_embed_dim: int = 64
    seed: int = 1

    def __post_init__(self):
        self.in_size = tuple(int(s) for s in self.in_size)
        if min(self.base_channels, self.n_downsample, self.q_embed_dim) < 1:
            raise ValueError("discriminator sizes must be positive integers")
        step = 2 ** self.n_downsample
        if any(s % step for s in self.in_size):
            raise ValueError(f"in_size {self.in_size} not divisible by 2^{self.n_downsample}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_size"] = list(self.in_size)
        return d


def check_q(q: torch.Tensor) -> None:
    """Reject conditions that are not ``(unit or zero g, b_norm in [0, 1])``."""
    if q.dim() != 2 or q.shape[1] != Q_DIM:
        raise ValueError(f"q must have shape (B, 4), got {tuple(q.shape)}")
    b = q[:, 3]
    if torch.any(b < 0) or torch.any(b > 1):
        raise ValueError("b_norm outside [0, 1]; b-values must be normalized")
    n = torch.linalg.vector_norm(q[:, :3], dim=1)
    ok = (n <= Q_TOL) | ((n - 1).abs() <= Q_TOL)
    if not bool(ok.all()):
        raise ValueError("gradient directions must be unit vectors (or zero at b=0)")


INIT_GAIN = 1.0  # bound = sqrt(INIT_GAIN / fan_in)
# The q pathway (embedding MLP, CBIN bias heads) starts above variance-preserving
# (gain 3) so the condition reaches the normalized features at O(1) scale instead
# of a few percent.
Q_PATH_GAIN = 5.0


def _init_uniform(module: nn.Module, seed: int, gain: float = INIT_GAIN) -> None:
    """Fan-in scaled uniform init U(-a, a), a = sqrt(gain / fan_in), from one seeded stream.

    Biases use the same bound as their layer's weights.
    """
    gen = torch.Generator().manual_seed(seed)

    def fill(p, fan_in, g):
        bound = math.sqrt(g / fan_in)
        with torch.no_grad():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)

    for name, m in module.named_modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight[0].numel()
            g = Q_PATH_GAIN if "q_embed" in name or name.endswith("bias_head") else gain
            fill(m.weight, fan_in, g)
            if m.bias is not None:
                fill(m.bias, fan_in, g)
        elif isinstance(m, ProjectionHead):
            fill(m.V, m.V.shape[0], gain)


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=(k - 1) // 2, padding_mode="reflect")


def _instance_norm(x: torch.Tensor) -> torch.Tensor:
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (x - mu) / torch.sqrt(var + IN_EPS)


class ChannelAttention(nn.Module):
    """Pooled two-layer gate returning per-channel weights in (0, 1)."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        pooled = feat.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))


def attend(feat: torch.Tensor, attention: ChannelAttention) -> torch.Tensor:
    """``F + F * w`` with ``w = attention(F)`` broadcast over space."""
    w = attention(feat)
    return feat + feat * w[:, :, None, None]


class SMAEncoder(nn.Module):
    """Strided-conv backbone followed by a residual channel-attention reweighting."""

    def __init__(self, base_channels: int, n_downsample: int, reduction: int):
        super().__init__()
        self.stem = _conv(1, base_channels, 7)
        c = base_channels
        self.down = nn.ModuleList()
        for _ in range(n_downsample):
            self.down.append(_conv(c, 2 * c, 3, stride=2))
            c *= 2
        self.out_channels = c
        self.attention = ChannelAttention(c, reduction)

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(_instance_norm(self.stem(x)))
        for conv in self.down:
            h = F.relu(_instance_norm(conv(h)))
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return attend(self.backbone(x), self.attention)


def combine_modalities(feats: list[torch.Tensor]) -> torch.Tensor:
    """Merge the per-modality attended maps into the single fused map (mean)."""
    return torch.stack(feats).mean(dim=0)


class MMAF(nn.Module):
    """Multi-modal attention fusion with a row-softmaxed (channel x modality) matrix."""

    def __init__(self, channels: int, reduction: int, n_modalities: int = 3):
        super().__init__()
        self.channels = channels
        self.n_mod = n_modalities
        width = channels * n_modalities
        self.omega1 = nn.Linear(width, max(width // reduction, 1))
        self.omega2 = nn.Linear(max(width // reduction, 1), width)

    def attention(self, feats: list[torch.Tensor]) -> torch.Tensor:
        """(B, C, M) matrix; row c holds the modality weights of channel pattern c."""
        pooled = torch.cat([z.mean(dim=(2, 3)) for z in feats], dim=1)
        logits = torch.sigmoid(self.omega2(F.relu(self.omega1(pooled))))
        logits = logits.view(-1, self.n_mod, self.channels).transpose(1, 2)
        return torch.softmax(logits, dim=2)

    def forward(self, *feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if len(feats) != self.n_mod:
            raise ValueError(f"expected {self.n_mod} modality maps, got {len(feats)}")
        shape = feats[0].shape
        if any(z.shape != shape for z in feats) or shape[1] != self.channels:
            raise ValueError("modality feature maps must share one shape")
        A = self.attention(list(feats))
        shared = sum(z * A[:, :, n, None, None] for n, z in enumerate(feats))
        attended = [z + shared for z in feats]
        return combine_modalities(attended), A


class QEmbedding(nn.Module):
    """4 -> 64 -> ``out_dim`` MLP over ``(g_x, g_y, g_z, b_norm)``."""

    def __init__(self, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(Q_DIM, Q_HIDDEN)
        self.fc2 = nn.Linear(Q_HIDDEN, out_dim)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        check_q(q)
        return self.fc2(F.relu(self.fc1(q)))


class CBIN(nn.Module):
    """Instance normalization whose additive per-channel bias is an affine map of q-hat."""

    def __init__(self, channels: int, q_embed_dim: int):
        super().__init__()
        self.bias_head = nn.Linear(q_embed_dim, channels)

    def forward(self, z: torch.Tensor, q_hat: torch.Tensor) -> torch.Tensor:
        return _instance_norm(z) + self.bias_head(q_hat)[:, :, None, None]


class CBINResBlock(nn.Module):
    """Pre-activation residual block: ``x + conv(relu(CBIN(conv(relu(CBIN(x))))))``.

    No normalization follows the last convolution, so q-dependent amplitudes
    produced by the CBIN biases survive into the skip sum.
    """

    def __init__(self, channels: int, q_embed_dim: int):
        super().__init__()
        self.norm1 = CBIN(channels, q_embed_dim)
        self.conv1 = _conv(channels, channels, 3)
        self.norm2 = CBIN(channels, q_embed_dim)
        self.conv2 = _conv(channels, channels, 3)

    def forward(self, x, q_hat):
        h = self.conv1(F.relu(self.norm1(x, q_hat)))
        return x + self.conv2(F.relu(self.norm2(h, q_hat)))


class SMADecoder(nn.Module):
    """Nearest upsampling + conv stages, each followed by residual channel attention."""

    def __init__(self, in_channels: int, n_upsample: int, reduction: int):
        super().__init__()
        self.up = nn.ModuleList()
        self.attn = nn.ModuleList()
        c = in_channels
        for _ in range(n_upsample):
            self.up.append(_conv(c, c // 2, 3))
            c //= 2
            self.attn.append(ChannelAttention(c, reduction))
        self.head = _conv(c, 1, 7)

    def forward(self, z):
        h = z
        for conv, att in zip(self.up, self.attn):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = attend(F.relu(conv(h)), att)
        return torch.sigmoid(self.head(h))


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoders = nn.ModuleDict(
            {m: SMAEncoder(c.base_channels, c.n_downsample, c.attention_reduction)
             for m in MODALITIES}
        )
        latent = c.latent_channels
        self.mmaf = MMAF(latent, c.attention_reduction)
        self.q_embed = QEmbedding(c.q_embed_dim)
        self.blocks = nn.ModuleList(CBINResBlock(latent, c.q_embed_dim)
                                    for _ in range(c.n_res_blocks))
        self.decoder = SMADecoder(latent, c.n_downsample, c.attention_reduction)
        _init_uniform(self, c.seed)

    def encode(self, structurals: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Fused latent map and MMAF attention for (B, 3, H, W) inputs."""
        if structurals.dim() != 4 or structurals.shape[1] != len(MODALITIES):
            raise ValueError(f"structurals must be (B, 3, H, W), got {tuple(structurals.shape)}")
        if tuple(structurals.shape[2:]) != self.config.in_size:
            raise ValueError(
                f"input size {tuple(structurals.shape[2:])} != configured {self.config.in_size}"
            )
        feats = [self.encoders[m](structurals[:, i:i + 1]) for i, m in enumerate(MODALITIES)]
        return self.mmaf(*feats)

    def forward(self, structurals: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """Synthesize (B, 1, H, W) slices.

        ``structurals`` may have batch size 1, in which case the encoded
        latent is shared by every row of ``q``.
        """
        z, _ = self.encode(structurals)
        q_hat = self.q_embed(q)
        if z.shape[0] != q_hat.shape[0]:
            if z.shape[0] != 1:
                raise ValueError("structurals and q batch sizes differ")
            z = z.expand(q_hat.shape[0], -1, -1, -1)
        for block in self.blocks:
            z = block(z, q_hat)
        return self.decoder(z)


class ProjectionHead(nn.Module):
    """``q_hat^T V gamma + xi(gamma)`` for pooled (B, F) or per-pixel (B, F, H, W) features."""

    def __init__(self, feat_dim: int, q_embed_dim: int):
        super().__init__()
        self.V = nn.Parameter(torch.empty(q_embed_dim, feat_dim))
        self.xi = nn.Linear(feat_dim, 1)

    def forward(self, gamma: torch.Tensor, q_hat: torch.Tensor) -> torch.Tensor:
        proj = q_hat @ self.V
        if gamma.dim() == 2:
            return (proj * gamma).sum(dim=1) + self.xi(gamma)[:, 0]
        g = gamma.permute(0, 2, 3, 1)
        return (g * proj[:, None, None, :]).sum(dim=-1) + self.xi(g)[..., 0]


class Discriminator(nn.Module):
    """U-shaped discriminator scoring global realism at the bottleneck and per pixel."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.q_embed = QEmbedding(config.q_embed_dim)
        self.down = nn.ModuleList()
        chans = [c]
        self.stem = _conv(1, c, 3)
        for _ in range(config.n_downsample):
            self.down.append(_conv(chans[-1], chans[-1] * 2, 3, stride=2))
            chans.append(chans[-1] * 2)
        self.up = nn.ModuleList()
        for i in range(config.n_downsample, 0, -1):
            self.up.append(_conv(chans[i] + chans[i - 1], chans[i - 1], 3))
        self.global_head = ProjectionHead(chans[-1], config.q_embed_dim)
        self.pixel_head = ProjectionHead(c, config.q_embed_dim)
        _init_uniform(self, config.seed)

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pooled bottleneck features (B, F_g) and full-resolution features (B, C, H, W)."""
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.in_size:
            raise ValueError(f"expected (B, 1, {self.config.in_size}), got {tuple(x.shape)}")
        h = F.leaky_relu(self.stem(x), 0.2)
        skips = [h]
        for conv in self.down:
            h = F.leaky_relu(_instance_norm(conv(h)), 0.2)
            skips.append(h)
        gamma_g = h.mean(dim=(2, 3))
        for conv, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(conv(torch.cat([h, skip], dim=1)), 0.2)
        return gamma_g, h

    def forward(self, x: torch.Tensor, q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw logits: global score (B,) and pixel map (B, H, W)."""
        q_hat = self.q_embed(q)
        gamma_g, gamma_p = self.features(x)
        return self.global_head(gamma_g, q_hat), self.pixel_head(gamma_p, q_hat)


# --- flat parameter serialization -------------------------------------------


def parameter_layout(module: nn.Module) -> list[tuple[str, list[int]]]:
    """Fixed serialization order: ``state_dict`` key order."""
    return [(k, list(v.shape)) for k, v in module.state_dict().items()]


def flatten_parameters(module: nn.Module) -> np.ndarray:
    parts = [v.detach().cpu().numpy().astype("<f4").ravel() for v in module.state_dict().values()]
    return np.concatenate(parts) if parts else np.zeros(0, dtype="<f4")


def load_flat_parameters(module: nn.Module, flat: np.ndarray) -> None:
    state = module.state_dict()
    total = sum(v.numel() for v in state.values())
    if flat.size != total:
        raise ValueError(f"parameter vector has {flat.size} entries, model needs {total}")
    offset = 0
    new = {}
    for k, v in state.items():
        n = v.numel()
        new[k] = torch.from_numpy(flat[offset:offset + n].astype(np.float32)).view(v.shape)
        offset += n
    module.load_state_dict(new)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "GeneratorConfig", "DiscriminatorConfig", "Generator", "Discriminator",
    "SMAEncoder", "ChannelAttention", "MMAF", "QEmbedding", "CBIN", "CBINResBlock",
    "ProjectionHead", "check_q", "combine_modalities", "attend",
    "parameter_layout", "flatten_parameters", "load_flat_parameters", "count_parameters",
]
