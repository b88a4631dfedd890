"""Analytic diffusion-tensor phantom and its DWI/structural renderings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from . import container
from .qspace import QSpacePoint, SamplingScheme, read_fsl_files, with_b_max, write_fsl_files

MIN_SIZE = 32
EIG_MIN, EIG_MAX = 1e-4, 3e-3
SIGNAL_CLIP = 1.5

# rendering constants for the two structural stand-ins
T1_MD_SCALE = 3e-3
T2_OFFSET, T2_GAIN = 0.3, 0.7

CHANNELS = ("b0", "t1", "t2")


class Tissue(IntEnum):
    BACKGROUND = 0
    ISOTROPIC = 1
    BUNDLE_A = 2
    BUNDLE_B = 3
    CROSSING = 4


# principal fiber axes of the two bundles
BUNDLE_A_AXIS = np.array([1.0, 0.0, 0.0])
BUNDLE_B_AXIS = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class TensorPhantom:
    s0: np.ndarray  # (H, W)
    tensors: np.ndarray  # (H, W, 3, 3), mm^2/s
    labels: np.ndarray  # (H, W) Tissue codes
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.s0.shape

    @property
    def mask(self) -> np.ndarray:
        return self.labels != Tissue.BACKGROUND

    def validate(self) -> None:
        t = self.tensors[self.mask]
        if not np.allclose(t, np.swapaxes(t, -1, -2), rtol=0, atol=1e-12):
            raise ValueError("phantom tensors are not symmetric")
        ev = np.linalg.eigvalsh(t)
        if ev.size and (ev.min() < EIG_MIN * (1 - 1e-9) or ev.max() > EIG_MAX * (1 + 1e-9)):
            raise ValueError("tensor eigenvalues outside the physiological range")
        if np.any(self.s0[~self.mask] != 0):
            raise ValueError("background voxels must have s0 = 0")


@dataclass(frozen=True)
class PhantomDataset:
    scheme: SamplingScheme
    dwis: np.ndarray  # (N, H, W)
    structurals: np.ndarray  # (3, H, W)
    phantom: TensorPhantom | None = None
    noise_sigma: float = 0.0
    seed: int = 0

    @property
    def mask(self) -> np.ndarray:
        return self.structurals[0] > 0


def _check_spd(D: np.ndarray) -> None:
    if not np.allclose(D, D.T, rtol=0, atol=1e-12):
        raise ValueError("diffusion tensor is not symmetric")
    if np.linalg.eigvalsh(D).min() <= 0:
        raise ValueError("diffusion tensor is not positive definite")


def diffusion_signal(D, s0: float, q: QSpacePoint) -> float:
    """Monoexponential tensor signal ``s0 * exp(-b g^T D g)`` with b in s/mm^2."""
    D = np.asarray(D, dtype=np.float64)
    _check_spd(D)
    g = np.asarray(q.g)
    return float(s0 * np.exp(-q.b * (g @ D @ g)))


def _smooth_field(rng: np.random.Generator, size: int, n_waves: int = 4) -> np.ndarray:
    """Low-frequency random field with values in [-1, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(n_waves):
        kx, ky = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (kx * xx + ky * yy) + ph)
    return field / n_waves


def _stick_tensor(axis: np.ndarray, lam_par: float, lam_perp: float) -> np.ndarray:
    a = axis / np.linalg.norm(axis)
    return lam_perp * np.eye(3) + (lam_par - lam_perp) * np.outer(a, a)


def build_phantom(size: int, seed: int = 0) -> TensorPhantom:
    """Disk-shaped 2D phantom with isotropic tissue, two orthogonal bundles and their crossing.

    Bundle A runs along x as a horizontal band, bundle B along y as a vertical
    band; where they overlap the tensor is their average. Remaining tissue is
    isotropic. The seed only perturbs s0 and diffusivities smoothly; geometry
    and fiber axes are fixed.
    """
    if size < MIN_SIZE:
        raise ValueError(f"phantom size must be >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(yy - c, xx - c) / size
    tissue = r <= 0.44

    band = 0.09 * size
    in_a = np.abs(yy - (c - 0.12 * size)) <= band
    in_b = np.abs(xx - (c + 0.10 * size)) <= band

    labels = np.full((size, size), Tissue.BACKGROUND, dtype=np.int8)
    labels[tissue] = Tissue.ISOTROPIC
    labels[tissue & in_a] = Tissue.BUNDLE_A
    labels[tissue & in_b] = Tissue.BUNDLE_B
    labels[tissue & in_a & in_b] = Tissue.CROSSING

    f_s0 = _smooth_field(rng, size)
    f_d = _smooth_field(rng, size)

    s0 = np.where(tissue, 0.8 + 0.15 * f_s0, 0.0)
    s0[labels == Tissue.ISOTROPIC] *= 1.1

    tensors = np.zeros((size, size, 3, 3))
    eye = np.eye(3)
    iso_d = 0.9e-3 + 0.2e-3 * f_d
    lam_par = 1.7e-3 + 0.1e-3 * f_d
    lam_perp = 0.3e-3 + 0.05e-3 * f_d
    # bundle B is less anisotropic so the two bundles differ in MD/FA contrast
    lam_par_b = 1.4e-3 + 0.1e-3 * f_d
    lam_perp_b = 0.5e-3 + 0.05e-3 * f_d
    for i, j in zip(*np.nonzero(tissue)):
        lab = labels[i, j]
        if lab == Tissue.ISOTROPIC:
            tensors[i, j] = iso_d[i, j] * eye
        else:
            da = _stick_tensor(BUNDLE_A_AXIS, lam_par[i, j], lam_perp[i, j])
            db = _stick_tensor(BUNDLE_B_AXIS, lam_par_b[i, j], lam_perp_b[i, j])
            tensors[i, j] = {Tissue.BUNDLE_A: da, Tissue.BUNDLE_B: db}.get(lab, 0.5 * (da + db))
    ph = TensorPhantom(s0=s0, tensors=tensors, labels=labels, seed=seed)
    ph.validate()
    return ph


def tensor_fa_md(tensors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized FA/MD for a (..., 3, 3) stack; zero tensors give FA 0."""
    md = np.trace(tensors, axis1=-2, axis2=-1) / 3.0
    dev = tensors - md[..., None, None] * np.eye(3)
    num = np.linalg.norm(dev, axis=(-2, -1))
    den = np.linalg.norm(tensors, axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.where(den > 0, np.sqrt(1.5) * num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(fa, 0.0, 1.0), md


def render_structural(phantom: TensorPhantom) -> np.ndarray:
    """(3, H, W) b0/t1/t2 stand-in channels in [0, 1]."""
    mask = phantom.mask.astype(np.float64)
    fa, md = tensor_fa_md(phantom.tensors)
    b0 = phantom.s0 / phantom.s0.max()
    t1 = np.clip(1.0 - md / T1_MD_SCALE, 0.0, 1.0) * mask
    t2 = np.clip(T2_OFFSET + T2_GAIN * fa, 0.0, 1.0) * mask
    return np.clip(np.stack([b0, t1, t2]), 0.0, 1.0)


def make_dataset(
    phantom: TensorPhantom,
    scheme: SamplingScheme,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> PhantomDataset:
    """Render one DWI slice per scheme point.

    Signals are divided by the b0 reference ``max(s0)``, the same scale used
    for the b0 structural channel, so every b=0 slice equals that channel.
    Rician noise of scale ``noise_sigma`` is added to the raw signal; all
    b=0 points share one noise draw, which also replaces the b0 channel.
    """
    if not scheme.b0_indices():
        raise ValueError("scheme has no b=0 point")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    mask = phantom.mask
    s_ref = phantom.s0.max()
    g = scheme.bvecs
    adc = np.einsum("nk,hwkl,nl->nhw", g, phantom.tensors, g)
    signal = phantom.s0[None] * np.exp(-scheme.bvals[:, None, None] * adc)

    structurals = render_structural(phantom)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        b0_noisy = None
        for i, p in enumerate(scheme):
            if p.b == 0 and b0_noisy is not None:
                signal[i] = b0_noisy
                continue
            n1, n2 = rng.standard_normal((2, *phantom.shape))
            signal[i] = np.hypot(signal[i] + noise_sigma * n1, noise_sigma * n2)
            if p.b == 0:
                b0_noisy = signal[i]
    dwis = np.clip(signal / s_ref, 0.0, SIGNAL_CLIP) * mask
    if noise_sigma > 0:
        structurals[0] = np.clip(dwis[scheme.b0_indices()[0]], 0.0, 1.0)
        dwis[scheme.b0_indices()] = structurals[0]
    return PhantomDataset(
        scheme=scheme, dwis=dwis, structurals=structurals,
        phantom=phantom, noise_sigma=noise_sigma, seed=seed,
    )


# --- on-disk container -----------------------------------------------------


def dataset_digest(directory) -> str:
    """sha256 over the array and gradient-table files of a dataset directory."""
    d = Path(directory)
    h = hashlib.sha256()
    for name in ("dwis.bin", "structurals.bin", "bvals", "bvecs"):
        h.update((d / name).read_bytes())
    return h.hexdigest()


def save_dataset(ds: PhantomDataset, directory, extra_meta: dict | None = None) -> str:
    """Write ``ds`` as a container directory and return its digest."""
    d = Path(directory)
    meta = {
        "kind": "dwi_dataset",
        "channel_names": list(CHANNELS),
        "n_volumes": len(ds.scheme),
        "scheme": {"bvals": "bvals", "bvecs": "bvecs", "b_max": ds.scheme.b_max},
        "seed": ds.seed,
        "noise_sigma": ds.noise_sigma,
    }
    if ds.phantom is not None:
        meta["phantom"] = {"size": ds.phantom.shape[0], "seed": ds.phantom.seed}
    meta.update(extra_meta or {})
    container.write(d, {"dwis": ds.dwis, "structurals": ds.structurals}, meta)
    write_fsl_files(ds.scheme, d / "bvals", d / "bvecs")
    return dataset_digest(d)


def load_dataset(directory) -> PhantomDataset:
    d = Path(directory)
    arrays, meta = container.read(d)
    scheme = read_fsl_files(d / "bvals", d / "bvecs")
    if "b_max" in meta.get("scheme", {}):
        scheme = with_b_max(scheme, meta["scheme"]["b_max"])
    if "dwis" not in arrays or "structurals" not in arrays:
        raise container.ContainerError(f"{d} is not a dataset container")
    dwis = arrays["dwis"].astype(np.float64)
    if dwis.shape[0] != len(scheme):
        raise container.ContainerError(
            f"{dwis.shape[0]} volumes but {len(scheme)} gradient-table entries"
        )
    phantom = None
    if "phantom" in meta:
        phantom = build_phantom(meta["phantom"]["size"], meta["phantom"]["seed"])
    return PhantomDataset(
        scheme=scheme,
        dwis=dwis,
        structurals=arrays["structurals"].astype(np.float64),
        phantom=phantom,
        noise_sigma=float(meta.get("noise_sigma", 0.0)),
        seed=int(meta.get("seed", 0)),
    )
