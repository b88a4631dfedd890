"""Q-space coordinates, sampling schemes and FSL gradient tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

UNIT_TOL = 1e-9


class GradientTableError(ValueError):
    """Malformed bvals/bvecs text."""


@dataclass(frozen=True)
class QSpacePoint:
    """One diffusion encoding: unit direction ``g``, b-value ``b`` and ``b / b_max``."""

    g: tuple[float, float, float]
    b: float
    b_norm: float

    def __post_init__(self):
        if self.b < 0:
            raise ValueError(f"negative b-value {self.b}")
        if not 0.0 <= self.b_norm <= 1.0:
            raise ValueError(f"b_norm {self.b_norm} outside [0, 1]")
        norm = math.sqrt(sum(c * c for c in self.g))
        if self.b > 0 and abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"direction {self.g} is not unit length")
        if self.b == 0 and norm != 0.0:
            raise ValueError("b=0 points must carry the zero direction")

    def as_vector(self) -> np.ndarray:
        """Network conditioning vector ``(g_x, g_y, g_z, b_norm)``."""
        return np.array([*self.g, self.b_norm], dtype=np.float64)


@dataclass(frozen=True)
class SamplingScheme:
    points: tuple[QSpacePoint, ...]
    b_max: float

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]

    def __iter__(self):
        return iter(self.points)

    @property
    def bvals(self) -> np.ndarray:
        return np.array([p.b for p in self.points], dtype=np.float64)

    @property
    def bvecs(self) -> np.ndarray:
        """(N, 3) array of directions."""
        return np.array([p.g for p in self.points], dtype=np.float64).reshape(-1, 3)

    def q_vectors(self) -> np.ndarray:
        """(N, 4) conditioning vectors."""
        return np.stack([p.as_vector() for p in self.points])

    def b0_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.points) if p.b == 0]

    def subset(self, indices: Iterable[int]) -> SamplingScheme:
        """Keep the selected points; b_max and b_norm stay those of the parent scheme."""
        return SamplingScheme(tuple(self.points[i] for i in indices), self.b_max)


def sphere_to_cart(theta: float, phi: float) -> np.ndarray:
    """Unit vector for polar angle ``theta`` (from +z) and azimuth ``phi``."""
    if not (0.0 <= theta <= math.pi):
        raise ValueError(f"polar angle {theta} outside [0, pi]")
    if not (0.0 <= phi < 2 * math.pi):
        raise ValueError(f"azimuth {phi} outside [0, 2pi)")
    st = math.sin(theta)
    v = np.array([st * math.cos(phi), st * math.sin(phi), math.cos(theta)])
    return v / np.linalg.norm(v)


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the sphere (golden-angle lattice).

    Deterministic in ``n``. Returns an (n, 3) array.
    """
    if n < 1:
        raise ValueError("need at least one direction")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    out = np.empty((n, 3))
    for i in range(n):
        z = 1.0 - (2.0 * i + 1.0) / n
        theta = math.acos(z)
        phi = (golden * i) % (2 * math.pi)
        out[i] = sphere_to_cart(theta, phi)
    return out


def normalize_scheme(raw: Sequence[tuple[Sequence[float], float]]) -> SamplingScheme:
    """Build a scheme from ``(direction, b)`` pairs.

    Directions with b > 0 are rescaled to unit length; b=0 entries get the
    zero direction. ``b_norm`` is ``b / max(b)``.
    """
    bs = [float(b) for _, b in raw]
    if any(b < 0 for b in bs):
        raise ValueError("b-values must be nonnegative")
    if not bs or max(bs) <= 0:
        raise ValueError("scheme needs at least one b > 0")
    b_max = max(bs)
    points = []
    for (g, _), b in zip(raw, bs):
        if b == 0:
            points.append(QSpacePoint((0.0, 0.0, 0.0), 0.0, 0.0))
            continue
        v = np.asarray(g, dtype=np.float64)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError("zero-length direction with b > 0")
        v = v / norm
        points.append(QSpacePoint((float(v[0]), float(v[1]), float(v[2])), b, b / b_max))
    return SamplingScheme(tuple(points), b_max)


def with_b_max(scheme: SamplingScheme, b_max: float) -> SamplingScheme:
    """Re-express ``b_norm`` against an external maximum (e.g. the training scheme's)."""
    if b_max <= 0:
        raise ValueError("b_max must be positive")
    if scheme.bvals.max() > b_max:
        raise ValueError(f"scheme b-value {scheme.bvals.max()} exceeds b_max {b_max}")
    pts = tuple(QSpacePoint(p.g, p.b, p.b / b_max) for p in scheme.points)
    return SamplingScheme(pts, float(b_max))


def multi_shell_scheme(shells: Sequence[float], n_dirs: int, b0_repeats: int = 1) -> SamplingScheme:
    """``b0_repeats`` b=0 points (if 0 is listed) plus ``n_dirs`` Fibonacci directions per shell."""
    if b0_repeats < 1:
        raise ValueError("b0_repeats must be positive")
    dirs = fibonacci_directions(n_dirs)
    raw: list[tuple[Sequence[float], float]] = []
    for b in shells:
        if b == 0:
            raw.extend([((0.0, 0.0, 0.0), 0.0)] * b0_repeats)
        else:
            raw.extend((d, float(b)) for d in dirs)
    return normalize_scheme(raw)


def _parse_rows(text: str, what: str) -> list[list[float]]:
    rows = []
    for line in text.strip().splitlines():
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise GradientTableError(f"non-numeric token in {what}: {exc}") from None
    return rows


def load_fsl_tables(bvals_text: str, bvecs_text: str) -> SamplingScheme:
    bval_rows = _parse_rows(bvals_text, "bvals")
    if len(bval_rows) != 1:
        raise GradientTableError(f"bvals must be a single line, got {len(bval_rows)}")
    bvals = bval_rows[0]
    bvec_rows = _parse_rows(bvecs_text, "bvecs")
    if len(bvec_rows) != 3:
        raise GradientTableError(f"bvecs must have 3 lines, got {len(bvec_rows)}")
    for row in bvec_rows:
        if len(row) != len(bvals):
            raise GradientTableError(
                f"bvecs row has {len(row)} columns but bvals has {len(bvals)} entries"
            )
    try:
        return normalize_scheme([((x, y, z), b) for x, y, z, b in zip(*bvec_rows, bvals)])
    except ValueError as exc:
        raise GradientTableError(str(exc)) from None


def _fmt(v: float) -> str:
    s = f"{v:.17g}"
    return "0" if s == "-0" else s


def save_fsl_tables(scheme: SamplingScheme) -> tuple[str, str]:
    """Serialize to ``(bvals_text, bvecs_text)``; lossless for float64 values."""
    bvals = " ".join(_fmt(b) for b in scheme.bvals) + "\n"
    vecs = scheme.bvecs
    bvecs = "".join(" ".join(_fmt(c) for c in vecs[:, k]) + "\n" for k in range(3))
    return bvals, bvecs


def read_fsl_files(bvals_path, bvecs_path) -> SamplingScheme:
    with open(bvals_path) as fa, open(bvecs_path) as fb:
        return load_fsl_tables(fa.read(), fb.read())


def write_fsl_files(scheme: SamplingScheme, bvals_path, bvecs_path) -> None:
    bvals, bvecs = save_fsl_tables(scheme)
    with open(bvals_path, "w") as fa:
        fa.write(bvals)
    with open(bvecs_path, "w") as fb:
        fb.write(bvecs)
