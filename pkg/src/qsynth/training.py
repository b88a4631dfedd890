"""Alternating adversarial training, batch assembly, LR schedule and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import (
    LOSS_CSV_HEADER,
    FeatureExtractor,
    PATCH_SIZE,
    LossWeights,
    NonFiniteLossError,
    ac_loss,
    adv_loss_d,
    adv_loss_g,
    rec_loss,
    rec_target,
    total_loss,
)
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    flatten_parameters,
    load_flat_parameters,
    parameter_layout,
)
from .phantom import PhantomDataset
from .qspace import QSpacePoint

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "qsynth-checkpoint/1"


class CheckpointError(ValueError):
    """Corrupt or truncated checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr_g: float = 1e-4
    lr_d: float = 5e-5
    lr_decay: float = 0.95
    d_every: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    pixel_mean: bool = True
    antipodal_flip: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("batch_size", "epochs", "d_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainSample:
    structurals: np.ndarray  # (3, H, W)
    q: QSpacePoint
    target: np.ndarray  # (H, W)


def lr_at_epoch(initial: float, epoch: int, decay: float) -> float:
    if not 0 < decay <= 1:
        raise ValueError("decay must be in (0, 1]")
    return initial * decay ** epoch


def _sample(dataset: PhantomDataset, i: int) -> TrainSample:
    return TrainSample(dataset.structurals, dataset.scheme[i], dataset.dwis[i])


def sample_batch(dataset: PhantomDataset, n: int, rng: np.random.Generator) -> list[TrainSample]:
    """``n`` samples, each at a uniformly drawn scheme point (with replacement)."""
    if n < 1:
        raise ValueError("batch size must be positive")
    if len(dataset.scheme) == 0:
        raise ValueError("empty dataset")
    idx = rng.integers(0, len(dataset.scheme), size=n)
    return [_sample(dataset, int(i)) for i in idx]


def epoch_batches(dataset: PhantomDataset, batch_size: int, rng: np.random.Generator):
    """One pass over all scheme points in random order, chunked into batches."""
    order = rng.permutation(len(dataset.scheme))
    for start in range(0, len(order), batch_size):
        yield [_sample(dataset, int(i)) for i in order[start:start + batch_size]]


@contextmanager
def _flush_denormals():
    # subnormal floats appear once the sigmoid head saturates and slow CPU kernels ~10x;
    # the flag is process-wide, so it is switched back off afterwards
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def antipodal_flip(q: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Negate each row's direction with probability 1/2; the signal is even in g."""
    signs = torch.from_numpy(rng.choice([-1.0, 1.0], size=(q.shape[0], 1))).to(q.dtype)
    return torch.cat([q[:, :3] * signs, q[:, 3:]], dim=1)


def _collate(batch: list[TrainSample]):
    first = batch[0].structurals
    if all(s.structurals is first for s in batch):
        structurals = torch.from_numpy(np.asarray(first, dtype=np.float32))[None]
    else:
        structurals = torch.from_numpy(np.stack([s.structurals for s in batch]).astype(np.float32))
    q = torch.from_numpy(np.stack([s.q.as_vector() for s in batch]).astype(np.float32))
    target = torch.from_numpy(np.stack([s.target for s in batch]).astype(np.float32))[:, None]
    return structurals, q, target


class Trainer:
    """Owns both networks, their optimizers, the batch RNG and the step/epoch counters."""

    def __init__(self, gen_config: GeneratorConfig, disc_config: DiscriminatorConfig,
                 config: TrainConfig, b_max: float | None = None):
        self.gen_config = gen_config
        self.disc_config = disc_config
        self.config = config
        self.b_max = b_max
        torch.use_deterministic_algorithms(True)
        self.gen = Generator(gen_config)
        self.disc = Discriminator(disc_config)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.gen.parameters(), lr=config.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=config.lr_d, betas=betas)
        self.extractor = FeatureExtractor()
        with torch.no_grad():
            fh, fw = self.extractor(torch.zeros(1, 1, *gen_config.in_size)).shape[2:]
        if min(fh, fw) < PATCH_SIZE:
            raise ValueError(
                f"slices {gen_config.in_size} give {fh}x{fw} self-similarity features; "
                f"at least {PATCH_SIZE}x{PATCH_SIZE} are needed"
            )
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.step = 0

    def set_epoch_lr(self, epoch: int) -> None:
        c = self.config
        for group in self.opt_g.param_groups:
            group["lr"] = lr_at_epoch(c.lr_g, epoch, c.lr_decay)
        for group in self.opt_d.param_groups:
            group["lr"] = lr_at_epoch(c.lr_d, epoch, c.lr_decay)

    def train_step(self, batch: list[TrainSample]) -> dict:
        """One generator update, plus a discriminator update every ``d_every`` steps."""
        step = self.step + 1
        try:
            with _flush_denormals():
                record = self._update(batch, step)
        except NonFiniteLossError as exc:
            detail = f"step {step}" + (f", {exc.detail}" if exc.detail else "")
            raise NonFiniteLossError(exc.term, detail) from None
        self.step = step
        return record

    def _update(self, batch: list[TrainSample], step: int) -> dict:
        c = self.config
        structurals, q, target = _collate(batch)
        if c.antipodal_flip:
            q = antipodal_flip(q, self.rng)
        target = rec_target(target, structurals[:, :1], q)
        self.gen.train()
        fake = self.gen(structurals, q)

        loss_d = math.nan
        if step % c.d_every == 0:
            self.opt_d.zero_grad(set_to_none=True)
            d_loss = adv_loss_d(self.disc(target, q), self.disc(fake.detach(), q), c.pixel_mean)
            if not torch.isfinite(d_loss):
                raise NonFiniteLossError("loss_adv_d")
            d_loss.backward()
            self.opt_d.step()
            loss_d = float(d_loss.detach())

        self.disc.requires_grad_(False)
        try:
            adv = adv_loss_g(self.disc(fake, q), c.pixel_mean)
        finally:
            self.disc.requires_grad_(True)
        rec = rec_loss(fake, target)
        ac = ac_loss(fake, target, self.extractor)
        loss = total_loss(adv, rec, ac, c.weights)
        self.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_g.step()
        return {
            "step": step,
            "loss_total": float(loss.detach()),
            "loss_adv_g": float(adv.detach()),
            "loss_adv_d": loss_d,
            "loss_rec": float(rec.detach()),
            "loss_ac": float(ac.detach()),
            "lr_g": self.opt_g.param_groups[0]["lr"],
            "lr_d": self.opt_d.param_groups[0]["lr"],
        }

    def fit(self, dataset: PhantomDataset, epochs: int | None = None, csv_path=None,
            checkpoint_dir=None, max_steps: int | None = None) -> list[dict]:
        """Train from the current epoch up to ``epochs``; returns the loss records.

        ``max_steps`` stops early (mid-epoch) once the global step count is reached;
        the state is then saved as ``latest``. Resuming from such a checkpoint
        restarts the interrupted epoch with a fresh permutation.
        """
        epochs = self.config.epochs if epochs is None else epochs
        if self.b_max is None:
            self.b_max = dataset.scheme.b_max
        records = []
        csv = None
        if csv_path is not None:
            path = Path(csv_path)
            new = not path.exists() or path.stat().st_size == 0
            csv = path.open("a")
            if new:
                csv.write(LOSS_CSV_HEADER + "\n")
        try:
            while self.epoch < epochs:
                self.set_epoch_lr(self.epoch)
                for batch in epoch_batches(dataset, self.config.batch_size, self.rng):
                    rec = self.train_step(batch)
                    records.append(rec)
                    if csv is not None:
                        csv.write(format_loss_row(rec) + "\n")
                    if max_steps is not None and self.step >= max_steps:
                        if checkpoint_dir is not None:
                            save_checkpoint(self, Path(checkpoint_dir) / "latest")
                        return records
                self.epoch += 1
                log.info("epoch %d step %d rec %.4g", self.epoch, self.step, records[-1]["loss_rec"])
                if checkpoint_dir is not None:
                    save_checkpoint(self, Path(checkpoint_dir) / "latest")
        finally:
            if csv is not None:
                csv.close()
        if checkpoint_dir is not None:
            save_checkpoint(self, Path(checkpoint_dir) / "final")
        return records

    @torch.no_grad()
    def synthesize(self, structurals: np.ndarray, q_vectors: np.ndarray, batch: int = 32) -> np.ndarray:
        return synthesize(self.gen, structurals, q_vectors, batch)


@torch.no_grad()
def synthesize(gen: Generator, structurals: np.ndarray, q_vectors: np.ndarray,
               batch: int = 32) -> np.ndarray:
    """(N, H, W) float64 slices for one (3, H, W) structural stack and N condition rows."""
    gen.eval()
    s = torch.from_numpy(np.asarray(structurals, dtype=np.float32))[None]
    out = []
    for start in range(0, len(q_vectors), batch):
        q = torch.from_numpy(np.asarray(q_vectors[start:start + batch], dtype=np.float32))
        out.append(gen(s, q)[:, 0].numpy())
    return np.concatenate(out).astype(np.float64)


def format_loss_row(rec: dict) -> str:
    cols = LOSS_CSV_HEADER.split(",")
    vals = []
    for k in cols:
        v = rec[k]
        if k == "step":
            vals.append(str(int(v)))
        elif isinstance(v, float) and math.isnan(v):
            vals.append("")
        else:
            vals.append(f"{np.float32(v):.6g}")
    return ",".join(vals)


def read_loss_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        rows.append({k: (float(v) if v else math.nan) for k, v in zip(header, line.split(","))})
    return rows


# --- checkpoints --------------------------------------------------------------


def _optimizer_flat(opt: torch.optim.Optimizer) -> np.ndarray:
    parts = []
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p, {})
            step = float(st["step"]) if "step" in st else 0.0
            parts.append(np.array([step], dtype="<f4"))
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    parts.append(st[key].detach().numpy().astype("<f4").ravel())
                else:
                    parts.append(np.zeros(p.numel(), dtype="<f4"))
    return np.concatenate(parts)


def _load_optimizer_flat(opt: torch.optim.Optimizer, flat: np.ndarray) -> None:
    offset = 0
    for group in opt.param_groups:
        for p in group["params"]:
            n = p.numel()
            step = float(flat[offset])
            offset += 1
            avg = torch.from_numpy(flat[offset:offset + n].copy()).view(p.shape)
            sq = torch.from_numpy(flat[offset + n:offset + 2 * n].copy()).view(p.shape)
            offset += 2 * n
            if step > 0:
                opt.state[p] = {"step": torch.tensor(step), "exp_avg": avg, "exp_avg_sq": sq}
            else:
                opt.state.pop(p, None)
    if offset != flat.size:
        raise CheckpointError("optimizer state size does not match the architecture")


def _rng_state_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=int))


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Write ``arch.json``, ``weights.bin`` (generator then discriminator) and ``optim.bin``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    weights = np.concatenate([flatten_parameters(trainer.gen), flatten_parameters(trainer.disc)])
    optim = np.concatenate([_optimizer_flat(trainer.opt_g), _optimizer_flat(trainer.opt_d)])
    wbytes = weights.astype("<f4").tobytes()
    obytes = optim.astype("<f4").tobytes()
    arch = {
        "format_version": CHECKPOINT_VERSION,
        "generator": trainer.gen_config.to_dict(),
        "discriminator": trainer.disc_config.to_dict(),
        "train": trainer.config.to_dict(),
        "b_max": trainer.b_max,
        "epoch": trainer.epoch,
        "step": trainer.step,
        "rng_state": _rng_state_json(trainer.rng),
        "parameters": {
            "generator": parameter_layout(trainer.gen),
            "discriminator": parameter_layout(trainer.disc),
        },
        "sha256": {
            "weights.bin": hashlib.sha256(wbytes).hexdigest(),
            "optim.bin": hashlib.sha256(obytes).hexdigest(),
        },
    }
    (d / "weights.bin").write_bytes(wbytes)
    (d / "optim.bin").write_bytes(obytes)
    (d / "arch.json").write_text(json.dumps(arch, indent=2) + "\n")
    return d


def read_arch(path) -> dict:
    d = Path(path)
    try:
        arch = json.loads((d / "arch.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no arch.json in {d}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable arch.json: {exc}") from None
    version = arch.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version!r} is not supported (expected {CHECKPOINT_VERSION!r})"
        )
    return arch


def load_checkpoint(path) -> Trainer:
    """Rebuild a :class:`Trainer` exactly as saved (weights, moments, RNG, counters)."""
    d = Path(path)
    arch = read_arch(d)
    blobs = {}
    for name in ("weights.bin", "optim.bin"):
        try:
            raw = (d / name).read_bytes()
        except FileNotFoundError:
            raise CheckpointError(f"missing {name} in {d}") from None
        if hashlib.sha256(raw).hexdigest() != arch["sha256"][name]:
            raise CheckpointError(f"{name} failed its integrity check")
        blobs[name] = np.frombuffer(raw, dtype="<f4")
    train = dict(arch["train"])
    trainer = Trainer(
        GeneratorConfig(**arch["generator"]),
        DiscriminatorConfig(**arch["discriminator"]),
        TrainConfig(**train),
        b_max=arch.get("b_max"),
    )
    n_gen = sum(int(np.prod(s)) for _, s in arch["parameters"]["generator"])
    try:
        load_flat_parameters(trainer.gen, blobs["weights.bin"][:n_gen])
        load_flat_parameters(trainer.disc, blobs["weights.bin"][n_gen:])
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    n_opt_g = sum(1 + 2 * p.numel() for p in trainer.gen.parameters())
    _load_optimizer_flat(trainer.opt_g, blobs["optim.bin"][:n_opt_g])
    _load_optimizer_flat(trainer.opt_d, blobs["optim.bin"][n_opt_g:])
    trainer.rng.bit_generator.state = arch["rng_state"]
    trainer.epoch = int(arch["epoch"])
    trainer.step = int(arch["step"])
    return trainer


def load_generator(path) -> tuple[Generator, dict]:
    """Generator only, for inference."""
    trainer = load_checkpoint(path)
    return trainer.gen, read_arch(path)
