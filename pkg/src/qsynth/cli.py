"""Command-line entry point: phantom, train, synth, fit-dti, metrics, plot, run.

Exit codes: 0 success, 1 validation, 2 I/O, 3 numerical divergence,
4 format/compatibility.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import analysis, container
from .losses import LossWeights, NonFiniteLossError
from .model import DiscriminatorConfig, GeneratorConfig
from .phantom import (
    MIN_SIZE,
    PhantomDataset,
    build_phantom,
    load_dataset,
    make_dataset,
    save_dataset,
    tensor_fa_md,
)
from .qspace import GradientTableError, multi_shell_scheme, read_fsl_files, with_b_max
from .training import (
    CheckpointError,
    TrainConfig,
    Trainer,
    load_checkpoint,
    load_generator,
    synthesize,
)

log = logging.getLogger("qsynth")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC, EXIT_FORMAT = 0, 1, 2, 3, 4

DEFAULTS = {
    "phantom": {"size": 64, "seed": 7, "noise_sigma": 0.0},
    "scheme": {"shells": [0, 1000, 2000], "dirs": 30, "b0_repeats": 1, "bvals": None, "bvecs": None},
    "generator": {"base_channels": 16, "n_downsample": 2, "n_res_blocks": 2,
                  "q_embed_dim": 64, "attention_reduction": 8, "seed": 0},
    "discriminator": {"base_channels": 16, "n_downsample": 3, "q_embed_dim": 64, "seed": 1},
    "train": TrainConfig().to_dict(),
    "evaluate": {"shells": [0, 1000, 2000], "dirs": 135, "fit_shell": 1000},
    "output": "run",
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def validation(msg: str) -> CliError:
    return CliError(msg, EXIT_VALIDATION)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """Read a YAML (or JSON) experiment config and fill unspecified keys with defaults."""
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file {p} not found", EXIT_IO)
    try:
        raw = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise CliError(f"unreadable config {p}: {exc}", EXIT_FORMAT) from None
    if not isinstance(raw, dict):
        raise validation("config must be a mapping of sections")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise validation(f"unknown config sections: {sorted(unknown)}")
    return _merge(DEFAULTS, raw)


def _echo(config: dict, out_dir: Path | None = None) -> None:
    text = json.dumps(config, indent=2, sort_keys=True, default=str)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(text + "\n")


def _check_phantom(section: dict) -> None:
    if int(section["size"]) < MIN_SIZE:
        raise validation(f"phantom size must be >= {MIN_SIZE}, got {section['size']}")
    if float(section.get("noise_sigma", 0.0)) < 0:
        raise validation("noise_sigma must be nonnegative")


def scheme_from_section(section: dict):
    if section.get("bvals") or section.get("bvecs"):
        if not (section.get("bvals") and section.get("bvecs")):
            raise validation("bvals and bvecs must be given together")
        for key in ("bvals", "bvecs"):
            if not Path(section[key]).is_file():
                raise CliError(f"{key} file {section[key]} not found", EXIT_IO)
        return read_fsl_files(section["bvals"], section["bvecs"])
    shells = [float(b) for b in section["shells"]]
    if int(section["dirs"]) < 1:
        raise validation("dirs must be a positive integer")
    if int(section.get("b0_repeats", 1)) < 1:
        raise validation("b0_repeats must be a positive integer")
    return multi_shell_scheme(shells, int(section["dirs"]), int(section.get("b0_repeats", 1)))


def _model_configs(config: dict, size: tuple[int, int]):
    gen = GeneratorConfig(in_size=size, **config["generator"])
    disc = DiscriminatorConfig(in_size=size, **config["discriminator"])
    return gen, disc


def _train_config(section: dict) -> TrainConfig:
    section = dict(section)
    weights = section.pop("weights", {})
    unknown = set(section) - set(DEFAULTS["train"])
    if unknown:
        raise validation(f"unknown train keys: {sorted(unknown)}")
    return TrainConfig(weights=LossWeights(**weights), **section)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} {p} does not exist", EXIT_IO)
    return p


# --- commands -----------------------------------------------------------------


def cmd_phantom(args) -> int:
    section = {"size": args.size, "seed": args.seed, "noise_sigma": args.noise_sigma}
    _check_phantom(section)
    scheme = scheme_from_section({"shells": args.shells, "dirs": args.dirs,
                                  "b0_repeats": args.b0_repeats,
                                  "bvals": args.bvals, "bvecs": args.bvecs})
    ds = make_dataset(build_phantom(args.size, args.seed), scheme,
                      noise_sigma=args.noise_sigma, seed=args.seed)
    out = Path(args.out)
    digest = save_dataset(ds, out)
    _echo({"phantom": section, "n_volumes": len(scheme), "b_max": scheme.b_max,
           "digest": digest}, out)
    print(f"digest {digest}")
    return EXIT_OK


def _train_overrides(args, config: dict) -> dict:
    train = config["train"]
    for key in ("epochs", "batch_size", "lr_g", "lr_d", "seed", "d_every"):
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    if args.base_channels is not None:
        config["generator"]["base_channels"] = args.base_channels
    if args.disc_channels is not None:
        config["discriminator"]["base_channels"] = args.disc_channels
    return config


def run_training(data_dir: Path, out: Path, config: dict, resume: bool = False,
                 max_steps: int | None = None) -> Trainer:
    ds = load_dataset(data_dir)
    size = tuple(ds.dwis.shape[1:])
    train_cfg = _train_config(config["train"])
    gen_cfg, disc_cfg = _model_configs(config, size)
    ckpt_dir = out / "checkpoints"
    if resume and (ckpt_dir / "latest").is_dir():
        trainer = load_checkpoint(ckpt_dir / "latest")
    else:
        trainer = Trainer(gen_cfg, disc_cfg, train_cfg, b_max=ds.scheme.b_max)
    _echo(config, out)
    trainer.fit(ds, csv_path=out / "losses.csv", checkpoint_dir=ckpt_dir, max_steps=max_steps)
    return trainer


def cmd_train(args) -> int:
    data = _require_dir(args.data, "dataset directory")
    config = load_config(args.config) if args.config else copy.deepcopy(DEFAULTS)
    config = _train_overrides(args, config)
    # validate everything before the first output file appears
    _train_config(config["train"])
    ds_meta = container.read(data)[1]
    size = tuple(ds_meta["arrays"]["dwis"]["shape"][1:])
    _model_configs(config, size)
    out = Path(args.out)
    if (out / "losses.csv").exists() and not args.resume:
        raise validation(f"{out} already holds a training run; pass --resume or pick another --out")
    trainer = run_training(data, out, config, resume=args.resume, max_steps=args.max_steps)
    done = "final" if trainer.epoch >= trainer.config.epochs else "latest"
    print(f"checkpoint {out / 'checkpoints' / done}")
    return EXIT_OK


def _structurals_from(path) -> np.ndarray:
    arrays, _ = container.read(_require_dir(path, "structural container"))
    if "structurals" not in arrays:
        raise container.ContainerError(f"{path} has no structurals array")
    return arrays["structurals"]


def synthesize_dataset(checkpoint, structurals: np.ndarray, scheme) -> PhantomDataset:
    gen, arch = load_generator(checkpoint)
    expected = tuple(arch["generator"]["in_size"])
    if structurals.ndim != 3 or structurals.shape[0] != 3 or tuple(structurals.shape[1:]) != expected:
        raise CheckpointError(
            f"structurals {structurals.shape} do not match the checkpoint input size {expected}"
        )
    # express b_norm on the training scale of the checkpoint
    scheme = with_b_max(scheme, float(arch["b_max"]))
    dwis = synthesize(gen, structurals, scheme.q_vectors())
    return PhantomDataset(scheme=scheme, dwis=dwis, structurals=structurals.astype(np.float64))


def cmd_synth(args) -> int:
    scheme = scheme_from_section({"shells": args.shells, "dirs": args.dirs,
                                  "bvals": args.bvals, "bvecs": args.bvecs})
    structurals = _structurals_from(args.structurals)
    ds = synthesize_dataset(_require_dir(args.checkpoint, "checkpoint"), structurals, scheme)
    digest = save_dataset(ds, args.out, {"source": "synthesized", "checkpoint": str(args.checkpoint)})
    print(f"synthesized {len(ds.scheme)} slices -> {args.out} (digest {digest})")
    return EXIT_OK


def fit_dataset(ds: PhantomDataset, shell: float, mask=None) -> analysis.DtiFit:
    idx = analysis.shell_subset(ds.scheme, shell)
    if len(idx) == len(ds.scheme.b0_indices()):
        raise validation(f"no measurements on shell b={shell:g}")
    if mask is None:
        mask = ds.structurals[0] > 0
    return analysis.fit_dti(ds.dwis[idx], ds.scheme.subset(idx), mask)


def save_fit(fit: analysis.DtiFit, out, shell: float) -> None:
    container.write(out, {"fa": fit.fa, "md": fit.md, "residual": fit.residual,
                          "mask": fit.mask.astype(np.float32), "tensors": fit.tensors},
                    {"kind": "dti_maps", "shell": shell})


def cmd_fit_dti(args) -> int:
    ds = load_dataset(_require_dir(args.data, "dataset directory"))
    fit = fit_dataset(ds, args.shell)
    save_fit(fit, args.out, args.shell)
    print(f"FA mean {fit.fa[fit.mask].mean():.4f}  MD mean {fit.md[fit.mask].mean():.4g}")
    return EXIT_OK


def _maps(arrays: dict, names: list[str] | None) -> dict:
    maps = {}
    for name, arr in arrays.items():
        if names and name not in names:
            continue
        if not names and name in ("structurals", "mask", "residual"):
            continue
        if arr.ndim == 2:
            maps[name] = arr
        elif arr.ndim == 3:
            for i, sl in enumerate(arr):
                maps[f"{name}[{i}]"] = sl
    return maps


def compare_containers(path_a, path_b, names=None) -> analysis.MetricReport:
    arrays_a, _ = container.read(_require_dir(path_a, "container"))
    arrays_b, _ = container.read(_require_dir(path_b, "container"))
    maps_a, maps_b = _maps(arrays_a, names), _maps(arrays_b, names)
    if not maps_a:
        raise validation("no comparable 2D maps selected")
    if set(maps_a) != set(maps_b):
        raise container.ContainerError("containers hold different maps")
    for k in maps_a:
        if maps_a[k].shape != maps_b[k].shape:
            raise container.ContainerError(f"map {k} shapes differ")
    mask = None
    if "mask" in arrays_a:
        mask = arrays_a["mask"] > 0
    elif "structurals" in arrays_a:
        mask = arrays_a["structurals"][0] > 0
    return analysis.metric_report(maps_a, maps_b, mask)


def cmd_metrics(args) -> int:
    report = compare_containers(args.a, args.b, args.maps)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(json.dumps({k: getattr(report, k) for k in ("rmse", "psnr", "ms_ssim")}))
    return EXIT_OK


def _to_uint8(img: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return np.round(scaled * 255).astype(np.uint8), lo, hi


def _select_map(arrays: dict, name: str, index: int | None) -> np.ndarray:
    if name not in arrays:
        raise container.ContainerError(f"no map {name!r}; available: {sorted(arrays)}")
    arr = arrays[name]
    if arr.ndim == 3:
        if index is None or not 0 <= index < arr.shape[0]:
            raise validation(f"{name} has {arr.shape[0]} slices; pass --index in range")
        arr = arr[index]
    if arr.ndim != 2:
        raise container.ContainerError(f"{name} is not a 2D map")
    return arr


def render_png(panels: list[tuple[str, np.ndarray]], out) -> dict:
    """Side-by-side 8-bit grayscale panels, each linearly windowed to its own min/max.

    The window of every panel goes to a sidecar ``.json`` next to the PNG.
    """
    images, windows = [], []
    for label, img in panels:
        u8, lo, hi = _to_uint8(np.asarray(img, dtype=np.float64))
        images.append(u8)
        windows.append({"panel": label, "min": lo, "max": hi})
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(images, axis=1), mode="L").save(out)
    sidecar = {"panels": windows, "window": "linear", "width": sum(i.shape[1] for i in images),
               "height": images[0].shape[0]}
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return sidecar


def cmd_plot(args) -> int:
    arrays, _ = container.read(_require_dir(args.input, "container"))
    img = _select_map(arrays, args.map, args.index)
    panels = [(args.map, img)]
    if args.reference:
        ref_arrays, _ = container.read(_require_dir(args.reference, "reference container"))
        ref = _select_map(ref_arrays, args.map, args.index)
        if ref.shape != img.shape:
            raise container.ContainerError("reference map has a different shape")
        panels += [("reference", ref), ("abs_error", np.abs(img - ref))]
    render_png(panels, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    """phantom -> train -> synth -> fit-dti -> metrics -> plots, from one config file."""
    config = load_config(args.config)
    if args.out:
        config["output"] = args.out
    # full validation up front
    _check_phantom(config["phantom"])
    scheme = scheme_from_section(config["scheme"])
    eval_scheme = scheme_from_section({**config["evaluate"], "bvals": None, "bvecs": None})
    with_b_max(eval_scheme, scheme.b_max)
    size = int(config["phantom"]["size"])
    _model_configs(config, (size, size))
    _train_config(config["train"])

    out = Path(config["output"])
    ph = build_phantom(size, int(config["phantom"]["seed"]))
    noise = float(config["phantom"]["noise_sigma"])
    ds = make_dataset(ph, scheme, noise_sigma=noise, seed=int(config["phantom"]["seed"]))
    digest = save_dataset(ds, out / "data")
    print(f"dataset digest {digest}")
    run_training(out / "data", out / "train", config, max_steps=args.max_steps)

    final = out / "train" / "checkpoints" / "final"
    if not final.is_dir():
        final = out / "train" / "checkpoints" / "latest"
    syn = synthesize_dataset(final, ds.structurals, eval_scheme)
    save_dataset(syn, out / "synth", {"source": "synthesized"})
    truth = make_dataset(ph, with_b_max(eval_scheme, scheme.b_max))
    save_dataset(truth, out / "truth")

    shell = float(config["evaluate"]["fit_shell"])
    fit_syn = fit_dataset(syn, shell, ph.mask)
    fit_true = fit_dataset(truth, shell, ph.mask)
    save_fit(fit_syn, out / "dti_synth", shell)
    save_fit(fit_true, out / "dti_truth", shell)
    fa_true, md_true = tensor_fa_md(ph.tensors)
    report = compare_containers(out / "synth", out / "truth").to_dict()
    report["dti"] = {
        "fa_rmse_vs_analytic": analysis.rmse(fit_syn.fa, fa_true, ph.mask),
        "md_rmse_vs_analytic": analysis.rmse(fit_syn.md, md_true, ph.mask),
    }
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    render_png([("fa_synth", fit_syn.fa), ("fa_truth", fit_true.fa),
                ("abs_error", np.abs(fit_syn.fa - fit_true.fa))], out / "figures" / "fa.png")
    render_png([("md_synth", fit_syn.md), ("md_truth", fit_true.md),
                ("abs_error", np.abs(fit_syn.md - fit_true.md))], out / "figures" / "md.png")
    print(json.dumps({k: report[k] for k in ("rmse", "psnr", "ms_ssim")} | report["dti"]))
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------


def _add_scheme_args(p: argparse.ArgumentParser, dirs: int) -> None:
    p.add_argument("--shells", type=_parse_floats, default=[0.0, 1000.0, 2000.0],
                   help="comma-separated b-values (s/mm^2)")
    p.add_argument("--dirs", type=int, default=dirs, help="directions per nonzero shell")
    p.add_argument("--bvals", help="FSL bvals file (overrides --shells/--dirs)")
    p.add_argument("--bvecs", help="FSL bvecs file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render a tensor phantom dataset")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    _add_scheme_args(p, 30)
    p.add_argument("--b0-repeats", type=int, default=1, help="number of b=0 volumes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a generator/discriminator pair on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-g", type=float)
    p.add_argument("--lr-d", type=float)
    p.add_argument("--d-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--disc-channels", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize DWIs for an arbitrary scheme")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structurals", required=True, help="container holding a structurals array")
    _add_scheme_args(p, 90)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-dti", help="fit tensors on b=0 plus one shell")
    p.add_argument("--data", required=True)
    p.add_argument("--shell", type=float, default=1000.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_dti)

    p = sub.add_parser("metrics", help="RMSE / PSNR / MS-SSIM between two containers")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--maps", type=lambda s: [m for m in s.split(",") if m])
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plot", help="render a stored map as an 8-bit grayscale PNG")
    p.add_argument("input")
    p.add_argument("--map", required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--reference", help="second container; adds reference and error panels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("run", help="end-to-end pipeline from one config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (NonFiniteLossError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (container.ContainerError, CheckpointError, GradientTableError,
                        json.JSONDecodeError)):
        return EXIT_FORMAT
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, TypeError)):
        return EXIT_VALIDATION
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # mapped onto the exit-code contract
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
