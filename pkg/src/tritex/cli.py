"""Command-line front end: synthesize, train, generate, eval.

Option precedence is flags over config file over built-in defaults; the
config file is a flat JSON object whose keys are the flag names with
underscores. Every run writes ``run_manifest.json`` (resolved options,
seed, library versions) into the output directory before doing any work,
so a run can be reproduced from its outputs alone.

Exit codes: 0 success, 1 configuration error (bad flags, missing files,
invalid sizes), 2 runtime failure (diverged optimization, write errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from . import __version__
from .evaluation import (
    alignment_metric,
    gradcheck,
    unbiasedness_check,
    write_alignment_csv,
    write_alignment_json,
)
from .features import ExtractorConfig, gram_statistics, load_extractor
from .generator import TrainConfig, generate, load_model, train_generator
from .loss import DivergenceError, loss_3channel, loss_nchannel_stochastic
from .material import (
    ChannelLayout,
    ManifestEntry,
    ManifestError,
    MaterialManifest,
    MaterialStack,
    load_material,
    save_material,
)
from .synthesis import SynthesisConfig, synthesize
from .trace import write_trace

log = logging.getLogger(__name__)

__all__ = ["entrypoint", "main"]


class ConfigError(ValueError):
    """Bad flags, config file, or input files; maps to exit code 1."""


_SYNTH_DEFAULTS: dict[str, object] = {
    "steps": 1000,
    "lr": 0.02,
    "seed": 0,
    "size": None,
    "loss": "stochastic",
    "k": 1,
    "weights": "mock",
    "init": "mean-noise",
    "parameterization": "sigmoid",
    "enumeration_cap": 6,
    "force_enumeration": False,
    "exact_eval_every": 50,
    "checkpoint_every": 0,
    "bit_depth": None,
}

_TRAIN_DEFAULTS: dict[str, object] = {
    "steps": 2000,
    "batch": 4,
    "lr": 5e-3,
    "seed": 0,
    "k": 1,
    "per_element": False,
    "crop": 128,
    "checkpoint_every": 0,
    "weights": "mock",
    "scales": 5,
    "noise_channels": 3,
    "width_step": 8,
}

_GENERATE_DEFAULTS: dict[str, object] = {
    "size": "256x256",
    "seed": 0,
    "bit_depth": None,
}

_EVAL_DEFAULTS: dict[str, object] = {
    "checks": "unbiasedness,gradcheck",
    "seed": 0,
    "weights": "mock",
    "channels": 4,
    "gap_threshold": 1e-6,
    "grad_threshold": 1e-4,
    "alignment_threshold": None,
}


def _resolve_options(args: argparse.Namespace, defaults: dict[str, object]) -> dict[str, object]:
    """Merge built-in defaults, the optional config file, and explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigError(f"config file {path} has unknown keys: {', '.join(unknown)}")
        resolved.update(raw)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigError(f"size must look like 256x256 (or one number for square), got {text!r}")
    if h < 1 or w < 1:
        raise ConfigError(f"size must be positive, got {text!r}")
    return h, w


def _extractor(weights: str, dtype: str | None = None):
    overrides = {} if dtype is None else {"dtype": dtype}
    if weights == "mock":
        config = ExtractorConfig.mock(**overrides)
    else:
        path = Path(weights)
        if not path.exists():
            raise ConfigError(f"extractor weights not found: {path}")
        config = ExtractorConfig.vgg19(path, **overrides)
    return load_extractor(config)


def _versions() -> dict[str, str]:
    return {
        "tritex": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "opencv": cv2.__version__,
    }


def _write_run_manifest(out_dir: Path, command: str, options: dict[str, object]) -> None:
    doc = {
        "command": command,
        "seed": options.get("seed"),
        "options": options,
        "versions": _versions(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")


def _relative_manifest(layout: ChannelLayout, bit_depth: int) -> MaterialManifest:
    entries = tuple(ManifestEntry(role, Path(f"{role}.png"), count) for role, count in layout.entries)
    return MaterialManifest(entries, bit_depth=bit_depth)


def _save_stack(stack: MaterialStack, out_dir: Path, bit_depth: int) -> list[Path]:
    manifest = _relative_manifest(stack.layout, bit_depth)
    written = save_material(stack, manifest, directory=out_dir)
    manifest.save(out_dir / "material.json")
    return written


def cmd_synthesize(args: argparse.Namespace) -> int:
    opts = _resolve_options(args, _SYNTH_DEFAULTS)
    manifest = MaterialManifest.load(args.exemplar)
    exemplar = load_material(manifest)
    extractor = _extractor(str(opts["weights"]))
    if opts["size"] is None:
        height, width = exemplar.height, exemplar.width
    else:
        height, width = _parse_size(str(opts["size"]))
    cap = int(opts["enumeration_cap"])
    if opts["force_enumeration"]:
        cap = max(cap, exemplar.channels)
    config = SynthesisConfig(
        height=height,
        width=width,
        steps=int(opts["steps"]),
        learning_rate=float(opts["lr"]),
        seed=int(opts["seed"]),
        loss_mode=str(opts["loss"]),
        triplets_per_step=int(opts["k"]),
        init_mode=str(opts["init"]),
        parameterization=str(opts["parameterization"]),
        enumeration_cap=cap,
        exact_eval_every=int(opts["exact_eval_every"]),
        checkpoint_every=int(opts["checkpoint_every"]),
    )
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "synthesize", opts)
    checkpoint_dir = out_dir / "checkpoints" if config.checkpoint_every else None
    result = synthesize(exemplar, config, extractor, checkpoint_dir=checkpoint_dir)
    depth = int(opts["bit_depth"]) if opts["bit_depth"] is not None else manifest.bit_depth
    written = _save_stack(result.stack, out_dir, depth)
    write_trace(result.trace, out_dir / "trace.csv")
    final = result.final_loss
    print(f"synthesized {height}x{width} stack in {config.steps} steps" + (f", final loss {final:.6g}" if final is not None else ""))
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    opts = _resolve_options(args, _TRAIN_DEFAULTS)
    manifest = MaterialManifest.load(args.exemplar)
    exemplar = load_material(manifest)
    extractor = _extractor(str(opts["weights"]))
    out_dir = Path(args.out)
    model_path = out_dir / "model.npz"
    config = TrainConfig(
        steps=int(opts["steps"]),
        batch_size=int(opts["batch"]),
        learning_rate=float(opts["lr"]),
        seed=int(opts["seed"]),
        triplets_per_batch=int(opts["k"]),
        triplet_per_element=bool(opts["per_element"]),
        crop_size=int(opts["crop"]),
        checkpoint_every=int(opts["checkpoint_every"]),
        model_path=str(model_path),
        scales=int(opts["scales"]),
        noise_channels=int(opts["noise_channels"]),
        width_step=int(opts["width_step"]),
    )
    _write_run_manifest(out_dir, "train", opts)
    result = train_generator(exemplar, config, extractor)
    write_trace(result.trace, out_dir / "trace.csv")
    final = result.trace[-1].loss if result.trace else float("nan")
    print(f"trained generator for {config.steps} steps, final loss {final:.6g}")
    print(f"wrote {model_path}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    opts = _resolve_options(args, _GENERATE_DEFAULTS)
    model_path = Path(args.model)
    if not model_path.exists():
        raise ConfigError(f"model file not found: {model_path}")
    model = load_model(model_path)
    height, width = _parse_size(str(opts["size"]))
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "generate", opts)
    stack = generate(model, height, width, int(opts["seed"]))
    depth = int(opts["bit_depth"]) if opts["bit_depth"] is not None else 8
    written = _save_stack(stack, out_dir, depth)
    print(f"generated {height}x{width} stack from {model_path}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _gradcheck_losses(extractor, channels: int, seed: int):
    """Two deterministic scalar losses for the finite-difference check."""
    rng = np.random.default_rng(seed)
    ref3 = torch.tensor(rng.random((3, 16, 16)))
    point3 = torch.tensor(rng.random((3, 16, 16)))
    refn = torch.tensor(rng.random((channels, 16, 16)))
    pointn = torch.tensor(rng.random((channels, 16, 16)))
    with torch.no_grad():
        ref_grams = gram_statistics(extractor, ref3)

    def loss3(x: torch.Tensor) -> torch.Tensor:
        return loss_3channel(x, ref_grams, extractor).total

    def loss_stochastic(x: torch.Tensor) -> torch.Tensor:
        frozen = np.random.default_rng(seed + 1)
        return loss_nchannel_stochastic(x, refn, extractor, frozen, k=2).total

    return (("loss_3channel", loss3, point3), ("loss_nchannel_stochastic", loss_stochastic, pointn))


def cmd_eval(args: argparse.Namespace) -> int:
    opts = _resolve_options(args, _EVAL_DEFAULTS)
    checks = [c.strip() for c in str(opts["checks"]).split(",") if c.strip()]
    known = {"unbiasedness", "gradcheck", "alignment"}
    unknown = sorted(set(checks) - known)
    if unknown:
        raise ConfigError(f"unknown checks: {', '.join(unknown)} (known: {', '.join(sorted(known))})")
    if "alignment" in checks and (args.exemplar is None or args.candidate is None):
        raise ConfigError("the alignment check needs both --exemplar and --candidate manifests")
    out_dir = Path(args.out)
    _write_run_manifest(out_dir, "eval", opts)
    seed = int(opts["seed"])
    report: dict[str, object] = {"checks": {}}
    ok = True

    if "unbiasedness" in checks:
        extractor = _extractor(str(opts["weights"]))
        n = int(opts["channels"])
        rng = np.random.default_rng(seed)
        a = torch.tensor(rng.random((n, 16, 16)), dtype=extractor.dtype)
        b = torch.tensor(rng.random((n, 16, 16)), dtype=extractor.dtype)
        result = unbiasedness_check(a, b, extractor)
        passed = result.relative_gap <= float(opts["gap_threshold"])
        ok = ok and passed
        report["checks"]["unbiasedness"] = {
            "channels": result.channels,
            "exact": result.exact,
            "enumerated_mean": result.enumerated_mean,
            "relative_gap": result.relative_gap,
            "threshold": float(opts["gap_threshold"]),
            "passed": passed,
        }
        print(f"unbiasedness: {'PASS' if passed else 'FAIL'} (relative gap {result.relative_gap:.3g})")

    if "gradcheck" in checks:
        extractor64 = _extractor(str(opts["weights"]), dtype="float64")
        entries = {}
        for name, fn, point in _gradcheck_losses(extractor64, int(opts["channels"]), seed):
            result = gradcheck(fn, point, rng=np.random.default_rng(seed + 2))
            passed = result.max_relative_error <= float(opts["grad_threshold"])
            ok = ok and passed
            entries[name] = {
                "max_relative_error": result.max_relative_error,
                "coords_checked": result.coords_checked,
                "threshold": float(opts["grad_threshold"]),
                "passed": passed,
            }
            print(f"gradcheck {name}: {'PASS' if passed else 'FAIL'} (max rel err {result.max_relative_error:.3g})")
        report["checks"]["gradcheck"] = entries

    if "alignment" in checks:
        exemplar = load_material(MaterialManifest.load(args.exemplar))
        candidate = load_material(MaterialManifest.load(args.candidate))
        result = alignment_metric(exemplar, candidate)
        write_alignment_json(result, out_dir / "alignment.json")
        write_alignment_csv(result, out_dir / "alignment.csv")
        threshold = opts["alignment_threshold"]
        passed = True if threshold is None else result.alignment_error <= float(threshold)
        ok = ok and passed
        report["checks"]["alignment"] = {
            "alignment_error": result.alignment_error,
            "raw_error": result.raw_error,
            "skipped_pairs": [list(p) for p in result.skipped_pairs],
            "threshold": threshold,
            "passed": passed,
            "note": result.note,
        }
        gate = "PASS" if passed else "FAIL"
        suffix = " (report only, no threshold set)" if threshold is None else ""
        print(f"alignment: {gate} (error {result.alignment_error:.4f}){suffix}")

    (out_dir / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0 if ok else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tritex",
        description="Texture synthesis for n-channel material stacks via random channel triplets.",
    )
    parser.add_argument("--version", action="version", version=f"tritex {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synthesize", help="optimize a stack toward an exemplar's statistics")
    p.add_argument("--exemplar", required=True, help="material manifest JSON of the exemplar")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of option defaults; flags override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", help="output size HxW (default: exemplar size)")
    p.add_argument("--loss", choices=["stochastic", "exact"])
    p.add_argument("--k", type=int, help="triplets per step for the stochastic loss")
    p.add_argument("--weights", help="'mock' or a path to VGG-19 weights (npz)")
    p.add_argument("--init", choices=["mean-noise", "uniform-noise"])
    p.add_argument("--parameterization", choices=["sigmoid", "clamp"])
    p.add_argument("--enumeration-cap", dest="enumeration_cap", type=int)
    p.add_argument(
        "--force-enumeration",
        dest="force_enumeration",
        action="store_const",
        const=True,
        help="allow the exact loss beyond the enumeration cap",
    )
    p.add_argument("--exact-eval-every", dest="exact_eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--bit-depth", dest="bit_depth", type=int, choices=[8, 16])
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("train", help="train a feedforward generator on an exemplar")
    p.add_argument("--exemplar", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument(
        "--per-element",
        dest="per_element",
        action="store_const",
        const=True,
        help="sample one triplet per batch element instead of one per batch",
    )
    p.add_argument("--crop", type=int, help="training crop size")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--weights")
    p.add_argument("--scales", type=int)
    p.add_argument("--noise-channels", dest="noise_channels", type=int)
    p.add_argument("--width-step", dest="width_step", type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("generate", help="sample textures from a trained generator")
    p.add_argument("--model", required=True, help="model file written by train")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--size", help="output size HxW")
    p.add_argument("--seed", type=int)
    p.add_argument("--bit-depth", dest="bit_depth", type=int, choices=[8, 16])
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("eval", help="run estimator, gradient, and alignment checks")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--exemplar", help="exemplar manifest (needed for the alignment check)")
    p.add_argument("--candidate", help="candidate manifest to compare against the exemplar")
    p.add_argument("--checks", help="comma-separated subset of unbiasedness,gradcheck,alignment")
    p.add_argument("--seed", type=int)
    p.add_argument("--weights")
    p.add_argument("--channels", type=int, help="stack width for the synthetic checks")
    p.add_argument("--gap-threshold", dest="gap_threshold", type=float)
    p.add_argument("--grad-threshold", dest="grad_threshold", type=float)
    p.add_argument("--alignment-threshold", dest="alignment_threshold", type=float)
    p.set_defaults(handler=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "handler", None) is None:
        parser.print_help()
        return 1
    try:
        return args.handler(args)
    except (ConfigError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
