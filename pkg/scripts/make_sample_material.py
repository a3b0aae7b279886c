#!/usr/bin/env python3
"""Regenerate the bundled 9-channel sample material in assets/sample_material.

The maps are derived from one seeded height field so the channels carry
co-located features: albedo colors the cells, the normal map encodes the
height gradient, roughness runs inverse to height, metalness marks the
cell interiors, and ambient occlusion is a smoothed copy of the height.
Deterministic; rerunning reproduces the committed files bit for bit.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from tritex.material import ChannelLayout, ManifestEntry, MaterialManifest, MaterialStack, save_material

SIZE = 64
SEED = 20240

LAYOUT = ChannelLayout(
    (
        ("albedo", 3),
        ("normal", 3),
        ("roughness", 1),
        ("metalness", 1),
        ("ao", 1),
    )
)


def _unit(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo)


def _wrap_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Periodic Gaussian smoothing of a (H, W) plane via the FFT."""
    fy = np.fft.fftfreq(x.shape[0])[:, None]
    fx = np.fft.fftfreq(x.shape[1])[None, :]
    kernel = np.exp(-2.0 * (np.pi * sigma) ** 2 * (fy**2 + fx**2))
    return np.real(np.fft.ifft2(np.fft.fft2(x) * kernel))


def build_stack() -> MaterialStack:
    rng = np.random.default_rng(SEED)
    height = _unit(_wrap_blur(rng.random((SIZE, SIZE)), 3.0))
    cells = (height > np.median(height)).astype(np.float64)
    speckle = rng.random((SIZE, SIZE))

    base = np.array([0.62, 0.44, 0.28])
    alt = np.array([0.20, 0.26, 0.34])
    albedo = cells[:, :, None] * base + (1.0 - cells[:, :, None]) * alt
    albedo += (speckle[:, :, None] - 0.5) * 0.12
    albedo = np.clip(np.stack([_wrap_blur(albedo[:, :, c], 0.6) for c in range(3)], axis=2), 0, 1)

    gy, gx = np.gradient(height)
    scale = 6.0
    nz = np.ones_like(height)
    norm = np.sqrt((scale * gx) ** 2 + (scale * gy) ** 2 + nz**2)
    normal = np.stack([-scale * gx / norm, -scale * gy / norm, nz / norm], axis=2)
    normal = np.clip(normal * 0.5 + 0.5, 0, 1)

    roughness = np.clip(0.9 - 0.7 * height + (speckle - 0.5) * 0.08, 0, 1)
    metalness = np.clip(cells * (0.75 + 0.2 * speckle) + (1.0 - cells) * 0.05, 0, 1)
    ao = np.clip(0.45 + 0.55 * _unit(_wrap_blur(height, 1.5)), 0, 1)

    data = np.concatenate(
        [albedo, normal, roughness[:, :, None], metalness[:, :, None], ao[:, :, None]], axis=2
    )
    return MaterialStack(data, LAYOUT)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--out",
        default=str(Path(__file__).resolve().parent.parent / "assets" / "sample_material"),
        help="directory for the maps and manifest",
    )
    args = parser.parse_args()
    out = Path(args.out)
    stack = build_stack()
    manifest = MaterialManifest(
        tuple(ManifestEntry(role, Path(f"{role}.png"), count) for role, count in LAYOUT.entries),
        bit_depth=8,
    )
    written = save_material(stack, manifest, directory=out)
    manifest.save(out / "manifest.json")
    for path in written:
        print(f"wrote {path}")
    print(f"wrote {out / 'manifest.json'}")


if __name__ == "__main__":
    main()
