#!/usr/bin/env python3
"""Convert torchvision's pretrained VGG-19 weights to the npz container.

The container holds one array per conv parameter, named like
``conv1_1.weight`` / ``conv1_1.bias`` (see docs/FORMATS.md). Requires
torchvision, which is not a package dependency; install it just for this
conversion.

Usage: python3 scripts/convert_vgg19.py --out vgg19.npz
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

# torchvision's vgg19().features indices of the conv layers, in order.
_CONV_INDICES = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]
_CONV_NAMES = [
    "conv1_1", "conv1_2",
    "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4",
    "conv5_1", "conv5_2", "conv5_3", "conv5_4",
]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output npz path")
    args = parser.parse_args()

    try:
        from torchvision.models import VGG19_Weights, vgg19
    except ImportError as exc:
        raise SystemExit(f"torchvision is required for the conversion: {exc}")

    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    features = model.features
    arrays = {}
    for index, name in zip(_CONV_INDICES, _CONV_NAMES):
        conv = features[index]
        arrays[f"{name}.weight"] = conv.weight.detach().numpy().astype(np.float32)
        arrays[f"{name}.bias"] = conv.bias.detach().numpy().astype(np.float32)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as handle:
        np.savez(handle, **arrays)
    print(f"wrote {out} ({len(arrays)} arrays)")


if __name__ == "__main__":
    main()
