"""Deep feature extraction and Gram statistics for 3-channel images.

Two backbones share one tap interface: pretrained VGG-19 weights loaded
from a named-array container (see docs/FORMATS.md), and a tiny fixed-seed
mock network that makes tests fast and golden values stable.

Stage names for VGG-19 follow the conventional block.index scheme:
``conv1_1, relu1_1, conv1_2, relu1_2, pool1, conv2_1, ..., pool5``.
The mock network exposes ``conv1, relu1, pool1, conv2, relu2``.

Gram matrices are normalized by the number of spatial positions, so
statistics from images of different sizes are comparable.
"""

from __future__ import annotations

import hashlib
import json
import math
import zipfile
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

__all__ = [
    "ExtractorConfig",
    "FeatureExtractor",
    "GramStatistics",
    "LayerFeatures",
    "extract_features",
    "gram",
    "gram_statistics",
    "load_extractor",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_VGG_TAPS = ("relu1_1", "pool1", "pool2", "pool3", "pool4")

MOCK_MEAN = (0.5, 0.5, 0.5)
MOCK_STD = (0.5, 0.5, 0.5)
DEFAULT_MOCK_TAPS = ("relu1", "relu2")
_MOCK_WEIGHT_SEED = 0x5EED

# Convolution widths of the VGG-19 feature stack, grouped by block.
_VGG19_BLOCKS = ((64, 64), (128, 128), (256, 256, 256, 256), (512, 512, 512, 512), (512, 512, 512, 512))


@dataclass(frozen=True)
class ExtractorConfig:
    """How to build a feature extractor.

    ``weights`` is either the string ``"mock"`` or a path to a VGG-19
    named-array container. ``None`` fields fall back to the defaults of the
    selected backbone (taps, input normalization, dtype).
    """

    weights: str | Path = "mock"
    taps: tuple[str, ...] | None = None
    pooling: str = "avg"
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    dtype: str | None = None

    def __post_init__(self) -> None:
        if self.pooling not in ("avg", "max"):
            raise ValueError(f"pooling must be 'avg' or 'max', got {self.pooling!r}")
        if self.taps is not None and len(self.taps) < 1:
            raise ValueError("need at least one tap layer")
        if self.std is not None and any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")
        if self.dtype is not None and self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def is_mock(self) -> bool:
        return str(self.weights) == "mock"

    @classmethod
    def mock(cls, **overrides) -> "ExtractorConfig":
        return cls(weights="mock", **overrides)

    @classmethod
    def vgg19(cls, weights: str | Path, **overrides) -> "ExtractorConfig":
        return cls(weights=weights, **overrides)

    def resolved(self) -> "ExtractorConfig":
        """Fill ``None`` fields with the backbone defaults."""
        if self.is_mock:
            taps = self.taps or DEFAULT_MOCK_TAPS
            mean = self.mean or MOCK_MEAN
            std = self.std or MOCK_STD
            dtype = self.dtype or "float64"
        else:
            taps = self.taps or DEFAULT_VGG_TAPS
            mean = self.mean or IMAGENET_MEAN
            std = self.std or IMAGENET_STD
            dtype = self.dtype or "float32"
        return ExtractorConfig(self.weights, tuple(taps), self.pooling, tuple(mean), tuple(std), dtype)

    def fingerprint(self) -> str:
        """Stable digest of the resolved configuration.

        Identifies the extractor setup (backbone kind, taps, pooling,
        normalization, dtype), not the weight bytes themselves.
        """
        r = self.resolved()
        kind = "mock" if r.is_mock else f"vgg19:{Path(str(r.weights)).name}"
        doc = json.dumps(
            {"kind": kind, "taps": r.taps, "pooling": r.pooling, "mean": r.mean, "std": r.std, "dtype": r.dtype},
            sort_keys=True,
        )
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class LayerFeatures:
    """Per-tap feature maps flattened to (N_l, M_l), or (B, N_l, M_l) batched."""

    taps: tuple[str, ...]
    maps: tuple[torch.Tensor, ...]

    @property
    def feature_counts(self) -> tuple[int, ...]:
        return tuple(m.shape[-2] for m in self.maps)

    @property
    def position_counts(self) -> tuple[int, ...]:
        return tuple(m.shape[-1] for m in self.maps)


@dataclass(frozen=True)
class GramStatistics:
    """Per-tap Gram matrices G_l of shape (N_l, N_l)."""

    taps: tuple[str, ...]
    grams: tuple[torch.Tensor, ...]

    @property
    def feature_counts(self) -> tuple[int, ...]:
        return tuple(g.shape[-1] for g in self.grams)


class FeatureExtractor:
    """Immutable chain of named stages with a subset tapped as outputs.

    Weights are frozen at construction; extraction is re-entrant and
    differentiable with respect to the input image.
    """

    def __init__(
        self,
        stages: "OrderedDict[str, nn.Module]",
        config: ExtractorConfig,
    ) -> None:
        config = config.resolved()
        missing = [t for t in config.taps if t not in stages]
        if missing:
            raise ValueError(
                f"tap layer(s) not found: {', '.join(missing)}; available: {', '.join(stages)}"
            )
        self._config = config
        self._dtype = torch.float64 if config.dtype == "float64" else torch.float32
        self._names = tuple(stages.keys())
        self._net = nn.Sequential(stages).to(self._dtype)
        self._net.eval()
        for p in self._net.parameters():
            p.requires_grad_(False)
        self._last_stage = max(self._names.index(t) for t in config.taps)
        self._mean = torch.tensor(config.mean, dtype=self._dtype).view(3, 1, 1)
        self._std = torch.tensor(config.std, dtype=self._dtype).view(3, 1, 1)

    @property
    def config(self) -> ExtractorConfig:
        return self._config

    @property
    def taps(self) -> tuple[str, ...]:
        return self._config.taps

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    @property
    def fingerprint(self) -> str:
        return self._config.fingerprint()

    @property
    def feature_counts(self) -> tuple[int, ...]:
        """Feature channel count N_l at each tap."""
        counts = {}
        width = 3
        for name, module in zip(self._names, self._net):
            if isinstance(module, nn.Conv2d):
                width = module.out_channels
            counts[name] = width
        return tuple(counts[t] for t in self._config.taps)

    @property
    def min_input_size(self) -> int:
        """Smallest H (= W) for which every tap keeps at least one position.

        Convolutions are size-preserving (3x3, pad 1), so only the stride-2
        pools shrink the map; each must still see a non-empty input.
        """
        pools = 0
        for index, module in enumerate(self._net):
            if isinstance(module, (nn.AvgPool2d, nn.MaxPool2d)):
                pools += 1
            if index == self._last_stage:
                break
        return 2**pools

    def features(self, image: torch.Tensor | np.ndarray) -> LayerFeatures:
        """Normalize ``image`` and return the tapped feature maps.

        Accepts (3, H, W) or batched (B, 3, H, W) values in [0, 1]; numpy
        input may also be (H, W, 3). Feature maps come back flattened to
        (..., N_l, M_l) in tap order.
        """
        x = self._prepare(image)
        batched = x.ndim == 4
        if not batched:
            x = x.unsqueeze(0)
        taken: dict[str, torch.Tensor] = {}
        for index, (name, module) in enumerate(zip(self._names, self._net)):
            x = module(x)
            if name in self._config.taps:
                taken[name] = x.flatten(-2)
            if index == self._last_stage:
                break
        maps = tuple(taken[t] if batched else taken[t][0] for t in self._config.taps)
        return LayerFeatures(self._config.taps, maps)

    def __call__(self, image: torch.Tensor | np.ndarray) -> LayerFeatures:
        return self.features(image)

    def _prepare(self, image: torch.Tensor | np.ndarray) -> torch.Tensor:
        if isinstance(image, np.ndarray):
            if image.ndim == 3 and image.shape[2] == 3 and image.shape[0] != 3:
                image = image.transpose(2, 0, 1)
            image = torch.tensor(np.ascontiguousarray(image), dtype=self._dtype)
        if image.ndim not in (3, 4) or image.shape[-3] != 3:
            raise ValueError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValueError("image contains non-finite values")
        minimum = self.min_input_size
        if image.shape[-2] < minimum or image.shape[-1] < minimum:
            raise ValueError(
                f"image {tuple(image.shape[-2:])} is below the extractor minimum "
                f"{minimum}x{minimum}"
            )
        image = image.to(self._dtype)
        return (image - self._mean) / self._std


def _pool(kind: str) -> nn.Module:
    return nn.AvgPool2d(2, 2) if kind == "avg" else nn.MaxPool2d(2, 2)


def _build_mock(config: ExtractorConfig) -> FeatureExtractor:
    """Fixed two-layer stack: 3 -> 8 -> 16 channels, 3x3 kernels, ReLU,
    stride-2 average pooling between the layers. Weights are drawn from a
    fixed seed so extracted values are reproducible everywhere."""
    rng = np.random.default_rng(_MOCK_WEIGHT_SEED)
    # Drawn and held in float64 so the documented weight recipe is exact;
    # the extractor casts to the configured dtype afterwards.
    conv1 = nn.Conv2d(3, 8, 3, padding=1, dtype=torch.float64)
    conv2 = nn.Conv2d(8, 16, 3, padding=1, dtype=torch.float64)
    with torch.no_grad():
        for conv in (conv1, conv2):
            fan_in = conv.in_channels * 9
            conv.weight.copy_(
                torch.tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(conv.weight.shape)))
            )
            conv.bias.copy_(torch.tensor(rng.uniform(-0.5, 0.5, size=tuple(conv.bias.shape))))
    stages = OrderedDict(
        [
            ("conv1", conv1),
            ("relu1", nn.ReLU()),
            ("pool1", nn.AvgPool2d(2, 2)),
            ("conv2", conv2),
            ("relu2", nn.ReLU()),
        ]
    )
    return FeatureExtractor(stages, config)


def _build_vgg19(config: ExtractorConfig) -> FeatureExtractor:
    path = Path(str(config.weights))
    if not path.exists():
        raise FileNotFoundError(f"weights container not found: {path}")
    try:
        with np.load(path) as container:
            arrays = {name: np.asarray(container[name]) for name in container.files}
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        raise ValueError(f"cannot parse weights container {path}: {exc}") from exc
    stages: "OrderedDict[str, nn.Module]" = OrderedDict()
    in_channels = 3
    for block, widths in enumerate(_VGG19_BLOCKS, start=1):
        for index, width in enumerate(widths, start=1):
            name = f"conv{block}_{index}"
            conv = nn.Conv2d(in_channels, width, 3, padding=1)
            for suffix, param in (("weight", conv.weight), ("bias", conv.bias)):
                key = f"{name}.{suffix}"
                if key not in arrays:
                    raise ValueError(f"weights container {path} is missing array {key!r}")
                value = arrays[key]
                if tuple(value.shape) != tuple(param.shape):
                    raise ValueError(
                        f"array {key!r} has shape {tuple(value.shape)}, expected {tuple(param.shape)}"
                    )
                with torch.no_grad():
                    param.copy_(torch.tensor(value))
            stages[name] = conv
            stages[f"relu{block}_{index}"] = nn.ReLU()
            in_channels = width
        stages[f"pool{block}"] = _pool(config.pooling)
    return FeatureExtractor(stages, config)


def load_extractor(config: ExtractorConfig) -> FeatureExtractor:
    """Build the extractor described by ``config`` (mock or VGG-19)."""
    if config.is_mock:
        return _build_mock(config)
    return _build_vgg19(config)


def extract_features(extractor: FeatureExtractor, image: torch.Tensor | np.ndarray) -> LayerFeatures:
    """Run ``image`` through ``extractor`` and collect the tapped features."""
    return extractor.features(image)


def gram(features: torch.Tensor) -> torch.Tensor:
    """Position-normalized Gram matrix F F^T / M of an (..., N, M) feature map.

    Symmetric and positive semi-definite by construction; dividing by the
    number of positions M makes matrices from different image sizes
    directly comparable.
    """
    if features.ndim < 2:
        raise ValueError(f"expected (..., N, M) features, got shape {tuple(features.shape)}")
    m = features.shape[-1]
    if m < 1:
        raise ValueError("feature map has no spatial positions")
    return features @ features.transpose(-1, -2) / m


def gram_statistics(extractor: FeatureExtractor, image: torch.Tensor | np.ndarray) -> GramStatistics:
    """Gram matrices of a single (unbatched) image at every tap."""
    feats = extractor.features(image)
    if feats.maps[0].ndim != 2:
        raise ValueError("gram_statistics expects a single image, not a batch")
    return GramStatistics(feats.taps, tuple(gram(f) for f in feats.maps))
