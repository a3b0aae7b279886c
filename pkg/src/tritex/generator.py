"""Feedforward multi-scale texture generator and its training loop.

The network maps a pyramid of independent noise images to an n-channel
texture: each scale encodes its noise with a small convolution block, the
result is upsampled, concatenated with the next finer scale and merged,
and a final 1x1 projection with a sigmoid lands in [0, 1]. It is fully
convolutional, so once trained it can emit any size whose side lengths
are multiples of 2^(scales-1), each noise draw giving a fresh variation.

Training follows the sampled n-channel textural loss: every step draws a
fresh noise batch, picks one random channel triplet shared by the whole
batch, and matches the Gram statistics of that view of the generated
textures against the exemplar's.
"""

from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import seeding
from .features import FeatureExtractor, gram_statistics
from .loss import (
    DivergenceError,
    TripletGramCache,
    TripletIndex,
    gather_triplet,
    loss_3channel,
    sample_triplet,
)
from .material import ChannelLayout, MaterialStack
from .trace import TraceRecord

log = logging.getLogger(__name__)

__all__ = [
    "ConvBlock",
    "GeneratorModel",
    "ResponseNorm",
    "TexturePyramid",
    "TrainConfig",
    "TrainResult",
    "generate",
    "load_model",
    "save_model",
    "train_generator",
]

_MODEL_FORMAT = "tritex-generator"
_MODEL_VERSION = 1


class ResponseNorm(nn.Module):
    """Per-sample, per-channel response normalization with affine parameters.

    Standardizes each channel over its spatial extent. Unlike the library
    instance norm it accepts 1x1 maps (the coarsest pyramid level of small
    training sizes), where the normalized response is simply zero.
    """

    def __init__(self, channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        normalized = (x - mean) / torch.sqrt(var + self.eps)
        return self.gamma.view(1, -1, 1, 1) * normalized + self.beta.view(1, -1, 1, 1)


class ConvBlock(nn.Module):
    """3x3, 3x3, 1x1 convolutions, each with response norm and leaky ReLU.

    Circular padding keeps sizes intact and favors tileable output. Conv
    biases are omitted: the following normalization would cancel them.
    """

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, padding_mode="circular", bias=False)
        self.norm1 = ResponseNorm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, padding_mode="circular", bias=False)
        self.norm2 = ResponseNorm(out_channels)
        self.conv3 = nn.Conv2d(out_channels, out_channels, 1, bias=False)
        self.norm3 = ResponseNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.norm1(self.conv1(x)), 0.2)
        x = F.leaky_relu(self.norm2(self.conv2(x)), 0.2)
        x = F.leaky_relu(self.norm3(self.conv3(x)), 0.2)
        return x


class TexturePyramid(nn.Module):
    """Noise pyramid to texture network.

    ``forward`` takes one noise tensor per scale, finest first; scale s has
    spatial size (H / 2^s, W / 2^s) and ``noise_channels`` channels. The
    channel width grows by ``width_step`` per merged scale.
    """

    def __init__(self, out_channels: int, scales: int = 5, noise_channels: int = 3, width_step: int = 8) -> None:
        super().__init__()
        if scales < 1:
            raise ValueError("need at least one scale")
        self.out_channels = out_channels
        self.scales = scales
        self.noise_channels = noise_channels
        self.width_step = width_step
        self.encoders = nn.ModuleList(ConvBlock(noise_channels, width_step) for _ in range(scales))
        # merge[s] consumes the concatenation arriving at scale s (finer = wider).
        self.mergers = nn.ModuleList(
            ConvBlock(width_step * (scales - s), width_step * (scales - s)) for s in range(scales - 1)
        )
        self.head = nn.Conv2d(width_step * scales, out_channels, 1)

    @property
    def size_multiple(self) -> int:
        """Output side lengths must be multiples of this pyramid factor."""
        return 2 ** (self.scales - 1)

    def forward(self, noises: list[torch.Tensor]) -> torch.Tensor:
        if len(noises) != self.scales:
            raise ValueError(f"expected {self.scales} noise tensors, got {len(noises)}")
        y = self.encoders[self.scales - 1](noises[-1])
        for s in range(self.scales - 2, -1, -1):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            y = torch.cat([y, self.encoders[s](noises[s])], dim=1)
            y = self.mergers[s](y)
        return torch.sigmoid(self.head(y))


@dataclass(frozen=True)
class GeneratorModel:
    """A trained pyramid network plus the provenance needed to reuse it."""

    net: TexturePyramid
    layout: ChannelLayout
    extractor_fingerprint: str
    train_config: dict | None = None
    load_warnings: tuple[str, ...] = ()

    @property
    def size_multiple(self) -> int:
        return self.net.size_multiple

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one generator training run."""

    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    triplets_per_batch: int = 1
    triplet_per_element: bool = False
    crop_size: int = 128
    checkpoint_every: int = 0
    model_path: str | None = None
    scales: int = 5
    noise_channels: int = 3
    width_step: int = 8

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.triplets_per_batch < 1:
            raise ValueError("triplets_per_batch must be at least 1")
        if self.crop_size < 1:
            raise ValueError("crop size must be at least 1")


@dataclass
class TrainResult:
    model: GeneratorModel
    trace: list[TraceRecord] = field(default_factory=list)


class DivergenceGuard:
    """Aborts training when the smoothed loss stays far above its best.

    Tracks a windowed running mean and the minimum it has reached; once the
    running mean exceeds ``ratio`` times that minimum for ``patience``
    consecutive steps, :meth:`update` reports divergence.
    """

    def __init__(self, window: int = 50, ratio: float = 10.0, patience: int = 500) -> None:
        self.window = window
        self.ratio = ratio
        self.patience = patience
        self._recent: list[float] = []
        self._best = math.inf
        self._streak = 0

    def update(self, value: float) -> bool:
        self._recent.append(value)
        if len(self._recent) > self.window:
            self._recent.pop(0)
        running = sum(self._recent) / len(self._recent)
        self._best = min(self._best, running)
        if running > self.ratio * self._best:
            self._streak += 1
        else:
            self._streak = 0
        return self._streak >= self.patience


def _init_weights(net: nn.Module, rng: np.random.Generator, dtype: torch.dtype) -> None:
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.copy_(
                    torch.tensor(
                        rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(module.weight.shape)),
                        dtype=dtype,
                    )
                )
                if module.bias is not None:
                    module.bias.zero_()


def _noise_pyramid(
    generator: torch.Generator,
    batch: int,
    channels: int,
    height: int,
    width: int,
    scales: int,
    dtype: torch.dtype,
) -> list[torch.Tensor]:
    # Drawn finest scale first; consumers must keep this order for replay.
    return [
        torch.rand(batch, channels, height >> s, width >> s, generator=generator, dtype=dtype)
        for s in range(scales)
    ]


def _train_resolution(exemplar: MaterialStack, config: TrainConfig, multiple: int) -> int:
    limit = min(config.crop_size, exemplar.height, exemplar.width)
    resolution = (limit // multiple) * multiple
    if resolution < multiple:
        raise ValueError(
            f"exemplar {exemplar.height}x{exemplar.width} and crop {config.crop_size} cannot fit "
            f"one {multiple}x{multiple} tile ({config.scales} scales)"
        )
    return resolution


def train_generator(
    exemplar: MaterialStack,
    config: TrainConfig,
    extractor: FeatureExtractor,
) -> TrainResult:
    """Fit a :class:`TexturePyramid` to the exemplar's textural statistics.

    Each step draws a fresh noise batch, generates stacks, samples one
    triplet shared across the batch (``triplets_per_batch`` of them, or one
    per element with ``triplet_per_element``), and backpropagates the
    3-channel Gram loss of that view against the exemplar crop. Training
    aborts with :class:`DivergenceError` if the running-mean loss exceeds
    ten times its minimum for 500 consecutive steps.

    Seed children, in order: weight init, noise, triplet sampling, crops.
    """
    dtype = extractor.dtype
    n = exemplar.channels
    net = TexturePyramid(n, config.scales, config.noise_channels, config.width_step).to(dtype)
    init_seq, noise_seq, triplet_seq, crop_seq = seeding.child_sequences(config.seed, 4)
    _init_weights(net, seeding.numpy_rng(init_seq), dtype)
    noise_gen = seeding.torch_generator(noise_seq)
    triplet_rng = seeding.numpy_rng(triplet_seq)
    crop_rng = seeding.numpy_rng(crop_seq)

    multiple = net.size_multiple
    resolution = _train_resolution(exemplar, config, multiple)
    if resolution < extractor.min_input_size:
        raise ValueError(
            f"training resolution {resolution} is below the extractor minimum "
            f"{extractor.min_input_size}"
        )
    ref_full = exemplar.tensor(dtype)
    cropping = resolution != exemplar.height or resolution != exemplar.width
    cache = TripletGramCache(extractor)

    optimizer = torch.optim.Adam(
        net.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps
    )
    guard = DivergenceGuard()
    trace: list[TraceRecord] = []
    model = GeneratorModel(net, exemplar.layout, extractor.fingerprint, _config_snapshot(config))
    for step in range(config.steps):
        if cropping:
            top = int(crop_rng.integers(0, exemplar.height - resolution + 1))
            left = int(crop_rng.integers(0, exemplar.width - resolution + 1))
            ref = ref_full[:, top : top + resolution, left : left + resolution]
        else:
            ref = ref_full
        noises = _noise_pyramid(
            noise_gen, config.batch_size, config.noise_channels, resolution, resolution, config.scales, dtype
        )
        generated = net(noises)
        if config.triplet_per_element:
            triplets = tuple(sample_triplet(n, triplet_rng) for _ in range(config.batch_size))
            loss = generated.new_zeros(())
            for element, t in zip(generated, triplets):
                ref_grams = _exemplar_grams(ref, t, extractor, cache, cropping)
                loss = loss + loss_3channel(gather_triplet(element, t), ref_grams, extractor).total
            loss = loss / config.batch_size
        else:
            triplets = tuple(sample_triplet(n, triplet_rng) for _ in range(config.triplets_per_batch))
            loss = generated.new_zeros(())
            for t in triplets:
                ref_grams = _exemplar_grams(ref, t, extractor, cache, cropping)
                views = gather_triplet(generated, t)
                loss = loss + loss_3channel(views, ref_grams, extractor).total
            loss = loss / len(triplets)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at training step {step} (triplets {triplets})")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(TraceRecord(step, value, None, triplets))
        if guard.update(value):
            raise DivergenceError(
                f"training diverged: running-mean loss stayed above 10x its minimum "
                f"for {guard.patience} steps (at step {step})"
            )
        if config.checkpoint_every and config.model_path and (step + 1) % config.checkpoint_every == 0:
            path = Path(config.model_path)
            save_model(model, path.with_name(f"{path.stem}.step{step + 1:06d}{path.suffix}"))

    if config.model_path:
        save_model(model, config.model_path)
    return TrainResult(model, trace)


def _exemplar_grams(ref, triplet, extractor, cache, cropping):
    # Random crops change the reference every step, so only the fixed
    # whole-exemplar case is worth caching.
    if cropping:
        with torch.no_grad():
            return gram_statistics(extractor, gather_triplet(ref, triplet))
    return cache.grams(ref, triplet)


def _config_snapshot(config: TrainConfig) -> dict:
    return {k: getattr(config, k) for k in config.__dataclass_fields__}


def generate(model: GeneratorModel, height: int, width: int, seed: int) -> MaterialStack:
    """Sample one texture of the requested size from the trained model.

    Heights and widths must be multiples of the model's pyramid factor.
    The same seed reproduces the same stack; different seeds vary the
    output. Noise is drawn finest scale first from one torch generator
    seeded with ``seed``.
    """
    multiple = model.size_multiple
    if height % multiple or width % multiple or height < multiple or width < multiple:
        valid = ", ".join(str(multiple * k) for k in range(1, 5))
        raise ValueError(
            f"size {height}x{width} is not a multiple of the pyramid factor {multiple} "
            f"(admissible sides: {valid}, ...)"
        )
    dtype = next(model.net.parameters()).dtype
    gen = torch.Generator()
    gen.manual_seed(seed)
    noises = _noise_pyramid(gen, 1, model.net.noise_channels, height, width, model.net.scales, dtype)
    with torch.no_grad():
        out = model.net(noises)[0]
    return MaterialStack.from_tensor(out, model.layout)


def save_model(model: GeneratorModel, path: str | Path) -> None:
    """Write the model to a named-array container with a metadata block.

    Parameters are stored bit-exactly in their native dtype; the metadata
    records the channel layout, the extractor fingerprint used at training
    time, the architecture, and the training config snapshot.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net = model.net
    meta = {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "layout": [[role, count] for role, count in model.layout.entries],
        "extractor_fingerprint": model.extractor_fingerprint,
        "arch": {
            "out_channels": net.out_channels,
            "scales": net.scales,
            "noise_channels": net.noise_channels,
            "width_step": net.width_step,
        },
        "dtype": str(next(net.parameters()).dtype).removeprefix("torch."),
        "train_config": model.train_config,
    }
    arrays = {
        f"param/{name}": tensor.detach().cpu().numpy()
        for name, tensor in net.state_dict().items()
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)


def load_model(path: str | Path, extractor: FeatureExtractor | None = None) -> GeneratorModel:
    """Rebuild a model from its container file.

    A format-version or extractor-fingerprint mismatch is reported as a
    warning (logged and kept in ``load_warnings``), not an error; a file
    that cannot be parsed raises ``ValueError``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    try:
        with np.load(path) as container:
            arrays = {name: np.asarray(container[name]) for name in container.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as exc:
        raise ValueError(f"cannot parse model file {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise ValueError(f"model file {path} has no metadata block")
    try:
        meta = json.loads(arrays["__meta__"].tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"model file {path} has a corrupt metadata block: {exc}") from exc
    if meta.get("format") != _MODEL_FORMAT:
        raise ValueError(f"{path} is not a generator model file (format {meta.get('format')!r})")

    warnings = []
    if meta.get("version") != _MODEL_VERSION:
        warnings.append(f"model version {meta.get('version')} differs from supported {_MODEL_VERSION}")
    arch = meta["arch"]
    net = TexturePyramid(arch["out_channels"], arch["scales"], arch["noise_channels"], arch["width_step"])
    dtype = torch.float64 if meta.get("dtype") == "float64" else torch.float32
    net = net.to(dtype)
    state = {}
    for name in net.state_dict():
        key = f"param/{name}"
        if key not in arrays:
            raise ValueError(f"model file {path} is missing parameter {name!r}")
        state[name] = torch.tensor(arrays[key], dtype=dtype)
    net.load_state_dict(state)
    for p in net.parameters():
        p.requires_grad_(False)
    layout = ChannelLayout(tuple((role, count) for role, count in meta["layout"]))
    fingerprint = meta.get("extractor_fingerprint", "")
    if extractor is not None and extractor.fingerprint != fingerprint:
        warnings.append(
            f"extractor fingerprint {extractor.fingerprint} differs from the one used at "
            f"training time ({fingerprint})"
        )
    for message in warnings:
        log.warning("%s: %s", path, message)
    return GeneratorModel(net, layout, fingerprint, meta.get("train_config"), tuple(warnings))
