"""Direct optimization of a material stack toward an exemplar's statistics.

Classic image-space texture synthesis: start from noise, repeatedly
evaluate the textural loss against the exemplar and follow its gradient
with Adam. The sampled n-channel loss makes each step cheap regardless of
the channel count; an independent enumerated evaluation is logged at a
fixed cadence so convergence can be judged off the training estimator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import seeding
from .loss import (
    DEFAULT_ENUMERATION_CAP,
    DivergenceError,
    LossReport,
    TripletGramCache,
    loss_nchannel_exact,
    loss_nchannel_stochastic,
)
from .features import FeatureExtractor
from .material import MaterialManifest, MaterialStack, save_material
from .trace import TraceRecord

log = logging.getLogger(__name__)

__all__ = ["SynthesisConfig", "SynthesisResult", "synthesize"]

_LOGIT_MARGIN = 1e-3


@dataclass(frozen=True)
class SynthesisConfig:
    """Knobs of one synthesis run. Every random choice derives from ``seed``."""

    height: int
    width: int
    steps: int = 1000
    learning_rate: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_mode: str = "stochastic"  # "stochastic" | "exact"
    triplets_per_step: int = 1
    init_mode: str = "mean-noise"  # "mean-noise" | "uniform-noise"
    parameterization: str = "sigmoid"  # "sigmoid" | "clamp"
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    exact_eval_every: int = 50  # 0 disables the independent evaluation
    checkpoint_every: int = 0  # 0 disables checkpoints

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"invalid output size {self.height}x{self.width}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.loss_mode not in ("stochastic", "exact"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.triplets_per_step < 1:
            raise ValueError("triplets_per_step must be at least 1")
        if self.init_mode not in ("mean-noise", "uniform-noise"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.parameterization not in ("sigmoid", "clamp"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class SynthesisResult:
    stack: MaterialStack
    trace: list[TraceRecord] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.trace[-1].loss if self.trace else None


def _initial_stack(
    exemplar: torch.Tensor, config: SynthesisConfig, generator: torch.Generator, dtype: torch.dtype
) -> torch.Tensor:
    n = exemplar.shape[0]
    shape = (n, config.height, config.width)
    noise = torch.rand(shape, generator=generator, dtype=dtype)
    if config.init_mode == "uniform-noise":
        return noise
    # Per-channel exemplar mean plus uniform noise of amplitude 0.1.
    mean = exemplar.mean(dim=(1, 2), keepdim=True)
    return (mean + (noise - 0.5) * 0.2).clamp(0.0, 1.0)


def synthesize(
    exemplar: MaterialStack,
    config: SynthesisConfig,
    extractor: FeatureExtractor,
    *,
    checkpoint_dir: str | Path | None = None,
) -> SynthesisResult:
    """Optimize a fresh stack to match ``exemplar``'s textural statistics.

    Returns the optimized stack (values kept in [0, 1] by the configured
    parameterization) and the per-step loss trace. Deterministic for a
    fixed seed and thread count; ``steps = 0`` returns the seeded
    initialization untouched. Raises :class:`DivergenceError` when the
    loss turns non-finite, naming the step and triplet.

    Seed children, in order: initialization noise, triplet sampling.
    """
    minimum = extractor.min_input_size
    if config.height < minimum or config.width < minimum:
        raise ValueError(
            f"output size {config.height}x{config.width} is below the extractor minimum {minimum}"
        )
    dtype = extractor.dtype
    init_seq, triplet_seq = seeding.child_sequences(config.seed, 2)
    ref = exemplar.tensor(dtype)
    n = exemplar.channels
    init = _initial_stack(ref, config, seeding.torch_generator(init_seq), dtype)
    if config.steps == 0:
        return SynthesisResult(MaterialStack.from_tensor(init, exemplar.layout))

    rng = seeding.numpy_rng(triplet_seq)
    cache = TripletGramCache(extractor)
    if config.parameterization == "sigmoid":
        squeezed = init.clamp(_LOGIT_MARGIN, 1.0 - _LOGIT_MARGIN)
        param = torch.log(squeezed / (1.0 - squeezed)).requires_grad_(True)
        current = torch.sigmoid
    else:
        param = init.clone().requires_grad_(True)
        current = lambda z: z  # noqa: E731

    optimizer = torch.optim.Adam(
        [param], lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps
    )
    exact_allowed = n <= config.enumeration_cap
    trace: list[TraceRecord] = []
    for step in range(config.steps):
        candidate = current(param)
        if config.loss_mode == "exact":
            if not exact_allowed:
                raise ValueError(
                    f"exact loss with {n} channels exceeds the enumeration cap "
                    f"{config.enumeration_cap}"
                )
            report = loss_nchannel_exact(
                candidate, ref, extractor, enumeration_cap=config.enumeration_cap, cache=cache
            )
        else:
            report = loss_nchannel_stochastic(
                candidate, ref, extractor, rng, k=config.triplets_per_step, cache=cache
            )
        value = report.item()
        if not math.isfinite(value):
            raise DivergenceError(
                f"non-finite loss at step {step}"
                + (f" (triplets {report.triplets})" if report.triplets else "")
            )
        optimizer.zero_grad()
        report.total.backward()
        optimizer.step()
        if config.parameterization == "clamp":
            with torch.no_grad():
                param.clamp_(0.0, 1.0)

        exact_value = None
        last = step == config.steps - 1
        if config.exact_eval_every and exact_allowed and (step % config.exact_eval_every == 0 or last):
            with torch.no_grad():
                exact_value = loss_nchannel_exact(
                    current(param), ref, extractor, enumeration_cap=config.enumeration_cap, cache=cache
                ).item()
        trace.append(TraceRecord(step, value, exact_value, report.triplets))

        if checkpoint_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            _save_checkpoint(current(param), exemplar.layout, Path(checkpoint_dir), step + 1)

    with torch.no_grad():
        final = current(param).clamp(0.0, 1.0)
    return SynthesisResult(MaterialStack.from_tensor(final, exemplar.layout), trace)


def _save_checkpoint(value: torch.Tensor, layout, directory: Path, step: int) -> None:
    with torch.no_grad():
        stack = MaterialStack.from_tensor(value.clamp(0.0, 1.0), layout)
    manifest = MaterialManifest.for_layout(layout, directory / f"step_{step:06d}")
    save_material(stack, manifest)
    log.info("checkpoint written at step %d", step)
