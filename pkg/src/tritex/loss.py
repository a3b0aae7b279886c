"""Textural losses over Gram statistics, from 3 channels to n channels.

The 3-channel loss compares Gram matrices of deep features layer by layer.
Its n-channel extension is the average of that loss over every ordered
triple of channel indices (repetition allowed, n^3 views in total), with
the same triple always applied to both images. Because full enumeration
grows cubically, the practical evaluator samples triplets uniformly at
random; its expectation equals the enumerated mean, so minimizing the
sampled loss targets the same optimum.
"""

from __future__ import annotations

import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Hashable, Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .features import FeatureExtractor, GramStatistics, gram, gram_statistics
from .material import MaterialStack

__all__ = [
    "DivergenceError",
    "EnumeratedTriplets",
    "LossReport",
    "TripletGramCache",
    "TripletIndex",
    "all_triplets",
    "gather_triplet",
    "loss_3channel",
    "loss_nchannel_exact",
    "loss_nchannel_stochastic",
    "loss_separate_baseline",
    "sample_triplet",
]

DEFAULT_ENUMERATION_CAP = 6


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite or runaway loss."""


class TripletIndex(NamedTuple):
    """Ordered triple of channel indices selecting a pseudo-RGB view."""

    c0: int
    c1: int
    c2: int


@dataclass(frozen=True)
class LossReport:
    """A loss value with its per-layer breakdown.

    ``total`` and ``per_layer`` are 0-dim tensors so gradients can flow to
    the candidate image; ``total`` is the sum of the per-layer terms. For
    sampled evaluations ``triplets`` records the views that were used.
    """

    total: torch.Tensor
    per_layer: tuple[torch.Tensor, ...]
    triplets: tuple[TripletIndex, ...] = ()

    def item(self) -> float:
        return float(self.total.detach())


def _check_triplet(triplet: Sequence[int], channels: int) -> TripletIndex:
    if len(triplet) != 3:
        raise ValueError(f"triplet must have 3 indices, got {len(triplet)}")
    t = TripletIndex(int(triplet[0]), int(triplet[1]), int(triplet[2]))
    for c in t:
        if not 0 <= c < channels:
            raise IndexError(f"triplet index {c} out of range for {channels} channels")
    return t


def gather_triplet(stack: torch.Tensor, triplet: Sequence[int]) -> torch.Tensor:
    """Differentiable channel gather: (..., n, H, W) -> (..., 3, H, W)."""
    t = _check_triplet(triplet, stack.shape[-3])
    index = torch.tensor(list(t), dtype=torch.long, device=stack.device)
    return stack.index_select(-3, index)


def as_stack_tensor(stack: MaterialStack | torch.Tensor | np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    """Coerce a stack to a channels-first (n, H, W) tensor."""
    if isinstance(stack, MaterialStack):
        return stack.tensor(dtype)
    if isinstance(stack, np.ndarray):
        if stack.ndim != 3:
            raise ValueError(f"expected (H, W, n) array, got shape {stack.shape}")
        return torch.tensor(stack.transpose(2, 0, 1), dtype=dtype)
    if stack.ndim != 3:
        raise ValueError(f"expected (n, H, W) tensor, got shape {tuple(stack.shape)}")
    return stack.to(dtype)


def sample_triplet(channels: int, rng) -> TripletIndex:
    """Draw one triplet uniformly from the n^3 ordered triples.

    Consumes exactly one ``rng.integers(0, channels, size=3)`` call, so a
    seeded generator replays the same triplet sequence. Any object with a
    NumPy-style ``integers`` method works, which is how enumeration rigs
    such as :class:`EnumeratedTriplets` plug in.
    """
    if channels < 1:
        raise ValueError(f"need at least one channel, got {channels}")
    draw = rng.integers(0, channels, size=3)
    return _check_triplet(tuple(int(v) for v in draw), channels)


def all_triplets(channels: int) -> Iterable[TripletIndex]:
    """Every ordered triple over ``channels`` indices, in lexicographic order."""
    for combo in itertools.product(range(channels), repeat=3):
        yield TripletIndex(*combo)


class EnumeratedTriplets:
    """Stand-in rng whose draws walk every ordered triplet exactly once.

    Feed it to :func:`sample_triplet` (or the stochastic loss) to force a
    complete sweep of the sample space in lexicographic order.
    """

    def __init__(self, channels: int) -> None:
        self._iter = iter(all_triplets(channels))
        self._channels = channels

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        if (low, high, size) != (0, self._channels, 3):
            raise ValueError("EnumeratedTriplets only serves full triplet draws")
        return np.array(next(self._iter), dtype=np.int64)


class TripletGramCache:
    """Bounded LRU cache of reference Gram statistics per (key, triplet).

    Training revisits triplet views of the same exemplar many times; the
    reference side never needs gradients, so its Grams are computed once
    under ``no_grad`` and reused. Thread-safe.
    """

    def __init__(self, extractor: FeatureExtractor, capacity: int = 1024) -> None:
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self._extractor = extractor
        self._capacity = capacity
        self._entries: "OrderedDict[tuple[Hashable, TripletIndex], GramStatistics]" = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def grams(
        self,
        stack: torch.Tensor,
        triplet: TripletIndex,
        key: Hashable = "exemplar",
    ) -> GramStatistics:
        cache_key = (key, triplet)
        with self._lock:
            if cache_key in self._entries:
                self._entries.move_to_end(cache_key)
                return self._entries[cache_key]
        with torch.no_grad():
            stats = gram_statistics(self._extractor, gather_triplet(stack, triplet))
        with self._lock:
            self._entries[cache_key] = stats
            self._entries.move_to_end(cache_key)
            while len(self._entries) > self._capacity:
                self._entries.popitem(last=False)
        return stats


def loss_3channel(
    image: MaterialStack | torch.Tensor | np.ndarray,
    ref_grams: GramStatistics,
    extractor: FeatureExtractor,
) -> LossReport:
    """Gram mismatch between ``image`` and precomputed reference statistics.

    Per tap layer l the term is ``|G_l - Gref_l|_F^2 / N_l^2`` and the total
    is their sum. Accepts a single (3, H, W) image or a (B, 3, H, W) batch,
    in which case each layer term is the batch mean. Differentiable with
    respect to the image.
    """
    img = _as_image(image, extractor)
    feats = extractor.features(img)
    if len(feats.maps) != len(ref_grams.grams):
        raise ValueError(
            f"reference has {len(ref_grams.grams)} layers but extractor taps {len(feats.maps)}"
        )
    per_layer = []
    for fmap, ref in zip(feats.maps, ref_grams.grams):
        n = fmap.shape[-2]
        if ref.shape[-1] != n:
            raise ValueError(
                f"reference Gram is {tuple(ref.shape)} but layer has {n} feature channels"
            )
        g = gram(fmap)
        diff = (g - ref.to(g.dtype)) ** 2
        term = diff.sum(dim=(-2, -1)) / (n * n)
        per_layer.append(term.mean() if term.ndim > 0 else term)
    total = per_layer[0]
    for term in per_layer[1:]:
        total = total + term
    return LossReport(total, tuple(per_layer))


def _as_image(image: MaterialStack | torch.Tensor | np.ndarray, extractor: FeatureExtractor) -> torch.Tensor:
    if isinstance(image, MaterialStack):
        if image.channels != 3:
            raise ValueError(f"expected a 3-channel stack, got {image.channels} channels")
        return image.tensor(extractor.dtype)
    if isinstance(image, np.ndarray):
        if image.ndim == 3 and image.shape[2] == 3 and image.shape[0] != 3:
            image = image.transpose(2, 0, 1)
        return torch.tensor(np.ascontiguousarray(image), dtype=extractor.dtype)
    return image


def _pair_tensors(
    a: MaterialStack | torch.Tensor | np.ndarray,
    b: MaterialStack | torch.Tensor | np.ndarray,
    extractor: FeatureExtractor,
) -> tuple[torch.Tensor, torch.Tensor]:
    ta = as_stack_tensor(a, extractor.dtype)
    tb = as_stack_tensor(b, extractor.dtype)
    if ta.shape[0] != tb.shape[0]:
        raise ValueError(f"channel counts differ: {ta.shape[0]} vs {tb.shape[0]}")
    return ta, tb


def _mean_report(reports: Sequence[LossReport], triplets: tuple[TripletIndex, ...]) -> LossReport:
    count = len(reports)
    per_layer = tuple(
        sum(r.per_layer[i] for r in reports) / count for i in range(len(reports[0].per_layer))
    )
    total = per_layer[0]
    for term in per_layer[1:]:
        total = total + term
    return LossReport(total, per_layer, triplets)


def loss_nchannel_exact(
    a: MaterialStack | torch.Tensor | np.ndarray,
    b: MaterialStack | torch.Tensor | np.ndarray,
    extractor: FeatureExtractor,
    *,
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP,
    cache: TripletGramCache | None = None,
    cache_key: Hashable = "exemplar",
) -> LossReport:
    """Mean of the 3-channel loss over all n^3 ordered triplet views.

    The same triplet is applied to both stacks, with ``b`` as the reference
    side. Enumeration cost is n^3 extractor passes, so stacks wider than
    ``enumeration_cap`` channels are refused.
    """
    ta, tb = _pair_tensors(a, b, extractor)
    n = ta.shape[0]
    if n > enumeration_cap:
        raise ValueError(
            f"{n} channels need {n**3} evaluations, above the enumeration cap "
            f"{enumeration_cap}; raise the cap to force it"
        )
    reports = []
    for t in all_triplets(n):
        ref = _reference_grams(tb, t, extractor, cache, cache_key)
        reports.append(loss_3channel(gather_triplet(ta, t), ref, extractor))
    return _mean_report(reports, ())


def loss_nchannel_stochastic(
    a: MaterialStack | torch.Tensor | np.ndarray,
    b: MaterialStack | torch.Tensor | np.ndarray,
    extractor: FeatureExtractor,
    rng,
    k: int = 1,
    *,
    cache: TripletGramCache | None = None,
    cache_key: Hashable = "exemplar",
) -> LossReport:
    """Unbiased sampled estimate of the n-channel loss.

    Averages the 3-channel loss over ``k`` uniformly drawn triplets, each
    applied identically to both stacks. Averaged over the sampler this
    equals :func:`loss_nchannel_exact`; the used triplets are recorded in
    the report.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    ta, tb = _pair_tensors(a, b, extractor)
    n = ta.shape[0]
    triplets = tuple(sample_triplet(n, rng) for _ in range(k))
    reports = []
    for t in triplets:
        ref = _reference_grams(tb, t, extractor, cache, cache_key)
        reports.append(loss_3channel(gather_triplet(ta, t), ref, extractor))
    return _mean_report(reports, triplets)


def loss_separate_baseline(
    a: MaterialStack | torch.Tensor | np.ndarray,
    b: MaterialStack | torch.Tensor | np.ndarray,
    extractor: FeatureExtractor,
    grouping: Sequence[Sequence[int]],
    *,
    cache: TripletGramCache | None = None,
    cache_key: Hashable = "exemplar",
) -> LossReport:
    """Sum of independent 3-channel losses over fixed channel groups.

    Each group is a triple of channel indices, or a single index that is
    replicated to three planes. Groups must not share channels. This is
    the comparison baseline that ignores correlations between groups.
    """
    ta, tb = _pair_tensors(a, b, extractor)
    n = ta.shape[0]
    triplets = []
    used: set[int] = set()
    for group in grouping:
        if len(group) == 1:
            t = _check_triplet((group[0], group[0], group[0]), n)
        elif len(group) == 3:
            t = _check_triplet(tuple(group), n)
        else:
            raise ValueError(f"groups must have 1 or 3 channels, got {len(group)}")
        members = set(t)
        if members & used:
            raise ValueError(f"group {tuple(group)} overlaps a previous group")
        used |= members
        triplets.append(t)
    if not triplets:
        raise ValueError("grouping is empty")
    reports = []
    for t in triplets:
        ref = _reference_grams(tb, t, extractor, cache, cache_key)
        reports.append(loss_3channel(gather_triplet(ta, t), ref, extractor))
    per_layer = tuple(
        sum(r.per_layer[i] for r in reports) for i in range(len(reports[0].per_layer))
    )
    total = per_layer[0]
    for term in per_layer[1:]:
        total = total + term
    return LossReport(total, per_layer)


def _reference_grams(
    stack: torch.Tensor,
    triplet: TripletIndex,
    extractor: FeatureExtractor,
    cache: TripletGramCache | None,
    cache_key: Hashable,
) -> GramStatistics:
    if cache is not None:
        return cache.grams(stack, triplet, key=cache_key)
    with torch.no_grad():
        return gram_statistics(extractor, gather_triplet(stack, triplet))
