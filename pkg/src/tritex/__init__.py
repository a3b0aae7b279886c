"""Texture synthesis for n-channel material stacks.

The classic Gram-matrix texture loss only speaks 3-channel images. This
package extends it to material stacks of any width by averaging the
3-channel loss over random channel triplets, and builds on that loss a
direct image optimizer and a feedforward multi-scale generator.
"""

__version__ = "0.1.0"

from .evaluation import (
    ALIGNMENT_NOTE,
    AlignmentReport,
    GradcheckReport,
    PairAlignment,
    UnbiasednessReport,
    alignment_metric,
    gradcheck,
    unbiasedness_check,
    write_alignment_csv,
    write_alignment_json,
)
from .features import (
    ExtractorConfig,
    FeatureExtractor,
    GramStatistics,
    LayerFeatures,
    extract_features,
    gram,
    gram_statistics,
    load_extractor,
)
from .generator import (
    GeneratorModel,
    TexturePyramid,
    TrainConfig,
    TrainResult,
    generate,
    load_model,
    save_model,
    train_generator,
)
from .loss import (
    DivergenceError,
    EnumeratedTriplets,
    LossReport,
    TripletGramCache,
    TripletIndex,
    all_triplets,
    gather_triplet,
    loss_3channel,
    loss_nchannel_exact,
    loss_nchannel_stochastic,
    loss_separate_baseline,
    sample_triplet,
)
from .material import (
    ChannelLayout,
    ManifestEntry,
    ManifestError,
    MaterialManifest,
    MaterialStack,
    apply_triplet,
    load_material,
    save_material,
)
from .synthesis import SynthesisConfig, SynthesisResult, synthesize
from .trace import TraceRecord, read_trace, write_trace

__all__ = [
    "ALIGNMENT_NOTE",
    "AlignmentReport",
    "ChannelLayout",
    "DivergenceError",
    "EnumeratedTriplets",
    "ExtractorConfig",
    "FeatureExtractor",
    "GeneratorModel",
    "GradcheckReport",
    "GramStatistics",
    "LayerFeatures",
    "LossReport",
    "ManifestEntry",
    "ManifestError",
    "MaterialManifest",
    "MaterialStack",
    "PairAlignment",
    "SynthesisConfig",
    "SynthesisResult",
    "TexturePyramid",
    "TraceRecord",
    "TrainConfig",
    "TrainResult",
    "TripletGramCache",
    "TripletIndex",
    "UnbiasednessReport",
    "alignment_metric",
    "all_triplets",
    "apply_triplet",
    "extract_features",
    "gather_triplet",
    "generate",
    "gradcheck",
    "gram",
    "gram_statistics",
    "load_extractor",
    "load_material",
    "load_model",
    "loss_3channel",
    "loss_nchannel_exact",
    "loss_nchannel_stochastic",
    "loss_separate_baseline",
    "sample_triplet",
    "save_material",
    "save_model",
    "synthesize",
    "train_generator",
    "unbiasedness_check",
    "write_alignment_csv",
    "write_alignment_json",
    "write_trace",
    "read_trace",
]
