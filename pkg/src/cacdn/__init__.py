"""Context-aware change detection network (CACDN) for multi-source disaster mapping."""

from .core_types import BANDS, FeaturePyramid, Modality, Split, TileSample, Variant, validate_sample

__version__ = "0.1.0"

__all__ = ["BANDS", "FeaturePyramid", "Modality", "Split", "TileSample", "Variant", "validate_sample"]
