"""
Multiview-Mammo: two-stage multi-view mammogram classification.

Per-view feature extractors feed a gradient-boosted tree classifier, either
on single images or on CC/MLO vectors averaged per breast.
"""

__version__ = "1.0.0"

from .config.settings import PipelineConfig, load_config
from .core.errors import MammoError
from .core.pipeline import ComparisonReport, MammoPipeline

__all__ = [
    "MammoPipeline",
    "ComparisonReport",
    "PipelineConfig",
    "MammoError",
    "load_config",
]
