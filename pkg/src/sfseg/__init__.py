"""Source-free domain adaptation for semantic segmentation, on a numpy autodiff core."""
from .adapt import AdaptConfig, TtaConfig, adapt, tta_episode
from .bench import make_benchmark, miou, train_source
from .errors import ConfigError, FormatError, ShapeError, StateError, UsageError
from .estimators import SourceFreeAdapter, SourceSegmenter, TestTimeAdapter
from .segmodel import ArchConfig, SegModel, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ArchConfig",
    "ConfigError",
    "FormatError",
    "SegModel",
    "ShapeError",
    "SourceFreeAdapter",
    "SourceSegmenter",
    "StateError",
    "TestTimeAdapter",
    "TtaConfig",
    "UsageError",
    "adapt",
    "init_model",
    "load_checkpoint",
    "make_benchmark",
    "miou",
    "save_checkpoint",
    "train_source",
    "tta_episode",
]
