"""Learned one-shot compressors with decoder side information, plus reference bounds."""
from .sources import SourceSpec
from .models import WzModel, build_model
from .ntc import NtcModel, build_ntc
from .trainer import TrainConfig

__all__ = ["SourceSpec", "WzModel", "build_model", "NtcModel", "build_ntc", "TrainConfig"]
__version__ = "0.1.0"
