"""CIM-aware model adaptation: width morphing, ADC-aware QAT, macro mapping and
a bit-exact integer simulator."""

from .config import ClipBounds, MacroConfig, channels_per_bitline, clip_bounds

__version__ = "0.1.0"

__all__ = ["ClipBounds", "MacroConfig", "channels_per_bitline", "clip_bounds", "__version__"]
