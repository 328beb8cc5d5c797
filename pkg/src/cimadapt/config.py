"""CIM macro geometry and precision."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

# ADC widths above 8 are allowed so wide-ADC sanity runs (e.g. 10 bits) are expressible.
MAX_ADC_BITS = 16


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClipBounds:
    q_n: int
    q_p: int

    def __post_init__(self):
        if self.q_n < 0 or self.q_p < 0:
            raise ConfigError(f"clip bounds must be non-negative, got ({self.q_n}, {self.q_p})")


def clip_bounds(bits: int) -> ClipBounds:
    """Symmetric signed bounds, q_n = q_p = 2**(bits-1) - 1."""
    if bits < 2:
        raise ConfigError(f"signed quantization needs at least 2 bits, got {bits}")
    q = 2 ** (bits - 1) - 1
    return ClipBounds(q, q)


def unsigned_max(bits: int) -> int:
    if bits < 1:
        raise ConfigError(f"bit-width must be >= 1, got {bits}")
    return 2 ** bits - 1


@dataclass(frozen=True)
class MacroConfig:
    wordlines: int = 256
    bitlines_per_macro: int = 256
    adc_count: int = 64
    adc_bits: int = 5
    dac_bits: int = 4
    weight_bits: int = 4

    def __post_init__(self):
        for name in ("wordlines", "bitlines_per_macro", "adc_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.bitlines_per_macro % self.adc_count:
            raise ConfigError(
                f"adc_count {self.adc_count} must divide bitlines_per_macro {self.bitlines_per_macro}"
            )
        for name, hi in (("dac_bits", 8), ("weight_bits", 8), ("adc_bits", MAX_ADC_BITS)):
            v = getattr(self, name)
            if not 2 <= v <= hi:
                raise ConfigError(f"{name} must be in [2, {hi}], got {v}")

    @property
    def mux_ratio(self) -> int:
        return self.bitlines_per_macro // self.adc_count

    @property
    def weight_bounds(self) -> ClipBounds:
        return clip_bounds(self.weight_bits)

    @property
    def adc_bounds(self) -> ClipBounds:
        return clip_bounds(self.adc_bits)

    @property
    def dac_max(self) -> int:
        return unsigned_max(self.dac_bits)

    def to_json(self) -> dict:
        d = asdict(self)
        d["bitlines"] = d.pop("bitlines_per_macro")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> MacroConfig:
        obj = dict(obj)
        mux = obj.pop("mux_ratio", None)
        if "bitlines" in obj:
            obj["bitlines_per_macro"] = obj.pop("bitlines")
        unknown = set(obj) - {"wordlines", "bitlines_per_macro", "adc_count", "adc_bits", "dac_bits", "weight_bits"}
        if unknown:
            raise ConfigError(f"unknown macro fields: {sorted(unknown)}")
        cfg = cls(**obj)
        if mux is not None and mux != cfg.mux_ratio:
            raise ConfigError(f"mux_ratio {mux} inconsistent with derived value {cfg.mux_ratio}")
        return cfg


def channels_per_bitline(macro: MacroConfig, kernel_size: int) -> int:
    """Input channels one column can hold: floor(wordlines / k^2)."""
    if kernel_size < 1:
        raise ConfigError(f"kernel_size must be >= 1, got {kernel_size}")
    if kernel_size * kernel_size > macro.wordlines:
        raise ConfigError(
            f"kernel exceeds macro depth: {kernel_size}x{kernel_size} needs more than {macro.wordlines} wordlines"
        )
    return macro.wordlines // (kernel_size * kernel_size)


# Values within this distance of a .5 tie count as the tie, so decimal inputs
# such as -0.35 / 0.1 (= -3.4999999999999996 in binary) round like -3.5.
TIE_TOLERANCE = 1e-9


def round_half_away(x):
    """Round to nearest, ties away from zero.  Used by every quantizer."""
    return np.sign(x) * np.floor(np.abs(x) + (0.5 + TIE_TOLERANCE))
