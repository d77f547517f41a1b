"""Register model of the two 40-channel, 16-bit, +/-10 V DAC chips.

Each chip holds a staged register (written over the serial bus) and a
latched register (copied from staged on an LDAC strobe). Latched codes are
the ground truth for electrode voltages.
"""

import math
import re
from dataclasses import dataclass

N_CHANNELS_PER_CHIP = 40
CODE_BITS = 16
CODE_MAX = (1 << CODE_BITS) - 1
V_MIN = -10.0
V_MAX = +10.0
V_SPAN = V_MAX - V_MIN
LSB = V_SPAN / (1 << CODE_BITS)  # 305.18 uV

# Offset-binary map: mid-scale code 0x8000 is exactly 0 V.
POWER_ON_CODE = 1 << (CODE_BITS - 1)

_CHANNEL_RE = re.compile(r"^([AB])([0-9]|[1-3][0-9])$")


@dataclass(frozen=True, order=True)
class ChannelId:
    """One DAC channel, e.g. A0 or B39."""

    chip: str
    index: int

    def __post_init__(self):
        if self.chip not in ("A", "B"):
            raise ValueError(f"chip must be 'A' or 'B', got {self.chip!r}")
        if not 0 <= self.index < N_CHANNELS_PER_CHIP:
            raise ValueError(f"channel index out of range: {self.index}")

    @classmethod
    def parse(cls, label: str) -> "ChannelId":
        m = _CHANNEL_RE.match(label)
        if not m:
            raise ValueError(f"bad channel label {label!r} (expected A0..B39)")
        return cls(m.group(1), int(m.group(2)))

    def __str__(self) -> str:
        return f"{self.chip}{self.index}"


ALL_CHANNELS = tuple(
    ChannelId(chip, i) for chip in ("A", "B") for i in range(N_CHANNELS_PER_CHIP)
)


def code_to_voltage(code: int) -> float:
    """Output voltage for a 16-bit code, offset binary over -10..+10 V."""
    if not 0 <= code <= CODE_MAX:
        raise ValueError(f"code out of range: {code}")
    return V_MIN + V_SPAN * code / (1 << CODE_BITS)


def voltage_to_code(v: float) -> tuple[int, bool]:
    """Nearest code for a requested voltage.

    Returns (code, clamped). Voltages outside [-10 V, +10 V - LSB] clamp to
    the span ends with clamped=True; transport solvers may graze the rails,
    so this degrades gracefully instead of raising.
    """
    if not math.isfinite(v):
        raise ValueError(f"non-finite voltage: {v!r}")
    clamped = v < V_MIN or v > V_MAX - LSB
    code = round((v - V_MIN) / LSB)
    code = min(max(code, 0), CODE_MAX)
    return code, clamped


def quantize(v: float) -> float:
    """Voltage actually produced when v is requested (code round trip)."""
    code, _ = voltage_to_code(v)
    return code_to_voltage(code)


class DacRegisterFile:
    """Staged + latched codes for all 80 channels (chips A and B).

    Writes land in the staged register; latch() atomically copies staged to
    latched. Power-on state is mid-scale (0 V) on every channel.
    """

    def __init__(self):
        self.staged = {ch: POWER_ON_CODE for ch in ALL_CHANNELS}
        self.latched = {ch: POWER_ON_CODE for ch in ALL_CHANNELS}

    def stage_write(self, ch: ChannelId, code: int) -> "DacRegisterFile":
        if not 0 <= code <= CODE_MAX:
            raise ValueError(f"code out of range: {code}")
        if ch not in self.staged:
            raise KeyError(f"unknown channel {ch}")
        self.staged[ch] = code
        return self

    def latch(self) -> "DacRegisterFile":
        # dict() copy makes the latch atomic: no partial state observable.
        self.latched = dict(self.staged)
        return self

    def latched_voltage(self, ch: ChannelId) -> float:
        return code_to_voltage(self.latched[ch])

    def voltages(self) -> dict[ChannelId, float]:
        return {ch: code_to_voltage(c) for ch, c in self.latched.items()}

    def copy(self) -> "DacRegisterFile":
        out = DacRegisterFile()
        out.staged = dict(self.staged)
        out.latched = dict(self.latched)
        return out
