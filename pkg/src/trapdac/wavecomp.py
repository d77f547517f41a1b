"""Waveform compilation: voltage timelines to delta-compressed packets.

A timeline holds per-channel voltage samples on a fixed step grid. The
compiler quantizes to DAC codes and emits, per step, only the channels
whose code changed; packet 0 covers every channel so playback starts from
a known state regardless of prior register contents.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import serialbus
from .dacmodel import (ALL_CHANNELS, POWER_ON_CODE, ChannelId, DacRegisterFile,
                       code_to_voltage, voltage_to_code)
from .errors import DuplicateChannelError, InfeasibleRateError
from .serialbus import TimingModel, upload_time


@dataclass(frozen=True)
class UpdatePacket:
    """One LDAC's worth of register writes."""

    writes: tuple  # ((ChannelId, code), ...)

    def __post_init__(self):
        seen = set()
        for ch, code in self.writes:
            if ch in seen:
                raise DuplicateChannelError(f"channel {ch} written twice in one packet")
            seen.add(ch)
            if not 0 <= code <= 65535:
                raise ValueError(f"code out of range: {code}")

    def __len__(self):
        return len(self.writes)

    @property
    def slot_count(self) -> int:
        return serialbus.packet_slot_count(self)


@dataclass
class VoltageTimeline:
    """Sampled voltages per channel on a uniform step grid.

    channels maps ChannelId to a float array; all arrays share one length.
    """

    step_period_s: float
    channels: dict

    def __post_init__(self):
        if self.step_period_s <= 0:
            raise ValueError("step_period_s must be positive")
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError(f"channel sample counts differ: {sorted(lengths)}")
        self.channels = {ch: np.asarray(v, dtype=float) for ch, v in self.channels.items()}

    @property
    def n_steps(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    def source_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.float64(self.step_period_s).tobytes())
        for ch in sorted(self.channels):
            h.update(str(ch).encode())
            h.update(np.ascontiguousarray(self.channels[ch], dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_json(self) -> str:
        names = sorted(self.channels)
        rows = (np.column_stack([self.channels[ch] for ch in names]).tolist()
                if names else [])
        obj = {
            "channels": [str(ch) for ch in names],
            "step_period_s": self.step_period_s,
            "steps": rows,
        }
        return json.dumps(obj, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "VoltageTimeline":
        obj = json.loads(text)
        names = [ChannelId.parse(n) for n in obj["channels"]]
        if len(set(names)) != len(names):
            raise ValueError("duplicate channel in timeline")
        steps = np.asarray(obj["steps"], dtype=float)
        if steps.ndim != 2 or steps.shape[1] != len(names):
            raise ValueError("each step needs one voltage per channel")
        channels = {ch: steps[:, j].copy() for j, ch in enumerate(names)}
        return cls(step_period_s=float(obj["step_period_s"]), channels=channels)


@dataclass
class Waveform:
    """Compiled packet sequence plus enough metadata to replay it."""

    packets: list  # [UpdatePacket, ...]
    step_period_s: float
    source_hash: str = ""
    clamped_channels: tuple = ()

    @property
    def n_steps(self) -> int:
        return len(self.packets)

    def slot_counts(self) -> list[int]:
        return [p.slot_count for p in self.packets]

    def total_writes(self) -> int:
        return sum(len(p) for p in self.packets)

    def to_json(self) -> str:
        obj = {
            "step_period_s": self.step_period_s,
            "source_hash": self.source_hash,
            "packets": [[[str(ch), code] for ch, code in p.writes] for p in self.packets],
        }
        return json.dumps(obj, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Waveform":
        obj = json.loads(text)
        packets = [UpdatePacket(tuple((ChannelId.parse(ch), int(code)) for ch, code in p))
                   for p in obj["packets"]]
        return cls(packets=packets, step_period_s=float(obj["step_period_s"]),
                   source_hash=obj.get("source_hash", ""))


def compile_timeline(timeline: VoltageTimeline) -> Waveform:
    """Quantize and delta-compress a timeline into packets.

    Packet 0 writes all 80 channels (channels absent from the timeline get
    the power-on mid-scale code); later packets carry only changes.
    """
    n = timeline.n_steps
    if n == 0:
        raise ValueError("timeline has no steps")
    codes = {}
    clamped = []
    for ch in ALL_CHANNELS:
        if ch in timeline.channels:
            col = np.empty(n, dtype=np.int64)
            hit = False
            for i, v in enumerate(timeline.channels[ch]):
                col[i], was_clamped = voltage_to_code(float(v))
                hit |= was_clamped
            if hit:
                clamped.append(ch)
        else:
            col = np.full(n, POWER_ON_CODE, dtype=np.int64)
        codes[ch] = col

    packets = []
    for i in range(n):
        if i == 0:
            writes = tuple((ch, int(codes[ch][0])) for ch in ALL_CHANNELS)
        else:
            writes = tuple((ch, int(codes[ch][i])) for ch in ALL_CHANNELS
                           if codes[ch][i] != codes[ch][i - 1])
        packets.append(UpdatePacket(writes))
    return Waveform(packets=packets, step_period_s=timeline.step_period_s,
                    source_hash=timeline.source_hash(), clamped_channels=tuple(clamped))


def replay(waveform: Waveform) -> VoltageTimeline:
    """Run the packets through stage_write/latch register semantics.

    Returns the latched voltages after each LDAC as a timeline over all 80
    channels; equals the quantized source timeline for compiled waveforms.
    """
    regs = DacRegisterFile()
    out = {ch: np.empty(waveform.n_steps) for ch in ALL_CHANNELS}
    for i, packet in enumerate(waveform.packets):
        for ch, code in packet.writes:
            regs.stage_write(ch, code)
        regs.latch()
        for ch in ALL_CHANNELS:
            out[ch][i] = code_to_voltage(regs.latched[ch])
    return VoltageTimeline(step_period_s=waveform.step_period_s, channels=out)


@dataclass
class RateReport:
    """Achievable update rate for a waveform under a timing model."""

    max_rate_hz: float
    bottleneck_step: int
    bottleneck_pairs: int
    min_step_period_s: float
    feasible: bool
    requested_period_s: float

    def as_text(self) -> str:
        lines = [
            f"max_rate_hz        {self.max_rate_hz:.2f}",
            f"min_step_period_s  {self.min_step_period_s:.6e}",
            f"bottleneck_step    {self.bottleneck_step}",
            f"bottleneck_pairs   {self.bottleneck_pairs}",
            f"requested_period_s {self.requested_period_s:.6e}",
            f"feasible           {self.feasible}",
        ]
        return "\n".join(lines) + "\n"


def max_update_rate(waveform: Waveform, timing: TimingModel) -> RateReport:
    """Fastest sustainable step rate, limited by the largest delta packet.

    Packet k+1 must finish uploading before LDAC k+1 fires, so the period
    floor is upload_time(worst pairs) + the LDAC overhead (pulse width, or
    the latch delay if it is longer). Packet 0 preloads before playback
    starts and is excluded when delta packets exist.
    """
    slots = waveform.slot_counts()
    steady = slots[1:] if len(slots) > 1 else slots
    worst_i = int(np.argmax(steady)) + (1 if len(slots) > 1 else 0)
    worst = slots[worst_i]
    overhead = max(timing.ldac_pulse_s, timing.ldac_to_next_packet_delay_s)
    min_period = upload_time(worst, timing) + overhead
    rate = 1.0 / min_period
    return RateReport(max_rate_hz=rate, bottleneck_step=worst_i, bottleneck_pairs=worst,
                      min_step_period_s=min_period, feasible=waveform.step_period_s >= min_period,
                      requested_period_s=waveform.step_period_s)


def ldac_schedule(waveform: Waveform, timing: TimingModel,
                  requested_rate_hz: float | None = None) -> list[float]:
    """LDAC times for playback at the requested update rate.

    Defaults to the waveform's own step period. The first LDAC waits for
    packet 0's upload; later ones follow at the requested period. Raises
    InfeasibleRateError when the period cannot cover the widest packet.
    """
    if requested_rate_hz is None:
        period = waveform.step_period_s
    elif requested_rate_hz <= 0:
        raise ValueError("requested_rate_hz must be positive")
    else:
        period = 1.0 / requested_rate_hz
    report = max_update_rate(waveform, timing)
    if period < report.min_step_period_s:
        raise InfeasibleRateError(
            f"period {period:.3e} s below minimum {report.min_step_period_s:.3e} s "
            f"(packet {report.bottleneck_step} has {report.bottleneck_pairs} pairs)")
    first = upload_time(waveform.packets[0].slot_count, timing)
    return [first + k * period for k in range(waveform.n_steps)]


def simulate_waveform_session(waveform: Waveform, timing: TimingModel,
                              requested_rate_hz: float | None = None) -> serialbus.BusTrace:
    """Full bus trace for playing the waveform at its step period."""
    return serialbus.simulate_session(
        waveform.packets, timing, ldac_schedule(waveform, timing, requested_rate_hz))
