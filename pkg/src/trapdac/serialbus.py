"""Bit-level emulation of the 9-line DAC control interface.

Both DAC chips share SYNC (bit align) and SCLK; each has its own serial
data line (SDI_A, SDI_B), so one channel on each chip is programmed per
24-bit frame slot. LDAC strobes latch staged data; the shared BUSY line is
low while the DACs are receiving a packet.

Frame layout is 2 mode bits + 6 address bits + 16 data bits, MSB first,
matching common 40-channel serial DAC word conventions. Trace timestamps
are integer nanoseconds so replay comparisons are exact.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.stats import beta

from .dacmodel import ChannelId, DacRegisterFile
from .errors import DuplicateChannelError, FramingError, ProtocolViolationError

FRAME_BITS = 24
MODE_WRITE = 0b11
MODE_NOOP = 0b00
NOOP_ADDRESS = 63  # explicit no-op sentinel; all-zero frames are also no-ops


class Line(IntEnum):
    SYNC = 0
    SCLK = 1
    SDI_A = 2
    SDI_B = 3
    LDAC = 4
    BUSY = 5


LINE_NAMES = tuple(l.name for l in Line)
_SDI_LINES = (int(Line.SDI_A), int(Line.SDI_B))


@dataclass(frozen=True)
class SerialFrame:
    """One 24-bit word on an SDI line."""

    mode: int
    address: int
    data: int

    def __post_init__(self):
        if self.mode not in (MODE_WRITE, MODE_NOOP):
            raise FramingError(f"unsupported mode bits 0b{self.mode:02b}")
        if not (0 <= self.address <= 39 or self.address == NOOP_ADDRESS):
            raise FramingError(f"address out of range: {self.address}")
        if not 0 <= self.data <= 0xFFFF:
            raise ValueError(f"data out of range: {self.data}")

    @classmethod
    def write(cls, channel_index: int, code: int) -> "SerialFrame":
        return cls(MODE_WRITE, channel_index, code)

    @classmethod
    def noop(cls) -> "SerialFrame":
        return cls(MODE_NOOP, 0, 0)  # all-zero word

    @property
    def is_noop(self) -> bool:
        return self.mode == MODE_NOOP

    def to_word(self) -> int:
        return (self.mode << 22) | (self.address << 16) | self.data

    @classmethod
    def from_word(cls, word: int) -> "SerialFrame":
        return cls((word >> 22) & 0b11, (word >> 16) & 0b111111, word & 0xFFFF)

    def to_bits(self) -> np.ndarray:
        word = self.to_word()
        return np.array([(word >> (FRAME_BITS - 1 - i)) & 1 for i in range(FRAME_BITS)],
                        dtype=np.uint8)


def _writes_of(packet):
    """Accept an UpdatePacket or a bare list of (ChannelId, code)."""
    return getattr(packet, "writes", packet)


def pair_writes(packet) -> list[tuple[SerialFrame, SerialFrame]]:
    """Group a packet's writes into (chip A, chip B) frame slots.

    The i-th A write and i-th B write share slot i; the shorter side is
    padded with NOOP frames.
    """
    writes = _writes_of(packet)
    seen = set()
    a_frames, b_frames = [], []
    for ch, code in writes:
        if ch in seen:
            raise DuplicateChannelError(f"channel {ch} written twice in one packet")
        seen.add(ch)
        frame = SerialFrame.write(ch.index, code)
        (a_frames if ch.chip == "A" else b_frames).append(frame)
    n = max(len(a_frames), len(b_frames), 0)
    a_frames += [SerialFrame.noop()] * (n - len(a_frames))
    b_frames += [SerialFrame.noop()] * (n - len(b_frames))
    return list(zip(a_frames, b_frames))


def encode_packet(packet) -> tuple[np.ndarray, np.ndarray, int]:
    """Encode one packet into the two SDI bitstreams.

    Returns (bits_a, bits_b, frame_count); both streams are uint8 arrays of
    length 24 * frame_count.
    """
    slots = pair_writes(packet)
    if not slots:
        return np.zeros(0, np.uint8), np.zeros(0, np.uint8), 0
    bits_a = np.concatenate([fa.to_bits() for fa, _ in slots])
    bits_b = np.concatenate([fb.to_bits() for _, fb in slots])
    return bits_a, bits_b, len(slots)


def decode_bitstream(bits, line: str = "A") -> list[SerialFrame]:
    """Split a bitstream into frames; exact inverse of encode_packet."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 1 or bits.size % FRAME_BITS:
        raise FramingError(f"bitstream length {bits.size} is not a multiple of {FRAME_BITS}")
    shifts = np.arange(FRAME_BITS - 1, -1, -1, dtype=np.int64)
    words = (bits.reshape(-1, FRAME_BITS).astype(np.int64) << shifts).sum(axis=1)
    return [SerialFrame.from_word(int(w)) for w in words]


@dataclass(frozen=True)
class TimingModel:
    """Bus timing parameters.

    Uploading n channel pairs takes packet_setup_s + n*(24/serial_clock_hz
    + frame_gap_s). After an LDAC strobe the controller waits
    ldac_to_next_packet_delay_s before starting the next upload, giving the
    DACs time to latch.
    """

    serial_clock_hz: float
    frame_gap_s: float
    packet_setup_s: float
    ldac_pulse_s: float
    ldac_to_next_packet_delay_s: float

    def __post_init__(self):
        for name in ("serial_clock_hz", "frame_gap_s", "packet_setup_s",
                     "ldac_pulse_s", "ldac_to_next_packet_delay_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def frame_time_s(self) -> float:
        return FRAME_BITS / self.serial_clock_hz

    @property
    def slot_time_s(self) -> float:
        return self.frame_time_s + self.frame_gap_s


# Unique affine fit through the measured upload times (40 pairs -> 60 us,
# 8 pairs -> 25 us) with a round 24 MHz bit clock: 1 us frames, 93.75 ns
# inter-frame gap, 16.25 us packet setup.
PAPER_NOMINAL_TIMING = TimingModel(
    serial_clock_hz=24e6,
    frame_gap_s=93.75e-9,
    packet_setup_s=16.25e-6,
    ldac_pulse_s=1e-6,
    ldac_to_next_packet_delay_s=1e-6,
)

TIMING_MODELS = {"paper-nominal": PAPER_NOMINAL_TIMING}


def upload_time(n_pairs: int, timing: TimingModel) -> float:
    """Seconds to upload n channel-pair frame slots."""
    if n_pairs < 0:
        raise ValueError("n_pairs must be >= 0")
    return timing.packet_setup_s + n_pairs * timing.slot_time_s


def packet_slot_count(packet) -> int:
    """Frame slots a packet occupies (max of per-chip write counts)."""
    writes = _writes_of(packet)
    n_a = sum(1 for ch, _ in writes if ch.chip == "A")
    return max(n_a, len(writes) - n_a)


class BusTrace:
    """Time-stamped digital levels on the six bus lines.

    Stored as parallel numpy arrays (time_ns int64, line uint8, level
    uint8), time-sorted with stable ordering for simultaneous events. SDI
    lines carry one event per transmitted bit, so noise injection can flip
    individual bits in place.
    """

    def __init__(self, times_ns, lines, levels):
        self.times_ns = np.asarray(times_ns, dtype=np.int64)
        self.lines = np.asarray(lines, dtype=np.uint8)
        self.levels = np.asarray(levels, dtype=np.uint8)
        if not (self.times_ns.shape == self.lines.shape == self.levels.shape):
            raise ValueError("trace columns must have equal length")
        if self.times_ns.size and np.any(np.diff(self.times_ns) < 0):
            order = np.argsort(self.times_ns, kind="stable")
            self.times_ns = self.times_ns[order]
            self.lines = self.lines[order]
            self.levels = self.levels[order]

    def __len__(self):
        return self.times_ns.size

    def line_events(self, line: Line) -> tuple[np.ndarray, np.ndarray]:
        sel = self.lines == int(line)
        return self.times_ns[sel], self.levels[sel]

    def copy(self) -> "BusTrace":
        return BusTrace(self.times_ns.copy(), self.lines.copy(), self.levels.copy())

    def low_duration_ns(self, line: Line) -> int:
        """Total time the line spends at level 0 (last event to trace end)."""
        t, lv = self.line_events(line)
        if t.size == 0:
            return 0
        # piecewise-constant between events; final segment contributes 0
        dt = np.diff(t)
        return int(dt[lv[:-1] == 0].sum())

    def to_csv(self, fh) -> None:
        for t, ln, lv in zip(self.times_ns, self.lines, self.levels):
            fh.write(f"{t},{LINE_NAMES[ln]},{lv}\n")

    @staticmethod
    def csv_header() -> str:
        return "time_ns,line,level"


class _TraceBuilder:
    def __init__(self):
        self._times = []
        self._lines = []
        self._levels = []

    def add(self, times_ns, line, levels):
        times_ns = np.asarray(times_ns, dtype=np.int64)
        self._times.append(times_ns)
        self._lines.append(np.full(times_ns.shape, int(line), dtype=np.uint8))
        self._levels.append(np.asarray(levels, dtype=np.uint8))

    def add_one(self, t_ns, line, level):
        self.add(np.array([t_ns], dtype=np.int64), line, np.array([level], dtype=np.uint8))

    def build(self) -> BusTrace:
        times = np.concatenate(self._times) if self._times else np.zeros(0, np.int64)
        lines = np.concatenate(self._lines) if self._lines else np.zeros(0, np.uint8)
        levels = np.concatenate(self._levels) if self._levels else np.zeros(0, np.uint8)
        order = np.argsort(times, kind="stable")
        return BusTrace(times[order], lines[order], levels[order])


def _ns(t_s: float) -> int:
    return int(round(t_s * 1e9))


def _emit_packet(builder: _TraceBuilder, packet, start_s: float, timing: TimingModel) -> float:
    """Emit SYNC/SCLK/SDI events for one packet upload; returns end time (s)."""
    bits_a, bits_b, n_slots = encode_packet(packet)
    t_clk = 1.0 / timing.serial_clock_hz
    end_s = start_s + upload_time(n_slots, timing)
    builder.add_one(_ns(start_s), Line.BUSY, 0)
    builder.add_one(_ns(end_s), Line.BUSY, 1)
    if n_slots == 0:
        return end_s
    frame_starts = start_s + timing.packet_setup_s + np.arange(n_slots) * timing.slot_time_s
    frame_ends = frame_starts + timing.frame_time_s
    builder.add(np.rint(frame_starts * 1e9), Line.SYNC, np.zeros(n_slots, np.uint8))
    builder.add(np.rint(frame_ends * 1e9), Line.SYNC, np.ones(n_slots, np.uint8))
    # one SDI event per bit; SCLK rises mid-bit (receiver samples on the rise)
    bit_starts = (frame_starts[:, None] + np.arange(FRAME_BITS) * t_clk).ravel()
    builder.add(np.rint(bit_starts * 1e9), Line.SDI_A, bits_a)
    builder.add(np.rint(bit_starts * 1e9), Line.SDI_B, bits_b)
    n_bits = n_slots * FRAME_BITS
    builder.add(np.rint((bit_starts + 0.5 * t_clk) * 1e9), Line.SCLK, np.ones(n_bits, np.uint8))
    builder.add(np.rint((bit_starts + 1.0 * t_clk) * 1e9), Line.SCLK, np.zeros(n_bits, np.uint8))
    return end_s


def simulate_session(waveform, timing: TimingModel, ldac_schedule) -> BusTrace:
    """Run a full upload/latch session and capture the bus trace.

    Packet 0 uploads at t=0; LDAC k latches packet k and triggers the
    upload of packet k+1 after the controller's latch delay. An LDAC that
    lands inside an upload window (BUSY low) raises ProtocolViolationError.
    """
    packets = getattr(waveform, "packets", waveform)
    ldac_schedule = list(ldac_schedule)
    if len(ldac_schedule) != len(packets):
        raise ValueError(
            f"need one LDAC per packet: {len(packets)} packets, {len(ldac_schedule)} LDACs")
    if any(b <= a for a, b in zip(ldac_schedule, ldac_schedule[1:])):
        raise ValueError("ldac_schedule must be strictly increasing")

    builder = _TraceBuilder()
    for line, idle in ((Line.SYNC, 1), (Line.SCLK, 0), (Line.SDI_A, 0),
                       (Line.SDI_B, 0), (Line.LDAC, 0), (Line.BUSY, 1)):
        builder.add_one(0, line, idle)

    start_s = 0.0
    for k, packet in enumerate(packets):
        end_s = _emit_packet(builder, packet, start_s, timing)
        t_ldac = ldac_schedule[k]
        if _ns(t_ldac) < _ns(end_s):
            raise ProtocolViolationError(
                f"LDAC {k} at {t_ldac * 1e6:.3f} us while packet {k} still uploading "
                f"(BUSY low until {end_s * 1e6:.3f} us)")
        builder.add_one(_ns(t_ldac), Line.LDAC, 1)
        builder.add_one(_ns(t_ldac + timing.ldac_pulse_s), Line.LDAC, 0)
        start_s = t_ldac + timing.ldac_to_next_packet_delay_s
    return builder.build()


def extract_sdi_bits(trace: BusTrace, line: Line) -> np.ndarray:
    """Sample an SDI line at every SCLK rising edge inside a SYNC-low window."""
    sync_t, sync_lv = trace.line_events(Line.SYNC)
    sclk_t, sclk_lv = trace.line_events(Line.SCLK)
    sdi_t, sdi_lv = trace.line_events(line)
    rises = sclk_t[sclk_lv == 1]
    if rises.size == 0:
        return np.zeros(0, np.uint8)
    # keep rises inside SYNC-low windows
    lows = sync_t[sync_lv == 0]
    highs = sync_t[sync_lv == 1]
    highs = highs[highs > (lows[0] if lows.size else np.iinfo(np.int64).max)]
    keep = np.zeros(rises.shape, dtype=bool)
    for lo, hi in zip(lows, highs):
        keep |= (rises >= lo) & (rises < hi)
    rises = rises[keep]
    idx = np.searchsorted(sdi_t, rises, side="right") - 1
    if np.any(idx < 0):
        raise FramingError("SCLK edge before any SDI level was driven")
    return sdi_lv[idx]


def decode_trace(trace: BusTrace) -> tuple[list[SerialFrame], list[SerialFrame]]:
    """Recover the frame sequences sent on both SDI lines."""
    return (decode_bitstream(extract_sdi_bits(trace, Line.SDI_A), "A"),
            decode_bitstream(extract_sdi_bits(trace, Line.SDI_B), "B"))


def replay_trace(trace: BusTrace, registers: DacRegisterFile | None = None
                 ) -> list[dict[ChannelId, int]]:
    """Apply a trace to a register file; returns latched codes per LDAC.

    Frames stage writes as they complete; each LDAC rising edge latches.
    This is the trace-level twin of applying packets via stage/latch.
    """
    registers = registers if registers is not None else DacRegisterFile()
    sync_t, sync_lv = trace.line_events(Line.SYNC)
    ldac_t, ldac_lv = trace.line_events(Line.LDAC)
    latch_times = ldac_t[ldac_lv == 1]
    # a rising edge only closes a frame if a falling edge opened one; the
    # idle-high level driven at t=0 is not a frame end
    falls = sync_t[sync_lv == 0]
    frame_end_times = sync_t[sync_lv == 1]
    frame_end_times = (frame_end_times[frame_end_times > falls[0]]
                       if falls.size else frame_end_times[:0])
    frames_a, frames_b = decode_trace(trace)
    if not (len(frames_a) == len(frames_b) == frame_end_times.size):
        raise FramingError("frame count does not match SYNC windows")

    snapshots = []
    fi = 0
    for t_latch in latch_times:
        while fi < frame_end_times.size and frame_end_times[fi] <= t_latch:
            for chip, frame in (("A", frames_a[fi]), ("B", frames_b[fi])):
                if not frame.is_noop:
                    registers.stage_write(ChannelId(chip, frame.address), frame.data)
            fi += 1
        registers.latch()
        snapshots.append(dict(registers.latched))
    return snapshots


def inject_noise(trace: BusTrace, flip_probability: float, rng_seed: int) -> BusTrace:
    """Flip each SDI bit independently with the given probability.

    Emulates RF-crosstalk corruption of the serial data; SYNC/SCLK stay
    clean. Deterministic for a fixed 64-bit seed.
    """
    if not 0.0 <= flip_probability <= 1.0:
        raise ValueError("flip_probability must be in [0, 1]")
    out = trace.copy()
    sel = (out.lines == _SDI_LINES[0]) | (out.lines == _SDI_LINES[1])
    n = int(sel.sum())
    if n == 0 or flip_probability == 0.0:
        return out
    rng = np.random.default_rng(np.uint64(rng_seed))
    flips = rng.random(n) < flip_probability
    levels = out.levels[sel]
    levels[flips] ^= 1
    out.levels[sel] = levels
    return out


@dataclass
class BerResult:
    """Bit-error statistics and the binomial upper confidence limit."""

    bits_total: int
    bit_errors: int
    frame_errors: int
    upper_bound: float
    confidence: float
    seed: int = 0
    flip_probability: float = 0.0

    def as_text(self) -> str:
        lines = [
            f"bits_total    {self.bits_total}",
            f"bit_errors    {self.bit_errors}",
            f"frame_errors  {self.frame_errors}",
            f"confidence    {self.confidence}",
            f"ber_upper_bound {self.upper_bound:.6e}",
            f"flip_probability {self.flip_probability:.6e}",
            f"seed          {self.seed}",
        ]
        return "\n".join(lines) + "\n"


def ber_upper_bound(bits_total: int, bit_errors: int, confidence: float) -> float:
    """Exact Clopper-Pearson upper confidence limit on the bit error rate."""
    if bits_total <= 0:
        raise ValueError("bits_total must be positive")
    if not 0 <= bit_errors <= bits_total:
        raise ValueError("bit_errors must be in [0, bits_total]")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    if bit_errors == bits_total:
        return 1.0
    return float(beta.ppf(confidence, bit_errors + 1, bits_total - bit_errors))


def ber_test(bits_total: int, flip_probability: float, confidence: float,
             seed: int, timing: TimingModel | None = None,
             pairs_per_packet: int = 40) -> BerResult:
    """Stream random packets through noisy sessions and bound the BER.

    Generates full-width packets, runs them through simulate_session,
    flips SDI bits with the given probability, and counts errors by
    comparing the sampled bits against what was sent. Runs in chunks so
    traces never grow large.
    """
    if bits_total <= 0:
        raise ValueError("bits_total must be positive")
    timing = timing or PAPER_NOMINAL_TIMING
    rng = np.random.default_rng(np.uint64(seed))
    bits_per_packet = 2 * FRAME_BITS * pairs_per_packet
    packets_per_chunk = 32

    sent = 0
    bit_errors = 0
    frame_errors = 0
    while sent < bits_total:
        n_packets = min(packets_per_chunk,
                        (bits_total - sent + bits_per_packet - 1) // bits_per_packet)
        packets = []
        for _ in range(n_packets):
            codes = rng.integers(0, 65536, size=2 * pairs_per_packet)
            writes = [(ChannelId(chip, i), int(codes[j * pairs_per_packet + i]))
                      for j, chip in enumerate(("A", "B"))
                      for i in range(pairs_per_packet)]
            packets.append(writes)
        period = upload_time(pairs_per_packet, timing) + timing.ldac_pulse_s
        first = upload_time(pairs_per_packet, timing)
        schedule = [first + k * (period + timing.ldac_to_next_packet_delay_s)
                    for k in range(n_packets)]
        trace = simulate_session(packets, timing, schedule)
        noisy = inject_noise(trace, flip_probability, int(rng.integers(0, 2**63)))
        for line in (Line.SDI_A, Line.SDI_B):
            clean_bits = extract_sdi_bits(trace, line)
            noisy_bits = extract_sdi_bits(noisy, line)
            errs = clean_bits != noisy_bits
            bit_errors += int(errs.sum())
            frame_errors += int(errs.reshape(-1, FRAME_BITS).any(axis=1).sum())
            sent += clean_bits.size
    # trailing packets may overshoot the requested count; scale is unchanged
    bound = ber_upper_bound(sent, bit_errors, confidence)
    return BerResult(bits_total=sent, bit_errors=bit_errors, frame_errors=frame_errors,
                     upper_bound=bound, confidence=confidence, seed=seed,
                     flip_probability=flip_probability)
