"""Request and response bodies for the HTTP service.

Requests mirror the CLI subcommands one to one; responses carry both the
machine-readable fields and a preformatted text report so the thin client
only has to stamp provenance and write files.
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -- serial bus / waveforms --------------------------------------------------

class CompileRequest(_Strict):
    timeline: dict = Field(description="voltage timeline object (row-major)")
    timing: str = "paper-nominal"
    rate_hz: Optional[float] = Field(default=None, gt=0)


class CompileResponse(_Strict):
    waveform: dict
    n_packets: int
    total_writes: int
    clamped_channels: list[str]
    max_rate_hz: float
    min_step_period_s: float
    bottleneck_step: int
    bottleneck_pairs: int
    feasible: bool
    report: str


class SessionRequest(_Strict):
    waveform: dict
    timing: str = "paper-nominal"
    rate_hz: Optional[float] = Field(default=None, gt=0)
    include_trace: bool = True


class SessionResponse(_Strict):
    n_events: int
    n_packets: int
    duration_ns: int
    verified: bool
    trace_csv: Optional[str]
    report: str


class BerTestRequest(_Strict):
    bits: int = Field(gt=0)
    flip_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    confidence: float = Field(default=0.95, gt=0.0, lt=1.0)
    seed: int = 0
    pairs_per_packet: int = Field(default=40, ge=1, le=40)


class BerTestResponse(_Strict):
    bits_sent: int
    bit_errors: int
    frame_errors: int
    ber_upper_bound: float
    confidence: float
    report: str


# -- filters ------------------------------------------------------------------

class FilterResponseRequest(_Strict):
    config: str = "nominal"
    f_min_hz: float = Field(default=100.0, gt=0)
    f_max_hz: float = Field(default=1e6, gt=0)
    n_freq: int = Field(default=200, ge=2, le=100000)
    t_max_s: float = Field(default=200e-6, gt=0)
    n_time: int = Field(default=400, ge=2, le=100000)


class FilterResponseResponse(_Strict):
    config: str
    f3db_hz: float
    dc_group_delay_s: float
    bode: list[list[float]]      # f_hz, gain_db, phase_deg
    step: list[list[float]]      # t_s, v_out for unit step
    report: str


# -- trap fields ---------------------------------------------------------------

class SolveWellRequest(_Strict):
    geometry: Optional[dict] = None
    position_m: float = 0.0
    axial_freq_hz: float = Field(default=1.5e6, gt=0)
    stray_field_v_per_m: Optional[list[float]] = None
    bound_v: float = Field(default=10.0, gt=0)


class WellSummary(_Strict):
    position_m: list[float]
    axial_freq_hz: float
    radial_freq_hz: list[float]
    depth_ev: float
    mathieu_q: float


class SolveWellResponse(_Strict):
    voltages: dict[str, float]
    max_abs_voltage: float
    well: WellSummary
    report: str


class FieldMapRequest(_Strict):
    geometry: Optional[dict] = None
    voltages: Optional[dict[str, float]] = None
    position_m: float = 0.0          # solve target when voltages absent
    axial_freq_hz: float = Field(default=1.5e6, gt=0)
    plane: str = "xz"
    lo1_m: float = -200e-6
    hi1_m: float = 200e-6
    lo2_m: float = 20e-6
    hi2_m: float = 160e-6
    n1: int = Field(default=41, ge=2, le=2000)
    n2: int = Field(default=41, ge=2, le=2000)
    fixed_m: float = 0.0


class FieldMapResponse(_Strict):
    header: str
    rows: list[list[float]]


# -- dynamics -------------------------------------------------------------------

class TransportRequest(_Strict):
    geometry: Optional[dict] = None
    start_m: float = 0.0
    stop_m: float = 100e-6
    speed_m_s: float = Field(default=1.0, gt=0)
    axial_freq_hz: float = Field(default=1.5e6, gt=0)
    update_rate_hz: float = Field(default=38000.0, gt=0)
    filter: str = "measured"
    mode: str = "secular"
    profile: str = "linear"
    dt_s: Optional[float] = Field(default=None, gt=0)
    settle_tail_s: Optional[float] = Field(default=None, ge=0)
    n_samples: int = Field(default=400, ge=2, le=20000)
    convergence_check: bool = True


class TransportResponse(_Strict):
    survived: bool
    quanta_gained: float
    final_energy_j: float
    depth_ev: float
    halving_energy_change: Optional[float]
    converged: bool
    n_update_steps: int
    dt_s: float
    trajectory_header: str
    trajectory: list[list[float]]
    report: str


class ModesRequest(_Strict):
    n_ions: int = Field(default=2, ge=1, le=50)
    axial_freq_hz: float = Field(default=1.5e6, gt=0)


class ModesResponse(_Strict):
    freqs_hz: list[float]
    spacing_m: Optional[float]
    report: str


# -- measurement reductions -----------------------------------------------------

class HeatingFitRequest(_Strict):
    csv: str


class DriftFitRequest(_Strict):
    csv: str


class FitResponse(_Strict):
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    n_points: int
    n_reloads: Optional[int] = None
    report: str


class SpectrumRequest(_Strict):
    geometry: Optional[dict] = None
    position_m: float = 0.0
    axial_freq_hz: float = Field(default=1.5e6, gt=0)
    carrier_hz: float = 0.0
    order: int = Field(default=1, ge=0, le=2)


class SpectrumLineOut(_Strict):
    offset_hz: float
    freq_hz: float
    label: str


class SpectrumResponse(_Strict):
    lines: list[SpectrumLineOut]
    report: str


class HealthResponse(_Strict):
    status: str
    version: str
