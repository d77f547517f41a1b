"""HTTP face of the toolkit.

Each endpoint wraps one pipeline from the core package. Malformed input
maps to 400, well-formed but physically impossible requests to 409, so
clients can tell usage errors from infeasibility without parsing text.
"""

import io
import json
import math

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, analysis, iondyn, rcfilter, serialbus, trapfield, wavecomp
from ..constants import CA40
from ..dacmodel import ChannelId, code_to_voltage
from ..errors import SimulationError
from . import schemas as S

_GEOMETRY_CACHE = {}


def _timing(name: str) -> serialbus.TimingModel:
    try:
        return serialbus.TIMING_MODELS[name]
    except KeyError:
        raise ValueError(
            f"unknown timing model {name!r}; have {sorted(serialbus.TIMING_MODELS)}")


def _filter(name: str) -> rcfilter.FilterParams:
    try:
        return rcfilter.FILTER_CONFIGS[name]
    except KeyError:
        raise ValueError(
            f"unknown filter config {name!r}; have {sorted(rcfilter.FILTER_CONFIGS)}")


def _geometry(obj) -> trapfield.ElectrodeGeometry:
    if obj is None:
        if "bundled" not in _GEOMETRY_CACHE:
            _GEOMETRY_CACHE["bundled"] = trapfield.reference_geometry()
        return _GEOMETRY_CACHE["bundled"]
    return trapfield.ElectrodeGeometry.from_json(json.dumps(obj))


def _well_summary(geometry, well) -> S.WellSummary:
    q = trapfield.mathieu_q(geometry, well.position, "z")
    return S.WellSummary(
        position_m=[float(c) for c in well.position],
        axial_freq_hz=well.axial_freq_hz,
        radial_freq_hz=list(well.radial_freqs_hz),
        depth_ev=well.depth_ev,
        mathieu_q=float(q),
    )


def create_app() -> FastAPI:
    app = FastAPI(title="trapdac", version=__version__)

    @app.exception_handler(ValueError)
    async def _bad_request(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(SimulationError)
    async def _infeasible(request: Request, exc: SimulationError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.get("/health", response_model=S.HealthResponse)
    def health():
        return S.HealthResponse(status="ok", version=__version__)

    @app.post("/compile", response_model=S.CompileResponse)
    def compile_endpoint(req: S.CompileRequest):
        timing = _timing(req.timing)
        timeline = wavecomp.VoltageTimeline.from_json(json.dumps(req.timeline))
        waveform = wavecomp.compile_timeline(timeline)
        report = wavecomp.max_update_rate(waveform, timing)
        if req.rate_hz is not None:
            # raises InfeasibleRateError when the rate cannot be met
            wavecomp.ldac_schedule(waveform, timing, req.rate_hz)
        return S.CompileResponse(
            waveform=json.loads(waveform.to_json()),
            n_packets=waveform.n_steps,
            total_writes=waveform.total_writes(),
            clamped_channels=[str(c) for c in waveform.clamped_channels],
            max_rate_hz=report.max_rate_hz,
            min_step_period_s=report.min_step_period_s,
            bottleneck_step=report.bottleneck_step,
            bottleneck_pairs=report.bottleneck_pairs,
            feasible=report.feasible,
            report=report.as_text(),
        )

    @app.post("/session", response_model=S.SessionResponse)
    def session_endpoint(req: S.SessionRequest):
        timing = _timing(req.timing)
        waveform = wavecomp.Waveform.from_json(json.dumps(req.waveform))
        trace = wavecomp.simulate_waveform_session(waveform, timing, req.rate_hz)

        snapshots = serialbus.replay_trace(trace)
        expected = wavecomp.replay(waveform)
        verified = len(snapshots) == expected.n_steps
        if verified:
            for i, snap in enumerate(snapshots):
                for ch, code in snap.items():
                    if code_to_voltage(code) != expected.channels[ch][i]:
                        verified = False
                        break
                if not verified:
                    break

        csv_text = None
        if req.include_trace:
            buf = io.StringIO()
            buf.write(serialbus.BusTrace.csv_header() + "\n")
            trace.to_csv(buf)
            csv_text = buf.getvalue()
        duration = int(trace.times_ns[-1]) if len(trace) else 0
        report = "\n".join([
            f"packets            {waveform.n_steps}",
            f"trace_events       {len(trace)}",
            f"duration_ns        {duration}",
            f"replay_verified    {verified}",
        ]) + "\n"
        return S.SessionResponse(n_events=len(trace), n_packets=waveform.n_steps,
                                 duration_ns=duration, verified=verified,
                                 trace_csv=csv_text, report=report)

    @app.post("/ber-test", response_model=S.BerTestResponse)
    def ber_endpoint(req: S.BerTestRequest):
        result = serialbus.ber_test(req.bits, req.flip_prob, req.confidence,
                                    req.seed, pairs_per_packet=req.pairs_per_packet)
        return S.BerTestResponse(
            bits_sent=result.bits_total, bit_errors=result.bit_errors,
            frame_errors=result.frame_errors, ber_upper_bound=result.upper_bound,
            confidence=result.confidence, report=result.as_text())

    @app.post("/filter-response", response_model=S.FilterResponseResponse)
    def filter_endpoint(req: S.FilterResponseRequest):
        params = _filter(req.config)
        if req.f_max_hz <= req.f_min_hz:
            raise ValueError("f_max_hz must exceed f_min_hz")
        bode = rcfilter.bode_rows(params, req.f_min_hz, req.f_max_hz, req.n_freq)
        step = rcfilter.step_rows(params, req.t_max_s, req.n_time)
        f3 = rcfilter.f3db(params)
        delay = rcfilter.dc_group_delay(params)
        report = "\n".join([
            f"config             {req.config}",
            f"r_per_stage_ohm    {params.r_per_stage:.6g}",
            f"c_per_stage_f      {params.c_per_stage:.6g}",
            f"buffered           {params.buffered}",
            f"f3db_hz            {f3:.6g}",
            f"dc_group_delay_s   {delay:.6g}",
        ]) + "\n"
        return S.FilterResponseResponse(
            config=req.config, f3db_hz=f3, dc_group_delay_s=delay,
            bode=[[float(v) for v in row] for row in bode],
            step=[[float(v) for v in row] for row in step], report=report)

    @app.post("/solve-well", response_model=S.SolveWellResponse)
    def solve_endpoint(req: S.SolveWellRequest):
        geometry = _geometry(req.geometry)
        basis = trapfield.BasisField(geometry)
        stray = req.stray_field_v_per_m
        if stray is not None and len(stray) != 3:
            raise ValueError("stray_field_v_per_m must have three components")
        volts = trapfield.solve_voltages(
            geometry, req.position_m, 2.0 * math.pi * req.axial_freq_hz,
            stray_field=stray, bound_v=req.bound_v, basis=basis)
        nil = trapfield.find_rf_nil(geometry, req.position_m, basis)
        well = trapfield.find_well(geometry, volts, nil, basis=basis)
        summary = _well_summary(geometry, well)
        vmax = max(abs(v) for v in volts.values())
        report = well.as_text() + f"max_abs_voltage_v  {vmax:.6f}\n"
        return S.SolveWellResponse(
            voltages={str(ch): v for ch, v in volts.items()},
            max_abs_voltage=vmax, well=summary, report=report)

    @app.post("/fieldmap", response_model=S.FieldMapResponse)
    def fieldmap_endpoint(req: S.FieldMapRequest):
        geometry = _geometry(req.geometry)
        if req.voltages is not None:
            volts = {ChannelId.parse(ch): v for ch, v in req.voltages.items()}
        else:
            volts = trapfield.solve_voltages(
                geometry, req.position_m, 2.0 * math.pi * req.axial_freq_hz)
        rows = trapfield.field_map_rows(
            geometry, volts, req.plane, req.lo1_m, req.hi1_m,
            req.lo2_m, req.hi2_m, req.n1, req.n2, req.fixed_m)
        header = f"{req.plane[0]}_m,{req.plane[1]}_m,dc_v,pseudo_ev,total_ev"
        return S.FieldMapResponse(
            header=header, rows=[[float(v) for v in r] for r in rows])

    @app.post("/transport", response_model=S.TransportResponse)
    def transport_endpoint(req: S.TransportRequest):
        geometry = _geometry(req.geometry)
        params = _filter(req.filter)
        plan = iondyn.plan_transport(
            geometry, req.start_m, req.stop_m, req.speed_m_s,
            2.0 * math.pi * req.axial_freq_hz, req.update_rate_hz,
            profile=req.profile)
        result = iondyn.integrate(
            plan, params, mode=req.mode, dt_s=req.dt_s,
            n_samples=req.n_samples, settle_tail_s=req.settle_tail_s,
            convergence_check=req.convergence_check)
        h = result.halving_energy_change
        return S.TransportResponse(
            survived=result.survived, quanta_gained=result.quanta_gained,
            final_energy_j=result.final_secular_energy_j,
            depth_ev=result.depth_ev,
            halving_energy_change=None if h != h else h,
            converged=result.converged, n_update_steps=plan.n_steps,
            dt_s=result.dt_s, trajectory_header=iondyn.trajectory_header(),
            trajectory=[[float(v) for v in row]
                        for row in iondyn.trajectory_rows(result)],
            report=result.as_text() + "\n")

    @app.post("/modes", response_model=S.ModesResponse)
    def modes_endpoint(req: S.ModesRequest):
        w = 2.0 * math.pi * req.axial_freq_hz
        freqs = iondyn.normal_modes(req.n_ions, CA40, w) / (2.0 * math.pi)
        spacing = (iondyn.equilibrium_spacing(CA40, w, req.n_ions)
                   if req.n_ions >= 2 else None)
        lines = [f"n_ions             {req.n_ions}",
                 f"axial_freq_hz      {req.axial_freq_hz:.6g}"]
        if spacing is not None:
            lines.append(f"min_spacing_m      {spacing:.6e}")
        lines.append("mode_index,freq_hz")
        lines += [f"{i},{f:.6f}" for i, f in enumerate(freqs)]
        return S.ModesResponse(freqs_hz=[float(f) for f in freqs],
                               spacing_m=spacing,
                               report="\n".join(lines) + "\n")

    @app.post("/heating-fit", response_model=S.FitResponse)
    def heating_endpoint(req: S.HeatingFitRequest):
        points = analysis.parse_sidebands_csv(req.csv)
        fit = analysis.heating_rate_fit(points)
        report = fit.as_text(slope_unit="quanta/ms", x_name="delay_ms") + "\n"
        return S.FitResponse(slope=fit.slope, intercept=fit.intercept,
                             slope_stderr=fit.slope_stderr,
                             intercept_stderr=fit.intercept_stderr,
                             n_points=fit.n_points, report=report)

    @app.post("/drift-fit", response_model=S.FitResponse)
    def drift_endpoint(req: S.DriftFitRequest):
        times, freqs, reloads = analysis.parse_drift_csv(req.csv)
        fit = analysis.drift_fit(times, freqs)
        n_rel = int(np.sum(reloads))
        report = (fit.as_text(slope_unit="Hz/hr", x_name="time_hr")
                  + f"\nreload_markers   {n_rel} (metadata only)\n")
        return S.FitResponse(slope=fit.slope, intercept=fit.intercept,
                             slope_stderr=fit.slope_stderr,
                             intercept_stderr=fit.intercept_stderr,
                             n_points=fit.n_points, n_reloads=n_rel,
                             report=report)

    @app.post("/spectrum", response_model=S.SpectrumResponse)
    def spectrum_endpoint(req: S.SpectrumRequest):
        geometry = _geometry(req.geometry)
        basis = trapfield.BasisField(geometry)
        volts = trapfield.solve_voltages(
            geometry, req.position_m, 2.0 * math.pi * req.axial_freq_hz,
            basis=basis)
        nil = trapfield.find_rf_nil(geometry, req.position_m, basis)
        well = trapfield.find_well(geometry, volts, nil, basis=basis,
                                   compute_depth=False)
        lines = analysis.sideband_spectrum(well, req.carrier_hz, req.order)
        report_lines = ["offset_hz,freq_hz,label"]
        report_lines += [f"{ln.offset_hz:.3f},{ln.freq_hz:.3f},{ln.label}"
                         for ln in lines]
        return S.SpectrumResponse(
            lines=[S.SpectrumLineOut(offset_hz=ln.offset_hz, freq_hz=ln.freq_hz,
                                     label=ln.label) for ln in lines],
            report="\n".join(report_lines) + "\n")

    return app
