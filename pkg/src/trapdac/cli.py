"""Command-line front end.

Every subcommand is a thin client over the HTTP service: it builds one
request, posts it (in-process by default, to --server when given), and
writes the response out as CSV/report artifacts. Each artifact starts
with a provenance header (tool version, config digest, seed) so a figure
can be traced back to the exact invocation that produced it.

Exit codes: 0 success, 1 usage or input error, 2 physically infeasible
request (the service reports those as HTTP 409).
"""

import argparse
import asyncio
import json
import os
import re
import sys

import httpx

from . import provenance

_USAGE_EXIT = 1
_PHYSICS_EXIT = 2


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class ServiceClient:
    """Posts one request, either in-process over ASGI or to a remote server."""

    def __init__(self, server=None):
        self.server = server

    def post(self, path: str, payload: dict) -> httpx.Response:
        if self.server is not None:
            try:
                with httpx.Client(base_url=self.server, timeout=None) as client:
                    return client.post(path, json=payload)
            except httpx.HTTPError as exc:
                raise _CliError(_USAGE_EXIT, f"cannot reach {self.server}: {exc}")

        from .service import create_app

        async def go():
            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(transport=transport, timeout=None,
                                         base_url="http://service.local") as client:
                return await client.post(path, json=payload)

        return asyncio.run(go())


def _request(args, path: str, payload: dict) -> dict:
    resp = ServiceClient(args.server).post(path, payload)
    if resp.status_code == 200:
        return resp.json()
    try:
        detail = resp.json().get("detail", resp.text)
    except ValueError:
        detail = resp.text
    if isinstance(detail, list):  # pydantic validation report
        detail = "; ".join(str(e.get("msg", e)) for e in detail)
    code = _PHYSICS_EXIT if resp.status_code == 409 else _USAGE_EXIT
    raise _CliError(code, str(detail))


# -- artifact writing ---------------------------------------------------------


def _fmt(v) -> str:
    """Shortest exact decimal for a numeric cell; round-trips via float()."""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def _out_path(args, name: str) -> str:
    os.makedirs(args.outdir, exist_ok=True)
    return os.path.join(args.outdir, name)


def _write_report(args, name, config, body, seed=None) -> str:
    path = _out_path(args, name)
    with open(path, "w") as fh:
        fh.write(provenance.comment_header(config, seed))
        fh.write(body if body.endswith("\n") else body + "\n")
    return path


def _write_csv(args, name, config, header, rows, seed=None, extra_comments=()) -> str:
    path = _out_path(args, name)
    with open(path, "w") as fh:
        fh.write(provenance.comment_header(config, seed))
        for line in extra_comments:
            fh.write(f"# {line}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if not isinstance(v, str) else v
                              for v in row) + "\n")
    return path


def _write_json(args, name, config, key, obj, seed=None) -> str:
    # JSON cannot carry comment lines; provenance rides as the first key
    path = _out_path(args, name)
    wrapped = {"provenance": provenance.provenance_dict(config, seed), key: obj}
    with open(path, "w") as fh:
        json.dump(wrapped, fh, indent=1)
        fh.write("\n")
    return path


def _read_json_file(path: str, unwrap_key: str) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise _CliError(_USAGE_EXIT, f"cannot read {path}: {exc}")
    except ValueError as exc:
        raise _CliError(_USAGE_EXIT, f"{path} is not valid JSON: {exc}")
    if isinstance(obj, dict) and unwrap_key in obj:
        return obj[unwrap_key]
    return obj


def _read_text_file(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise _CliError(_USAGE_EXIT, f"cannot read {path}: {exc}")


def _load_voltages(path: str) -> dict:
    """Accept the voltages CSV written by solve-well, or a JSON object."""
    text = _read_text_file(path)
    body = [ln for ln in text.splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    if body and body[0].lstrip().startswith("{"):
        obj = json.loads("\n".join(body))
        return obj.get("voltages", obj)
    if not body or body[0].strip() != "channel,volts":
        raise _CliError(_USAGE_EXIT,
                        f"{path}: expected 'channel,volts' CSV or a JSON object")
    out = {}
    for ln in body[1:]:
        ch, v = ln.split(",")
        out[ch.strip()] = float(v)
    return out


def _geometry_payload(args):
    if getattr(args, "geometry", None) is None:
        return None
    return _read_json_file(args.geometry, "geometry")


# -- subcommand handlers ------------------------------------------------------


def _cmd_compile(args) -> int:
    timeline = _read_json_file(args.timeline, "timeline")
    payload = {"timeline": timeline, "timing": args.timing}
    if args.rate is not None:
        payload["rate_hz"] = args.rate
    config = {"subcommand": "compile", "payload": payload}
    body = _request(args, "/compile", payload)
    p1 = _write_json(args, "waveform.json", config, "waveform", body["waveform"])
    p2 = _write_report(args, "rate_report.txt", config, body["report"])
    print(f"packets {body['n_packets']}  writes {body['total_writes']}  "
          f"max rate {body['max_rate_hz']:.2f} Hz"
          + (f"  clamped {','.join(body['clamped_channels'])}"
             if body["clamped_channels"] else ""))
    print(f"wrote {p1}\nwrote {p2}")
    return 0


def _cmd_session(args) -> int:
    waveform = _read_json_file(args.waveform, "waveform")
    payload = {"waveform": waveform, "timing": args.timing, "include_trace": True}
    if args.rate is not None:
        payload["rate_hz"] = args.rate
    config = {"subcommand": "session", "payload": payload}
    body = _request(args, "/session", payload)
    path = _out_path(args, "trace.csv")
    with open(path, "w") as fh:
        fh.write(provenance.comment_header(config))
        fh.write(body["trace_csv"])  # header row comes with the payload
    p2 = _write_report(args, "session_report.txt", config, body["report"])
    print(f"events {body['n_events']}  duration {body['duration_ns']} ns  "
          f"replay verified {body['verified']}")
    print(f"wrote {path}\nwrote {p2}")
    return 0 if body["verified"] else _USAGE_EXIT


def _cmd_ber_test(args) -> int:
    payload = {"bits": args.bits, "flip_prob": args.flip_prob,
               "confidence": args.confidence, "seed": args.seed,
               "pairs_per_packet": args.pairs}
    config = {"subcommand": "ber-test", "payload": payload}
    body = _request(args, "/ber-test", payload)
    path = _write_report(args, "ber_report.txt", config, body["report"],
                         seed=args.seed)
    print(f"errors {body['bit_errors']}/{body['bits_sent']}  "
          f"upper bound {body['ber_upper_bound']:.3e} "
          f"at {body['confidence']:.0%} confidence")
    print(f"wrote {path}")
    return 0


def _cmd_filter_response(args) -> int:
    payload = {"config": args.filter, "f_min_hz": args.fmin, "f_max_hz": args.fmax,
               "n_freq": args.nfreq, "t_max_s": args.tmax, "n_time": args.ntime}
    config = {"subcommand": "filter-response", "payload": payload}
    body = _request(args, "/filter-response", payload)
    p1 = _write_csv(args, "bode.csv", config, "f_hz,gain_db,phase_deg", body["bode"])
    p2 = _write_csv(args, "step.csv", config, "t_s,v_out", body["step"])
    p3 = _write_report(args, "filter_report.txt", config, body["report"])
    print(f"{args.filter}: f3db {body['f3db_hz']:.1f} Hz  "
          f"dc group delay {body['dc_group_delay_s'] * 1e6:.2f} us")
    print(f"wrote {p1}\nwrote {p2}\nwrote {p3}")
    return 0


def _parse_stray(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise _CliError(_USAGE_EXIT, "--stray needs three comma-separated V/m values")
    return parts


def _cmd_solve_well(args) -> int:
    payload = {"geometry": _geometry_payload(args), "position_m": args.position,
               "axial_freq_hz": args.fz, "bound_v": args.bound}
    if args.stray is not None:
        payload["stray_field_v_per_m"] = _parse_stray(args.stray)
    config = {"subcommand": "solve-well", "payload": payload}
    body = _request(args, "/solve-well", payload)
    volts = body["voltages"]
    rows = [(ch, _fmt(volts[ch])) for ch in sorted(volts)]
    p1 = _write_csv(args, "voltages.csv", config, "channel,volts", rows)
    p2 = _write_report(args, "well_report.txt", config, body["report"])
    well = body["well"]
    print(f"axial {well['axial_freq_hz'] / 1e6:.4f} MHz  "
          f"radial {well['radial_freq_hz'][0] / 1e6:.4f}/"
          f"{well['radial_freq_hz'][1] / 1e6:.4f} MHz  "
          f"depth {well['depth_ev']:.4f} eV  max |V| {body['max_abs_voltage']:.3f}")
    print(f"wrote {p1}\nwrote {p2}")
    return 0


def _cmd_transport(args) -> int:
    payload = {"geometry": _geometry_payload(args), "start_m": args.start,
               "stop_m": args.stop, "speed_m_s": args.speed,
               "axial_freq_hz": args.fz, "update_rate_hz": args.rate,
               "filter": args.filter, "mode": args.mode, "profile": args.profile,
               "n_samples": args.samples,
               "convergence_check": not args.no_convergence_check}
    if args.dt is not None:
        payload["dt_s"] = args.dt
    if args.tail is not None:
        payload["settle_tail_s"] = args.tail
    config = {"subcommand": "transport", "payload": payload}
    body = _request(args, "/transport", payload)
    p1 = _write_csv(args, "trajectory.csv", config, body["trajectory_header"],
                    body["trajectory"])
    p2 = _write_report(args, "transport_report.txt", config, body["report"])
    print(f"survived {body['survived']}  quanta gained {body['quanta_gained']:.4f}  "
          f"depth {body['depth_ev']:.4f} eV")
    print(f"wrote {p1}\nwrote {p2}")
    return 0


def _cmd_modes(args) -> int:
    payload = {"n_ions": args.n, "axial_freq_hz": args.fz}
    config = {"subcommand": "modes", "payload": payload}
    body = _request(args, "/modes", payload)
    rows = list(enumerate(body["freqs_hz"]))
    extra = ()
    if body["spacing_m"] is not None:
        extra = (f"min_spacing_m {_fmt(body['spacing_m'])}",)
    path = _write_csv(args, "modes.csv", config, "mode_index,freq_hz", rows,
                      extra_comments=extra)
    print("  ".join(f"{f / 1e6:.4f} MHz" for f in body["freqs_hz"]))
    if body["spacing_m"] is not None:
        print(f"min spacing {body['spacing_m'] * 1e6:.4f} um")
    print(f"wrote {path}")
    return 0


def _cmd_heating_fit(args) -> int:
    payload = {"csv": _read_text_file(args.data)}
    config = {"subcommand": "heating-fit", "payload": payload}
    body = _request(args, "/heating-fit", payload)
    path = _write_report(args, "heating_report.txt", config, body["report"])
    print(f"heating rate {body['slope']:.4f} +/- {body['slope_stderr']:.4f} quanta/ms")
    print(f"wrote {path}")
    return 0


def _cmd_drift_fit(args) -> int:
    payload = {"csv": _read_text_file(args.data)}
    config = {"subcommand": "drift-fit", "payload": payload}
    body = _request(args, "/drift-fit", payload)
    path = _write_report(args, "drift_report.txt", config, body["report"])
    print(f"drift {body['slope']:.4f} +/- {body['slope_stderr']:.4f} Hz/hr  "
          f"({body['n_reloads']} reload markers)")
    print(f"wrote {path}")
    return 0


def _cmd_fieldmap(args) -> int:
    payload = {"geometry": _geometry_payload(args), "position_m": args.position,
               "axial_freq_hz": args.fz, "plane": args.plane,
               "lo1_m": args.lo1, "hi1_m": args.hi1,
               "lo2_m": args.lo2, "hi2_m": args.hi2,
               "n1": args.n1, "n2": args.n2, "fixed_m": args.fixed}
    if args.voltages is not None:
        payload["voltages"] = _load_voltages(args.voltages)
    config = {"subcommand": "fieldmap", "payload": payload}
    body = _request(args, "/fieldmap", payload)
    path = _write_csv(args, "fieldmap.csv", config, body["header"], body["rows"])
    print(f"{len(body['rows'])} grid points on the {args.plane} plane")
    print(f"wrote {path}")
    return 0


def _cmd_spectrum(args) -> int:
    payload = {"geometry": _geometry_payload(args), "position_m": args.position,
               "axial_freq_hz": args.fz, "carrier_hz": args.carrier,
               "order": args.order}
    config = {"subcommand": "spectrum", "payload": payload}
    body = _request(args, "/spectrum", payload)
    rows = [(_fmt(ln["offset_hz"]), _fmt(ln["freq_hz"]), ln["label"])
            for ln in body["lines"]]
    path = _write_csv(args, "spectrum.csv", config, "offset_hz,freq_hz,label", rows)
    print(f"{len(rows)} lines up to order {args.order}")
    print(f"wrote {path}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trapdac",
        description="DAC control-stack simulator and trap physics toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--outdir", default=os.environ.get("TRAPDAC_OUTDIR", "."),
                        help="artifact directory (default: $TRAPDAC_OUTDIR or cwd)")
    common.add_argument("--server", default=None,
                        help="base URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("compile", parents=[common],
                       help="quantize a voltage timeline into update packets")
    p.add_argument("--timeline", required=True, help="timeline JSON path")
    p.add_argument("--timing", default="paper-nominal", help="timing model name")
    p.add_argument("--rate", type=float, default=None,
                   help="also check feasibility at this update rate (Hz)")
    p.set_defaults(func=_cmd_compile)

    p = sub.add_parser("session", parents=[common],
                       help="play a waveform onto the bus and verify the trace")
    p.add_argument("--waveform", required=True, help="compiled waveform JSON path")
    p.add_argument("--timing", default="paper-nominal")
    p.add_argument("--rate", type=float, default=None, help="LDAC rate (Hz)")
    p.set_defaults(func=_cmd_session)

    p = sub.add_parser("ber-test", parents=[common],
                       help="stress the link and bound the bit error rate")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--flip-prob", type=float, default=0.0, dest="flip_prob")
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=40,
                   help="channel pairs per packet (1-40)")
    p.set_defaults(func=_cmd_ber_test)

    p = sub.add_parser("filter-response", parents=[common],
                       help="Bode and step response of an output filter config")
    p.add_argument("--filter", default="nominal",
                   help="filter config: nominal, buffered, or measured")
    p.add_argument("--fmin", type=float, default=100.0)
    p.add_argument("--fmax", type=float, default=1e6)
    p.add_argument("--nfreq", type=int, default=200)
    p.add_argument("--tmax", type=float, default=200e-6)
    p.add_argument("--ntime", type=int, default=400)
    p.set_defaults(func=_cmd_filter_response)

    p = sub.add_parser("solve-well", parents=[common],
                       help="electrode voltages for a well at a target position")
    p.add_argument("--position", type=float, default=0.0, help="axial target (m)")
    p.add_argument("--fz", type=float, default=1.5e6, help="axial frequency (Hz)")
    p.add_argument("--stray", default=None, help="stray field Ex,Ey,Ez (V/m)")
    p.add_argument("--bound", type=float, default=10.0, help="|V| limit per channel")
    p.add_argument("--geometry", default=None, help="geometry JSON path")
    p.set_defaults(func=_cmd_solve_well)

    p = sub.add_parser("transport", parents=[common],
                       help="integrate ion motion through a shuttling waveform")
    p.add_argument("--start", type=float, required=True, help="start position (m)")
    p.add_argument("--stop", type=float, required=True, help="stop position (m)")
    p.add_argument("--speed", type=float, default=1.0, help="mean speed (m/s)")
    p.add_argument("--fz", type=float, default=1.5e6)
    p.add_argument("--rate", type=float, default=38000.0, help="update rate (Hz)")
    p.add_argument("--filter", default="measured")
    p.add_argument("--mode", default="secular", help="secular or full_rf")
    p.add_argument("--profile", default="linear", help="linear or scurve")
    p.add_argument("--dt", type=float, default=None, help="integrator step (s)")
    p.add_argument("--tail", type=float, default=None, help="settle tail (s)")
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--no-convergence-check", action="store_true")
    p.add_argument("--geometry", default=None)
    p.set_defaults(func=_cmd_transport)

    p = sub.add_parser("modes", parents=[common],
                       help="normal-mode frequencies of a trapped ion chain")
    p.add_argument("--n", type=int, default=2, help="ion count")
    p.add_argument("--fz", type=float, default=1.5e6)
    p.set_defaults(func=_cmd_modes)

    p = sub.add_parser("heating-fit", parents=[common],
                       help="heating rate from sideband ratios vs delay")
    p.add_argument("--data", required=True,
                   help="CSV: delay_ms,i_red,i_blue[,sigma_red,sigma_blue]")
    p.set_defaults(func=_cmd_heating_fit)

    p = sub.add_parser("drift-fit", parents=[common],
                       help="linear drift of a mode frequency over hours")
    p.add_argument("--data", required=True,
                   help="CSV: time_hr,freq_hz[,reload_flag]")
    p.set_defaults(func=_cmd_drift_fit)

    p = sub.add_parser("fieldmap", parents=[common],
                       help="potential map on a plane through the trap")
    p.add_argument("--plane", default="xz", choices=["xy", "xz", "yz"])
    p.add_argument("--position", type=float, default=0.0,
                   help="axial well target when --voltages is absent (m)")
    p.add_argument("--fz", type=float, default=1.5e6)
    p.add_argument("--voltages", default=None,
                   help="voltages file (solve-well CSV or JSON object)")
    p.add_argument("--lo1", type=float, default=-200e-6)
    p.add_argument("--hi1", type=float, default=200e-6)
    p.add_argument("--lo2", type=float, default=20e-6)
    p.add_argument("--hi2", type=float, default=160e-6)
    p.add_argument("--n1", type=int, default=41)
    p.add_argument("--n2", type=int, default=41)
    p.add_argument("--fixed", type=float, default=0.0,
                   help="coordinate of the third axis (m)")
    p.add_argument("--geometry", default=None)
    p.set_defaults(func=_cmd_fieldmap)

    p = sub.add_parser("spectrum", parents=[common],
                       help="motional sideband ladder for a well")
    p.add_argument("--position", type=float, default=0.0)
    p.add_argument("--fz", type=float, default=1.5e6)
    p.add_argument("--carrier", type=float, default=0.0,
                   help="carrier frequency the offsets ride on (Hz)")
    p.add_argument("--order", type=int, default=1, choices=[0, 1, 2])
    p.add_argument("--geometry", default=None)
    p.set_defaults(func=_cmd_spectrum)

    p = sub.add_parser("serve", parents=[common],
                       help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    # stock argparse only treats -123 / -1.5 as values, not -390e-6; widen
    # the matcher so positions in scientific notation parse without '='
    neg = re.compile(r"^-(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")
    parser._negative_number_matcher = neg
    for sp in sub.choices.values():
        sp._negative_number_matcher = neg

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; 2 is reserved for infeasible
        # physics here, so remap (--help keeps its 0)
        return 0 if exc.code == 0 else _USAGE_EXIT
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
