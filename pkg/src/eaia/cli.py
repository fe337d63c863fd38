"""``eaia`` command-line entry point.

Exit codes: 0 ok, 1 usage, 2 state or scenario error, 3 protocol failure,
4 scenario assertion failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import random
import secrets
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .authority import Authority
from .costmodel import (
    PrimitiveCosts, attack_sweep, avg_auth_time, bench_primitives, load_schemes,
    monte_carlo_auth_time, scheme_attack_model, table_iv, table_v, table_vii,
)
from .errors import AuthorityError, EAIAError, ProtocolError, ScenarioInvalid, StateError
from .group import get_curve, random_nonzero_scalar
from .netsim import adversary_action, bundled_scenarios, load_scenario, run_scenario
from .protocol import (
    DEFAULT_WINDOW_MS, RegistrationReply, Vehicle, real_id_from_vin, verify_registration,
)
from .wire import field_spans, message_type

EXIT_OK, EXIT_USAGE, EXIT_STATE, EXIT_PROTOCOL, EXIT_ASSERT = 0, 1, 2, 3, 4
CONFIG_KEYS = {"backend", "seed", "window_ms", "format", "state_dir", "out"}
FORMATS = ("text", "json", "csv")
VEHICLE_DIR = "vehicles"
DEFAULT_P_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
FIELD_MESSAGE = {"requester_id": "request", "requester_pub_sum": "request",
                 "B": "challenge", "N": "challenge", "sigma": "challenge", "T_a": "challenge",
                 "D": "response", "eta": "response", "T_b": "response"}


class UsageError(Exception):
    pass


class CliFailure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config -----------------------------------------------------------------------

def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--backend", choices=("production", "toy"), default=d)
    p.add_argument("--seed", type=int, default=d, help="make every random choice reproducible")
    p.add_argument("--window-ms", type=int, default=d, dest="window_ms",
                   help=f"freshness window in ms (default {DEFAULT_WINDOW_MS})")
    p.add_argument("--format", choices=FORMATS, default=d)
    p.add_argument("--state-dir", default=d, dest="state_dir",
                   help="authority state directory (falls back to $EAIA_STATE_DIR)")
    p.add_argument("--out", default=d, help="output file, or report directory for sim")
    p.add_argument("--config", default=d, help="JSON file with any of the global settings")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def resolve_config(ns):
    """Merge defaults < config file < environment < flags, validating as we go."""
    cfg = {"backend": "production", "seed": None, "window_ms": DEFAULT_WINDOW_MS,
           "format": "text", "state_dir": None, "out": None}
    path = getattr(ns, "config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        extra = set(data) - CONFIG_KEYS
        if extra:
            raise UsageError(f"unknown config keys: {sorted(extra)}")
        cfg.update(data)
    if cfg["state_dir"] is None and os.environ.get("EAIA_STATE_DIR"):
        cfg["state_dir"] = os.environ["EAIA_STATE_DIR"]
    for k in CONFIG_KEYS:
        v = getattr(ns, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["backend"] not in ("production", "toy"):
        raise UsageError(f"backend must be production or toy, not {cfg['backend']!r}")
    if cfg["format"] not in FORMATS:
        raise UsageError(f"format must be one of {FORMATS}")
    if not isinstance(cfg["window_ms"], int) or cfg["window_ms"] <= 0:
        raise UsageError("window_ms must be a positive integer")
    if cfg["seed"] is not None and not isinstance(cfg["seed"], int):
        raise UsageError("seed must be an integer")
    cfg["verbose"] = bool(getattr(ns, "verbose", False))
    cfg["explicit"] = {k for k in CONFIG_KEYS if getattr(ns, k, None) is not None}
    return cfg


def _rng(cfg, label):
    if cfg["seed"] is None:
        return secrets.SystemRandom()
    return random.Random(f"{cfg['seed']}:{label}")


def _state_dir(cfg):
    if not cfg["state_dir"]:
        raise UsageError("no state directory: pass --state-dir or set EAIA_STATE_DIR")
    return Path(cfg["state_dir"])


# -- output -------------------------------------------------------------------------

def dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def dump_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) if isinstance(v, bool) else v for k, v in r.items()})
    return buf.getvalue()


def dump_text_table(rows):
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def _cell(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def emit_rows(rows, cfg, out=None):
    fmt = cfg["format"]
    text = dump_json(rows) if fmt == "json" else dump_csv(rows) if fmt == "csv" else dump_text_table(rows)
    _write(text, out or cfg["out"])


def _write(text, path):
    if path:
        _atomic_write(Path(path), text)
    else:
        sys.stdout.write(text)


def _atomic_write(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# -- vehicle key files ------------------------------------------------------------------

def _vehicle_path(state, vin):
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in vin)
    return state / VEHICLE_DIR / f"{safe}.json"


def _save_vehicle(state, vin, x, reply, params):
    path = _vehicle_path(state, vin)
    path.parent.mkdir(exist_ok=True)
    data = {"vin": vin, "x": f"{x:x}", "y": f"{reply.y:x}", "R": reply.R.encode().hex(),
            "Y": reply.Y.encode().hex(), "id": reply.id.hex()}
    _atomic_write(path, dump_json(data))
    os.chmod(path, 0o600)


def _load_vehicle(state, vin, auth, window, rng):
    path = _vehicle_path(state, vin)
    try:
        data = json.loads(path.read_text())
        curve = auth.params.curve
        reply = RegistrationReply(y=int(data["y"], 16), R=curve.decode_point(bytes.fromhex(data["R"])),
                                  Y=curve.decode_point(bytes.fromhex(data["Y"])),
                                  id=bytes.fromhex(data["id"]))
        keys = verify_registration(auth.params, reply, int(data["x"], 16))
    except FileNotFoundError:
        raise StateError(f"vehicle {vin!r} is not registered in {state}") from None
    except (OSError, KeyError, ValueError) as exc:
        raise StateError(f"corrupt key file {path}: {exc}") from None
    except ProtocolError as exc:
        raise StateError(f"key file {path} fails verification: {exc}") from None
    return Vehicle(vin, auth.params, keys, auth.registry_lookup, window, rng)


def _registered_vins(state):
    out = []
    for p in (state / VEHICLE_DIR).glob("*.json"):
        try:
            out.append(json.loads(p.read_text())["vin"])
        except (OSError, KeyError, ValueError):
            continue
    return out


# -- subcommands ------------------------------------------------------------------------

def cmd_setup(args, cfg):
    state = _state_dir(cfg)
    if (state / "authority.log").exists() and not args.force:
        raise StateError(f"{state} already holds authority state (use --force to overwrite)")
    curve = get_curve(cfg["backend"])
    auth = Authority.setup(curve, _rng(cfg, "setup"), state_dir=state)
    vdir = state / VEHICLE_DIR
    if vdir.exists():
        for p in vdir.glob("*.json"):
            p.unlink()
    info = {"state_dir": str(state), "curve": curve.name,
            "P_pub": auth.params.P_pub.encode().hex()}
    _report_obj(info, cfg)
    return EXIT_OK


def cmd_register(args, cfg):
    state = _state_dir(cfg)
    auth = Authority.load(state)
    params = auth.params
    rng = _rng(cfg, f"vehicle:{args.vin}")
    x = random_nonzero_scalar(params.curve, rng)
    rid = real_id_from_vin(args.vin, params)
    reply = auth.register(rid, x * params.P, _rng(cfg, f"register:{args.vin}"),
                          now=0 if cfg["seed"] is not None else int(time.time() * 1000))
    verify_registration(params, reply, x)
    _save_vehicle(state, args.vin, x, reply, params)
    _report_obj({"vin": args.vin, "pseudonym": reply.id.hex(), "X": (x * params.P).encode().hex(),
                 "Y": reply.Y.encode().hex(), "R": reply.R.encode().hex()}, cfg)
    return EXIT_OK


def _describe(frame):
    """Public field values of a frame, hex-encoded."""
    return {name: frame[start:end].hex() for name, (start, end) in field_spans(frame).items()}


def cmd_auth_demo(args, cfg):
    state = _state_dir(cfg)
    auth = Authority.load(state)
    vins = sorted(_registered_vins(state))
    challenger_vin = args.challenger or (vins[0] if vins else None)
    requester_vin = args.requester or next((v for v in vins if v != challenger_vin), None)
    if not challenger_vin or not requester_vin:
        raise StateError("auth-demo needs two registered vehicles")
    if challenger_vin == requester_vin:
        raise UsageError("requester and challenger must differ")
    window = cfg["window_ms"]
    vi = _load_vehicle(state, challenger_vin, auth, window, _rng(cfg, f"demo:{challenger_vin}"))
    vj = _load_vehicle(state, requester_vin, auth, window, _rng(cfg, f"demo:{requester_vin}"))
    params = auth.params
    now = 1_000 if cfg["seed"] is not None else int(time.time() * 1000)
    tamper = None
    if args.tamper:
        tamper = {"action": "tamper", "field": args.tamper, "bits": [args.bit]}

    transcript = []

    def send(kind, frame):
        if tamper and FIELD_MESSAGE[tamper["field"]] == kind:
            try:
                frame = adversary_action(frame, tamper, params)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
        entry = {"message": message_type(frame), "bytes": len(frame)}
        try:
            entry["fields"] = _describe(frame)
        except ProtocolError:
            entry["fields"] = {}
        if cfg["verbose"]:
            entry["frame_hex"] = frame.hex()
        transcript.append(entry)
        return frame

    result = {"challenger": challenger_vin, "requester": requester_vin, "transcript": transcript}
    try:
        req = send("request", vj.auth_request())
        ch = send("challenge", vi.on_auth_request(req, now, handle=0))
        resp, sk_j, peer = vj.on_challenge(ch, now + 1)
        resp = send("response", resp)
        sk_i = vi.on_response(resp, now + 2, handle=0)
    except ProtocolError as exc:
        result.update(outcome=type(exc).__name__, sk_match=False)
        _report_obj(result, cfg)
        raise CliFailure(EXIT_PROTOCOL, f"{type(exc).__name__}: {exc}") from None
    result.update(outcome="success", sk_match=sk_i == sk_j,
                  peer_recovered=peer == vi.id)
    _report_obj(result, cfg)
    return EXIT_OK if sk_i == sk_j else EXIT_PROTOCOL


def _report_obj(obj, cfg):
    if cfg["format"] == "json":
        _write(dump_json(obj), cfg["out"])
        return
    if cfg["format"] == "csv":
        flat = {k: (json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v)
                for k, v in obj.items()}
        _write(dump_csv([flat]), cfg["out"])
        return
    lines = []
    for k, v in obj.items():
        if k == "transcript":
            for m in v:
                lines.append(f"{m['message']} ({m['bytes']} bytes)")
                for name, hx in m["fields"].items():
                    lines.append(f"  {name:<18} {hx}")
                if "frame_hex" in m:
                    lines.append(f"  frame              {m['frame_hex']}")
        elif k == "sk_match":
            lines.append(f"SK match: {_cell(v)}")
        else:
            lines.append(f"{k}: {_cell(v)}")
    _write("\n".join(lines) + "\n", cfg["out"])


def cmd_sim(args, cfg):
    if args.list:
        sys.stdout.write("\n".join(bundled_scenarios()) + "\n")
        return EXIT_OK
    if not args.scenario:
        raise UsageError("sim needs a scenario file (or --list)")
    sc = load_scenario(args.scenario)
    overrides = {}
    if "backend" in cfg["explicit"]:
        overrides["backend"] = cfg["backend"]
    if "window_ms" in cfg["explicit"]:
        overrides["window_ms"] = cfg["window_ms"]
    if cfg["seed"] is not None:
        overrides["seed"] = cfg["seed"]
    if overrides:
        sc = type(sc)(**{**sc.__dict__, **overrides})
    report = run_scenario(sc)
    out = Path(cfg["out"] or ".")
    base = out / sc.name
    _atomic_write(base.with_name(sc.name + ".report.json"), report.to_json())
    _atomic_write(base.with_name(sc.name + ".summary.csv"), report.summary_csv())
    d = report.data
    if cfg["format"] == "json":
        sys.stdout.write(report.to_json())
    else:
        s = d["summary"]
        print(f"scenario {d['scenario']} seed {d['seed']}: {s['success']}/{s['sessions']} sessions "
              f"succeeded, {s['sk_matches']} SK matches")
        for a in d["assertions"]:
            print(f"  [{'pass' if a['passed'] else 'FAIL'}] {a['check']} (observed {a['observed']})")
        print(f"report: {base}.report.json ({report.wall_time_s:.2f} s wall)")
    return EXIT_OK if report.passed else EXIT_ASSERT


def _load_costs(path):
    if not path:
        return PrimitiveCosts.default()
    base = PrimitiveCosts.default()
    times, energy = dict(base.time_us), dict(base.energy_mj)
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row.get("time_us"):
                    times[row["primitive"]] = float(row["time_us"])
                if row.get("energy_mj"):
                    energy[row["primitive"]] = float(row["energy_mj"])
        return PrimitiveCosts(times, energy, base.transmit_uj, base.receive_uj)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot use cost file {path}: {exc}") from None


def cmd_cost(args, cfg):
    costs = _load_costs(args.costs)
    if args.table == "IV":
        rows = table_iv(costs)
    elif args.table == "V":
        rows = table_v(rate_bps=args.rate_bps, distance_m=args.distance_m)
    else:
        rows = table_vii(costs)
    emit_rows(rows, cfg)
    return EXIT_OK


def _p_grid(values):
    grid = []
    for v in values or []:
        for part in str(v).split(","):
            if part.strip():
                try:
                    p = float(part)
                except ValueError:
                    raise UsageError(f"bad probability {part!r}") from None
                if not 0 <= p < 1:
                    raise UsageError(f"p must be in [0, 1), got {p}")
                grid.append(p)
    return grid or list(DEFAULT_P_GRID)


def cmd_attack_time(args, cfg):
    grid = _p_grid(args.p)
    costs = _load_costs(args.costs)
    if args.model == "analytic":
        rows = attack_sweep(grid, costs)
    else:
        if args.trials < 2:
            raise UsageError("--trials must be at least 2")
        seed = cfg["seed"] if cfg["seed"] is not None else 0
        rows = []
        schemes = load_schemes()
        for i, p in enumerate(grid):
            for j, f in enumerate(schemes.values()):
                m = scheme_attack_model(f, costs, p)
                mean, se = monte_carlo_auth_time(m, args.trials, seed=[seed, i, j])
                rows.append({"p": p, "scheme": f.name, "n_steps": m.n,
                             "t_success_us": round(m.t_success, 6),
                             "avg_time_us": round(avg_auth_time(m), 6),
                             "mc_mean_us": round(mean, 6), "mc_stderr_us": round(se, 6),
                             "within_3se": abs(mean - avg_auth_time(m)) <= 3 * se or se == 0})
    emit_rows(rows, cfg)
    return EXIT_OK


def cmd_bench(args, cfg):
    if args.iterations < 1:
        raise UsageError("--iterations must be positive")
    curve = get_curve(cfg["backend"])
    costs = bench_primitives(args.iterations, curve, seed=cfg["seed"] or 0)
    emit_rows(costs.rows(), cfg)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    p = _Parser(prog="eaia", description="Anonymous V2V authentication toolkit.")
    _global_flags(p, suppress=False)
    p.add_argument("--version", action="version", version=f"eaia {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("setup", parents=[common], help="create authority parameters and state")
    s.add_argument("--force", action="store_true", help="overwrite existing state")
    s.set_defaults(func=cmd_setup)

    s = sub.add_parser("register", parents=[common], help="register a vehicle by VIN")
    s.add_argument("vin")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("auth-demo", parents=[common], help="run one mutual authentication in-process")
    s.add_argument("--challenger", help="VIN of the challenging vehicle")
    s.add_argument("--requester", help="VIN of the requesting vehicle")
    s.add_argument("--tamper", choices=sorted(FIELD_MESSAGE), help="flip a bit in this field")
    s.add_argument("--bit", type=int, default=0, help="bit to flip, 0 = MSB of the field")
    s.set_defaults(func=cmd_auth_demo)

    s = sub.add_parser("sim", parents=[common], help="run a network scenario")
    s.add_argument("scenario", nargs="?", help="scenario JSON path or bundled name")
    s.add_argument("--list", action="store_true", help="list bundled scenarios")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("cost", parents=[common], help="reproduce a cost table")
    s.add_argument("--table", choices=("IV", "V", "VII"), required=True)
    s.add_argument("--costs", help="primitive cost CSV, e.g. from bench")
    s.add_argument("--rate-bps", type=float, default=25e6, dest="rate_bps")
    s.add_argument("--distance-m", type=float, default=200.0, dest="distance_m")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("attack-time", parents=[common], help="expected authentication time under attack")
    s.add_argument("--p", action="append", help="disruption probability; repeat or comma-separate")
    s.add_argument("--model", choices=("analytic", "montecarlo"), default="analytic")
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--costs", help="primitive cost CSV, e.g. from bench")
    s.set_defaults(func=cmd_attack_time)

    s = sub.add_parser("bench", parents=[common], help="measure primitive costs on this machine")
    s.add_argument("--iterations", type=int, default=50)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (StateError, ScenarioInvalid, AuthorityError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STATE
    except ProtocolError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except EAIAError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STATE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE


if __name__ == "__main__":
    sys.exit(main())
