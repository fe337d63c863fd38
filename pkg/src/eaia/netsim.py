"""Deterministic discrete-event simulator with a Dolev-Yao adversary.

Vehicles register with an in-process authority at t=0 (ideal secure
channel), then run scripted authentication sessions over simulated links.
The adversary sees every frame and can drop, tamper with, replay, inject
or swap frames, impersonate vehicles, and probe what leaked secrets buy it.

Simulated time is kept in integer nanoseconds; protocol timestamps are the
simulated clock in whole milliseconds. Every random choice comes from a
``random.Random`` seeded from the scenario seed, so a (scenario, seed) pair
always yields the same event trace and the same report bytes.

Scenario files are JSON objects; see ``SCENARIO_KEYS`` and the bundled
files under ``eaia/scenarios`` for the schema.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import random
import time
from dataclasses import dataclass, field
from importlib import resources
from itertools import count

from .authority import Authority
from .costmodel import WAVE_SPEED
from .errors import (
    EAIAError, MalformedMessage, ProtocolError, ScenarioInvalid, Timeout, outcome_matches,
)
from .group import get_curve, random_nonzero_scalar, xor_bytes
from .protocol import (
    DEFAULT_WINDOW_MS, Vehicle, _session_key, build_challenge, real_id_from_vin,
    verify_registration,
)
from .wire import (
    AuthRequest, ChallengeMsg, ResponseMsg, TYPE_CHALLENGE, TYPE_RESPONSE, decode_message,
    encode_message, field_spans, message_type,
)

NS_PER_MS = 1_000_000
TIMEOUT_FACTOR = 10

SCENARIO_KEYS = {"name", "description", "seed", "backend", "window_ms", "vehicles", "link",
                 "sessions", "updates", "adversary", "stop_ms", "expect"}
LINK_KEYS = {"propagation_us", "rate_bps", "jitter_us", "loss"}
SESSION_KEYS = {"at_ms", "requester", "challenger", "repeat", "every_ms"}
UPDATE_KEYS = {"at_ms", "vehicle"}
MESSAGES = {"request": "AuthRequest", "challenge": "ChallengeMsg", "response": "ResponseMsg"}
ACTION_KEYS = {
    "drop": {"action", "session", "message"},
    "tamper": {"action", "session", "message", "field", "bit", "bits"},
    "replay": {"action", "session", "message", "delay_ms"},
    "mitm-swap": {"action", "session", "message"},
    "inject": {"action", "at_ms", "dst", "random_bytes", "hex"},
    "impersonate": {"action", "at_ms", "dst", "target", "mode", "trials"},
    "leak_probe": {"action", "session", "leaked"},
}
IMPERSONATION_MODES = ("random_sigma", "own_keys", "reuse_sigma", "real_keys")
LEAKABLE = {"a", "b", "d", "long_term_challenger", "long_term_requester"}
EXPECT_KEYS = {"session", "sessions", "action", "outcome", "sk_matches", "pseudonym_leaks",
               "accounting", "update", "sk_recovered"}


# -- scenario ---------------------------------------------------------------------

def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ScenarioInvalid(f"{where}: expected an object")
    extra = set(obj) - allowed
    if extra:
        raise ScenarioInvalid(f"{where}: unknown keys {sorted(extra)}")


def _num(obj, key, where, default=None, lo=0):
    v = obj.get(key, default)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or v < lo:
        raise ScenarioInvalid(f"{where}.{key}: expected a number >= {lo}, got {v!r}")
    return v


@dataclass
class Scenario:
    name: str
    seed: int
    backend: str
    window_ms: int
    vehicles: list
    link: dict
    sessions: list            # expanded: [{"at_ms", "requester", "challenger"}]
    updates: list
    adversary: list
    expect: list
    stop_ms: float | None = None
    description: str = ""

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, SCENARIO_KEYS, "scenario")
        vehicles = d.get("vehicles")
        if (not isinstance(vehicles, list) or len(vehicles) < 2
                or not all(isinstance(v, str) and v for v in vehicles)
                or len(set(vehicles)) != len(vehicles)):
            raise ScenarioInvalid("vehicles: need a list of at least two distinct names")
        names = set(vehicles)
        backend = d.get("backend", "production")
        try:
            get_curve(backend)
        except ValueError as exc:
            raise ScenarioInvalid(str(exc)) from None
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ScenarioInvalid("seed must be an integer")
        window = _num(d, "window_ms", "scenario", DEFAULT_WINDOW_MS, lo=1)

        link = d.get("link", {})
        _check_keys(link, LINK_KEYS, "link")
        link = {
            "propagation_us": _num(link, "propagation_us", "link", 200 / WAVE_SPEED * 1e6),
            "rate_bps": _num(link, "rate_bps", "link", 25e6, lo=1),
            "jitter_us": _num(link, "jitter_us", "link", 0),
            "loss": _num(link, "loss", "link", 0.0),
        }
        if link["loss"] >= 1:
            raise ScenarioInvalid("link.loss must be < 1")

        sessions = []
        for i, s in enumerate(d.get("sessions", [])):
            where = f"sessions[{i}]"
            _check_keys(s, SESSION_KEYS, where)
            for role in ("requester", "challenger"):
                if s.get(role) not in names:
                    raise ScenarioInvalid(f"{where}.{role}: unknown vehicle {s.get(role)!r}")
            if s["requester"] == s["challenger"]:
                raise ScenarioInvalid(f"{where}: a vehicle cannot authenticate itself")
            at = _num(s, "at_ms", where, 0)
            repeat = s.get("repeat", 1)
            if not isinstance(repeat, int) or repeat < 1:
                raise ScenarioInvalid(f"{where}.repeat must be a positive integer")
            every = _num(s, "every_ms", where, 0)
            for r in range(repeat):
                sessions.append({"at_ms": at + r * every, "requester": s["requester"],
                                 "challenger": s["challenger"]})

        updates = []
        for i, u in enumerate(d.get("updates", [])):
            _check_keys(u, UPDATE_KEYS, f"updates[{i}]")
            if u.get("vehicle") not in names:
                raise ScenarioInvalid(f"updates[{i}].vehicle: unknown vehicle {u.get('vehicle')!r}")
            updates.append({"at_ms": _num(u, "at_ms", f"updates[{i}]"), "vehicle": u["vehicle"]})

        adversary = [cls._check_action(a, i, names, len(sessions))
                     for i, a in enumerate(d.get("adversary", []))]
        expect = d.get("expect", [])
        if not isinstance(expect, list):
            raise ScenarioInvalid("expect must be a list")
        for i, e in enumerate(expect):
            _check_keys(e, EXPECT_KEYS, f"expect[{i}]")
            if "session" in e and not 0 <= e["session"] < len(sessions):
                raise ScenarioInvalid(f"expect[{i}].session out of range")
            if "action" in e and not 0 <= e["action"] < len(adversary):
                raise ScenarioInvalid(f"expect[{i}].action out of range")
            if "update" in e and not 0 <= e["update"] < len(updates):
                raise ScenarioInvalid(f"expect[{i}].update out of range")
        stop = d.get("stop_ms")
        if stop is not None:
            stop = _num(d, "stop_ms", "scenario")
        return cls(name=str(d.get("name", "unnamed")), seed=seed, backend=backend,
                   window_ms=window, vehicles=list(vehicles), link=link, sessions=sessions,
                   updates=updates, adversary=adversary, expect=expect, stop_ms=stop,
                   description=str(d.get("description", "")))

    @staticmethod
    def _check_action(a, i, names, nsessions):
        where = f"adversary[{i}]"
        if not isinstance(a, dict) or a.get("action") not in ACTION_KEYS:
            raise ScenarioInvalid(f"{where}: unknown action {a.get('action') if isinstance(a, dict) else a!r}")
        kind = a["action"]
        _check_keys(a, ACTION_KEYS[kind], where)
        a = dict(a)
        if "session" in ACTION_KEYS[kind]:
            if not isinstance(a.get("session"), int) or not 0 <= a["session"] < nsessions:
                raise ScenarioInvalid(f"{where}.session: no such session")
        if "message" in ACTION_KEYS[kind]:
            if a.get("message") not in MESSAGES:
                raise ScenarioInvalid(f"{where}.message: one of {sorted(MESSAGES)}")
        if kind == "tamper":
            bits = a.get("bits", [a.get("bit", 0)])
            if not bits or not all(isinstance(b, int) and b >= 0 for b in bits):
                raise ScenarioInvalid(f"{where}: bits must be non-negative integers")
            a["bits"] = bits
            a.pop("bit", None)
            if not isinstance(a.get("field"), str):
                raise ScenarioInvalid(f"{where}.field required")
        if kind == "replay":
            _num(a, "delay_ms", where)
        if kind in ("inject", "impersonate"):
            _num(a, "at_ms", where)
            if a.get("dst") not in names:
                raise ScenarioInvalid(f"{where}.dst: unknown vehicle {a.get('dst')!r}")
        if kind == "inject":
            if ("random_bytes" in a) == ("hex" in a):
                raise ScenarioInvalid(f"{where}: give exactly one of random_bytes, hex")
            if "hex" in a:
                try:
                    bytes.fromhex(a["hex"])
                except (TypeError, ValueError):
                    raise ScenarioInvalid(f"{where}.hex: not hex") from None
            else:
                _num(a, "random_bytes", where)
        if kind == "impersonate":
            if a.get("target") not in names or a["target"] == a["dst"]:
                raise ScenarioInvalid(f"{where}.target: must name another vehicle")
            if a.get("mode", "random_sigma") not in IMPERSONATION_MODES:
                raise ScenarioInvalid(f"{where}.mode: one of {IMPERSONATION_MODES}")
            a.setdefault("mode", "random_sigma")
            trials = a.setdefault("trials", 1)
            if not isinstance(trials, int) or trials < 1:
                raise ScenarioInvalid(f"{where}.trials must be a positive integer")
        if kind == "leak_probe":
            leaked = a.get("leaked")
            if not isinstance(leaked, list) or not set(leaked) <= LEAKABLE:
                raise ScenarioInvalid(f"{where}.leaked: subset of {sorted(LEAKABLE)}")
        return a


def load_scenario(path_or_name):
    """Load a scenario from a path, or from the bundled set by file name."""
    from pathlib import Path

    p = Path(path_or_name)
    try:
        if p.exists():
            text = p.read_text()
        else:
            bundled = resources.files("eaia").joinpath("scenarios").joinpath(p.name)
            if not bundled.is_file():
                raise ScenarioInvalid(f"no scenario file {path_or_name}")
            text = bundled.read_text()
        data = json.loads(text)
    except (OSError, UnicodeDecodeError) as exc:
        raise ScenarioInvalid(f"cannot read {path_or_name}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioInvalid(f"{path_or_name}: invalid JSON: {exc}") from None
    return Scenario.from_dict(data)


def bundled_scenarios():
    root = resources.files("eaia").joinpath("scenarios")
    return sorted(f.name for f in root.iterdir() if f.name.endswith(".json"))


# -- adversary primitives -------------------------------------------------------------

def flip_bits(data, start, end, bits):
    """Flip big-endian-numbered bits (bit 0 = MSB of the first byte) in data[start:end]."""
    buf = bytearray(data)
    for bit in bits:
        if bit >= 8 * (end - start):
            raise ValueError(f"bit {bit} outside a {end - start}-byte field")
        buf[start + bit // 8] ^= 0x80 >> (bit % 8)
    return bytes(buf)


def adversary_action(frame, action, params, rng=None, claimed_id=None):
    """Apply one manipulation to a captured frame.

    Returns the bytes to deliver, or None if the frame is suppressed.
    ``replay`` returns the frame unchanged (the caller schedules the copy).
    """
    kind = action["action"]
    if kind == "drop":
        return None
    if kind in ("replay", "eavesdrop"):
        return bytes(frame)
    if kind == "tamper":
        spans = field_spans(frame)
        if action["field"] not in spans:
            raise ValueError(f"frame has no field {action['field']!r}")
        start, end = spans[action["field"]]
        return flip_bits(frame, start, end, action["bits"])
    if kind == "mitm-swap":
        msg = decode_message(frame, params)
        curve, P = params.curve, params.P
        if isinstance(msg, ChallengeMsg):
            # re-encrypt N under the adversary's own b, claiming the original
            # sender's pseudonym; sigma and T_a are carried over
            if claimed_id is None:
                raise ValueError("mitm-swap on a challenge needs the claimed pseudonym")
            raise_if_no_rng(rng)
            b = random_nonzero_scalar(curve, rng)
            a = random_nonzero_scalar(curve, rng)
            target_pub = action["_responder_pub_sum"]
            plain = claimed_id + (a * P).encode()
            N = xor_bytes(params.hashes.h2_mask(b * target_pub, 8 * len(plain)), plain)
            forged = ChallengeMsg(B=b * P, N=N, sigma=msg.sigma, T_a=msg.T_a)
        elif isinstance(msg, ResponseMsg):
            raise_if_no_rng(rng)
            forged = ResponseMsg(D=random_nonzero_scalar(curve, rng) * P, eta=msg.eta, T_b=msg.T_b)
        else:
            raise ValueError("mitm-swap applies to challenges and responses")
        return encode_message(forged, params)
    raise ValueError(f"{kind} does not act on a captured frame")


def raise_if_no_rng(rng):
    if rng is None:
        raise ValueError("this manipulation needs an rng")


def impersonation_probe(params, responder, target_id, mode, rng, now,
                        adversary_keys=None, captured=None, target_keys=None):
    """Send ``responder`` a challenge claiming to come from ``target_id``.

    Modes: ``random_sigma`` (guess the signature), ``own_keys`` (sign with the
    adversary's own registered y), ``reuse_sigma`` (replay a captured honest
    B, N, sigma under a fresh T_a), ``real_keys`` (positive control using the
    target's actual keys). Returns "accepted" or the rejecting error's name.
    """
    curve, P, hs = params.curve, params.P, params.hashes
    pub = responder.keys.pub_sum
    if mode == "real_keys":
        req = AuthRequest(requester_id=responder.id, requester_pub_sum=pub)
        msg, _ = build_challenge(params, req, target_keys, now, rng)
    elif mode == "reuse_sigma":
        if captured is None:
            return "no_capture"
        old = decode_message(captured, params)
        msg = ChallengeMsg(B=old.B, N=old.N, sigma=old.sigma, T_a=now)
        if msg.T_a == old.T_a:
            msg = ChallengeMsg(B=old.B, N=old.N, sigma=old.sigma, T_a=now + 1)
    else:
        a = random_nonzero_scalar(curve, rng)
        b = random_nonzero_scalar(curve, rng)
        A = a * P
        plain = target_id + A.encode()
        N = xor_bytes(hs.h2_mask(b * pub, 8 * len(plain)), plain)
        if mode == "own_keys":
            if adversary_keys is None:
                raise ValueError("own_keys mode needs adversary_keys")
            h = hs.h1_scalar(target_id + A.encode() + now.to_bytes(8, "big"))
            sigma = curve.scalar_inv(b) * (h + adversary_keys.y) % curve.q or 1
        else:
            sigma = random_nonzero_scalar(curve, rng)
        msg = ChallengeMsg(B=b * P, N=N, sigma=sigma, T_a=now)
    frame = encode_message(msg, params)
    try:
        responder.on_challenge(frame, now)
    except ProtocolError as exc:
        return type(exc).__name__
    return "accepted"


def leak_probe(params, transcript, leaked, registry, lookup):
    """Try every algebraic route to the session key open to an adversary who
    holds the transcript, the public registry and the ``leaked`` secrets.

    ``transcript`` has the request/challenge/response frames; ``leaked`` maps
    names among a, b, d, x_i, y_i, x_j, y_j to values. A candidate key counts
    only if it reproduces the eta in the response, which the adversary can
    check on its own. Returns the recovered key or None.
    """
    curve, P, hs = params.curve, params.P, params.hashes
    req = decode_message(transcript["request"], params)
    ch = decode_message(transcript["challenge"], params)
    resp = decode_message(transcript["response"], params)
    id_j = req.requester_id
    id_len = params.id_len

    # candidates for (ID_i, A)
    candidates = []
    masks = []
    if "b" in leaked:
        masks.append(leaked["b"] * req.requester_pub_sum)
    if "x_j" in leaked and "y_j" in leaked:
        masks.append(((leaked["x_j"] + leaked["y_j"]) % curve.q) * ch.B)
    for M in masks:
        plain = xor_bytes(hs.h2_mask(M, 8 * len(ch.N)), ch.N)
        try:
            candidates.append((plain[:id_len], curve.decode_point(plain[id_len:])))
        except ValueError:
            pass
    if "a" in leaked:
        A = leaked["a"] * P
        candidates += [(pid, A) for pid in registry]

    for id_i, A in candidates:
        try:
            X_i, _ = lookup(id_i)
        except (KeyError, EAIAError):
            continue
        k = _session_key(params, id_i, id_j, A, resp.D, resp.T_b)
        shared = []
        if "d" in leaked:
            shared.append(leaked["d"] * (k * A + X_i))
        if "a" in leaked and "x_i" in leaked:
            shared.append(((k * leaked["a"] + leaked["x_i"]) % curve.q) * resp.D)
        for Z in shared:
            sk = hs.h3_key(id_i + id_j + Z.encode())
            if hs.h4_tag(id_i + id_j + sk + resp.T_b.to_bytes(8, "big")) == resp.eta:
                return sk
    return None


# -- simulation ---------------------------------------------------------------------

@dataclass
class _Frame:
    src: str
    dst: str
    payload: bytes
    session: int | None
    honest: bool = True
    action: int | None = None


class _RecordingRng:
    """Wraps an rng and remembers the values it hands out."""

    def __init__(self, inner):
        self.inner = inner
        self.draws = []

    def randrange(self, *args):
        v = self.inner.randrange(*args)
        self.draws.append(v)
        return v


@dataclass
class RunReport:
    data: dict
    wall_time_s: float = field(default=0.0, compare=False)

    @property
    def passed(self):
        return self.data["passed"]

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def summary_csv(self):
        buf = io.StringIO()
        cols = ["session", "requester", "challenger", "started_ms", "finished_ms",
                "outcome", "sk_match"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\r\n")
        w.writeheader()
        for s in self.data["sessions"]:
            w.writerow({c: s[c] for c in cols})
        return buf.getvalue()


class Simulator:
    def __init__(self, scenario):
        self.sc = sc = scenario
        seed = sc.seed
        self.now_ns = 0
        self._queue = []
        self._seq = count()
        self.net_rng = random.Random(f"{seed}:net")
        self.adv_rng = random.Random(f"{seed}:adversary")
        self.auth_rng = random.Random(f"{seed}:authority")
        curve = get_curve(sc.backend)
        self.authority = Authority.setup(curve, self.auth_rng)
        self.params = params = self.authority.params
        self.vehicles = {}
        self.issued_ids = []
        for name in sc.vehicles:
            vrng = random.Random(f"{seed}:vehicle:{name}")
            x = random_nonzero_scalar(curve, vrng)
            reply = self.authority.register(real_id_from_vin(name, params), x * curve.G,
                                            self.auth_rng)
            keys = verify_registration(params, reply, x)
            self.vehicles[name] = Vehicle(name, params, keys, self.authority.registry_lookup,
                                          sc.window_ms, vrng)
            self.issued_ids.append(keys.id)
        self.knowledge = []       # every frame seen on air: (src, dst, payload)
        self.counts = {"sent": 0, "delivered": 0, "dropped": 0, "suppressed": 0,
                       "expired_at_stop": 0, "adversary_frames": 0, "bytes_sent": 0}
        self.by_type = {}
        self.sessions = [dict(s, session=i, started_ms=None, finished_ms=None,
                              requester_outcome=None, challenger_outcome=None,
                              outcome=None, sk_match=False)
                         for i, s in enumerate(sc.sessions)]
        self._sk = {}             # (session, role) -> key
        self._transcripts = {i: {} for i in range(len(self.sessions))}
        self._secrets = {}
        self.actions = [{"index": i, "action": a["action"], "outcome": "not_triggered"}
                        for i, a in enumerate(sc.adversary)]
        self._fired = set()
        self.update_log = []
        self._probed_sessions = {a["session"] for a in sc.adversary if a["action"] == "leak_probe"}

    # -- event plumbing --

    def _push(self, t_ns, kind, data):
        heapq.heappush(self._queue, (t_ns, next(self._seq), kind, data))

    @property
    def now_ms(self):
        return self.now_ns // NS_PER_MS

    def _latency_ns(self, payload):
        link = self.sc.link
        ns = link["propagation_us"] * 1000 + len(payload) * 8 * 1e9 / link["rate_bps"]
        if link["jitter_us"]:
            ns += self.net_rng.uniform(0, link["jitter_us"] * 1000)
        return max(1, round(ns))

    def _send(self, frame):
        mtype = message_type(frame.payload)
        self.counts["sent"] += 1
        self.counts["bytes_sent"] += len(frame.payload)
        t = self.by_type.setdefault(mtype, {"count": 0, "bytes": 0})
        t["count"] += 1
        t["bytes"] += len(frame.payload)
        self.knowledge.append((frame.src, frame.dst, frame.payload))
        if frame.session is not None:
            key = {"AuthRequest": "request", "ChallengeMsg": "challenge",
                   "ResponseMsg": "response"}.get(mtype)
            if key:
                self._transcripts[frame.session].setdefault(key, frame.payload)

        for i, act in enumerate(self.sc.adversary):
            if (i in self._fired or act.get("session") != frame.session
                    or MESSAGES.get(act.get("message")) != mtype):
                continue
            self._fired.add(i)
            kind = act["action"]
            if kind == "drop":
                self.counts["suppressed"] += 1
                self.actions[i]["outcome"] = "suppressed"
                return
            if kind == "replay":
                copy = _Frame(frame.src, frame.dst, frame.payload, None, honest=False, action=i)
                self._push(self.now_ns + round(act["delay_ms"] * NS_PER_MS), "inject", copy)
                continue
            extra = {}
            claimed = None
            if kind == "mitm-swap" and mtype == "ChallengeMsg":
                extra["_responder_pub_sum"] = self.vehicles[frame.dst].keys.pub_sum
                claimed = self.vehicles[frame.src].id
            frame.payload = adversary_action(frame.payload, {**act, **extra}, self.params,
                                             self.adv_rng, claimed_id=claimed)
            frame.action = i

        if self.net_rng.random() < self.sc.link["loss"]:
            self.counts["dropped"] += 1
            return
        self._push(self.now_ns + self._latency_ns(frame.payload), "deliver", frame)

    # -- handlers --

    def _session_error(self, sid, role, name):
        s = self.sessions[sid]
        s[f"{role}_outcome"] = name
        if s["outcome"] is None:
            s["outcome"] = name
            s["finished_ms"] = self.now_ms

    def _start_session(self, sid):
        s = self.sessions[sid]
        s["started_ms"] = self.now_ms
        req = self.vehicles[s["requester"]]
        self._send(_Frame(req.name, s["challenger"], req.auth_request(), sid))
        self._push(self.now_ns + TIMEOUT_FACTOR * self.sc.window_ms * NS_PER_MS, "timeout", sid)

    def _timeout(self, sid):
        s = self.sessions[sid]
        self.vehicles[s["challenger"]].abort(sid)
        if s["outcome"] is None:
            self._session_error(sid, "challenger", Timeout.__name__)

    def _deliver(self, frame):
        if frame.honest:
            self.counts["delivered"] += 1
        else:
            self.counts["adversary_frames"] += 1
            self.knowledge.append((frame.src, frame.dst, frame.payload))
        node = self.vehicles[frame.dst]
        sid = frame.session
        mtype = message_type(frame.payload)
        now = self.now_ms
        outcome = "accepted"
        try:
            if mtype == "AuthRequest":
                reply = node.on_auth_request(frame.payload, now, handle=sid)
                if sid in self._probed_sessions:
                    eph = node.sessions[sid]
                    self._secrets.setdefault(sid, {}).update(a=eph.a, b=eph.b)
                self._reply(frame, reply)
            elif mtype == "ChallengeMsg":
                rec = None
                if sid in self._probed_sessions:
                    rec = node.rng = _RecordingRng(node.rng)
                try:
                    reply, sk, _ = node.on_challenge(frame.payload, now)
                finally:
                    if rec is not None:
                        node.rng = rec.inner
                if rec is not None:
                    self._secrets.setdefault(sid, {})["d"] = rec.draws[0]
                if sid is not None:
                    self._sk[(sid, "requester")] = sk
                    self.sessions[sid]["requester_outcome"] = "accepted"
                self._reply(frame, reply)
            elif mtype == "ResponseMsg":
                sk = node.on_response(frame.payload, now, handle=sid)
                if sid is not None:
                    self._complete(sid, sk)
            else:
                decode_message(frame.payload, self.params)
                raise MalformedMessage(f"{frame.dst} does not accept {mtype}")
        except ProtocolError as exc:
            outcome = type(exc).__name__
            if sid is not None:
                role = "requester" if mtype == "ChallengeMsg" else "challenger"
                self._session_error(sid, role, outcome)
        if frame.action is not None and self.actions[frame.action]["outcome"] == "not_triggered":
            self.actions[frame.action]["outcome"] = outcome

    def _reply(self, frame, payload):
        if frame.honest and frame.session is not None:
            self._send(_Frame(frame.dst, frame.src, payload, frame.session))
        else:
            # answers to adversary frames go to the adversary
            self.knowledge.append((frame.dst, "adversary", payload))

    def _complete(self, sid, sk):
        s = self.sessions[sid]
        s["challenger_outcome"] = "accepted"
        self._sk[(sid, "challenger")] = sk
        match = self._sk.get((sid, "requester")) == sk
        s["sk_match"] = match
        if s["outcome"] is None:
            s["outcome"] = "success" if match else "KeyMismatch"
            s["finished_ms"] = self.now_ms

    def _update(self, u, idx):
        v = self.vehicles[u["vehicle"]]
        entry = {"update": idx, "vehicle": v.name, "at_ms": self.now_ms}
        old = v.id
        try:
            req = decode_message(v.pseudonym_update_request(self.now_ms), self.params)
            reply = self.authority.process_pseudonym_update(req, self.now_ms, self.sc.window_ms,
                                                            self.auth_rng)
            new = v.on_pseudonym_update_reply(encode_message(reply, self.params), self.now_ms)
            self.issued_ids.append(new)
            retired = old not in self.authority.registry
            entry.update(outcome="success", old_id_retired=retired,
                         matches_authority=self.authority.registry.get(new) is not None)
        except (EAIAError, RuntimeError) as exc:
            entry.update(outcome=type(exc).__name__, old_id_retired=False,
                         matches_authority=False)
        self.update_log.append(entry)

    def _inject(self, idx):
        act = self.sc.adversary[idx]
        if act["action"] == "inject":
            if "hex" in act:
                payload = bytes.fromhex(act["hex"])
            else:
                payload = bytes(self.adv_rng.randrange(256) for _ in range(int(act["random_bytes"])))
            self._deliver(_Frame("adversary", act["dst"], payload, None, honest=False, action=idx))
        else:
            self._impersonate(idx, act)

    def _impersonate(self, idx, act):
        responder = self.vehicles[act["dst"]]
        target = self.vehicles[act["target"]]
        captured = None
        for src, dst, payload in reversed(self.knowledge):
            if (src == target.name and dst == responder.name and payload
                    and payload[0] == TYPE_CHALLENGE):
                captured = payload
                break
        adv_keys = None
        if act["mode"] == "own_keys":
            others = [v for v in self.vehicles.values() if v not in (responder, target)]
            adv_keys = (others[0] if others else target).keys
            if not others:
                raise ScenarioInvalid("own_keys mode needs a third vehicle to act as insider")
        tally = {}
        for _ in range(act["trials"]):
            self.counts["adversary_frames"] += 1
            out = impersonation_probe(self.params, responder, target.id, act["mode"],
                                      self.adv_rng, self.now_ms, adversary_keys=adv_keys,
                                      captured=captured, target_keys=target.keys)
            tally[out] = tally.get(out, 0) + 1
        self.actions[idx].update(outcome=max(tally, key=lambda k: (tally[k], k)),
                                 tally=dict(sorted(tally.items())), trials=act["trials"])

    def _run_probes(self):
        for idx, act in enumerate(self.sc.adversary):
            if act["action"] != "leak_probe":
                continue
            sid = act["session"]
            s = self.sessions[sid]
            tr = self._transcripts[sid]
            if s["outcome"] != "success" or not {"request", "challenge", "response"} <= set(tr):
                self.actions[idx]["outcome"] = "no_transcript"
                continue
            secrets_ = self._secrets.get(sid, {})
            leaked = {k: secrets_[k] for k in ("a", "b", "d") if k in act["leaked"]}
            if "long_term_challenger" in act["leaked"]:
                keys = self.vehicles[s["challenger"]].keys
                leaked.update(x_i=keys.x, y_i=keys.y)
            if "long_term_requester" in act["leaked"]:
                keys = self.vehicles[s["requester"]].keys
                leaked.update(x_j=keys.x, y_j=keys.y)
            sk = leak_probe(self.params, tr, leaked, list(self.authority.registry),
                            self.authority.registry_lookup)
            recovered = sk is not None and sk == self._sk.get((sid, "challenger"))
            self.actions[idx].update(outcome="sk_recovered" if recovered else "sk_protected",
                                     sk_recovered=recovered, leaked=sorted(act["leaked"]))

    def _privacy_scan(self):
        ids = set(self.issued_ids)
        scanned = leaks = 0
        for _, _, payload in self.knowledge:
            if payload and payload[0] in (TYPE_CHALLENGE, TYPE_RESPONSE):
                scanned += 1
                if any(pid in payload for pid in ids):
                    leaks += 1
        return {"frames_scanned": scanned, "pseudonym_leaks": leaks}

    # -- main loop --

    def run(self):
        t0 = time.perf_counter()
        for i, s in enumerate(self.sessions):
            self._push(round(s["at_ms"] * NS_PER_MS), "start", i)
        for i, u in enumerate(self.sc.updates):
            self._push(round(u["at_ms"] * NS_PER_MS), "update", i)
        for i, a in enumerate(self.sc.adversary):
            if a["action"] in ("inject", "impersonate"):
                self._push(round(a["at_ms"] * NS_PER_MS), "adversary", i)
        stop_ns = None if self.sc.stop_ms is None else round(self.sc.stop_ms * NS_PER_MS)
        while self._queue:
            t, _, kind, data = heapq.heappop(self._queue)
            if stop_ns is not None and t > stop_ns:
                self._expire([(t, kind, data)] + [(e[0], e[2], e[3]) for e in self._queue])
                self._queue = []
                break
            self.now_ns = t
            if kind == "start":
                self._start_session(data)
            elif kind == "deliver":
                self._deliver(data)
            elif kind == "inject":
                self._deliver(data)
            elif kind == "timeout":
                self._timeout(data)
            elif kind == "update":
                self._update(self.sc.updates[data], data)
            elif kind == "adversary":
                self._inject(data)
        self._run_probes()
        report = self._report()
        return RunReport(report, wall_time_s=time.perf_counter() - t0)

    def _expire(self, pending):
        for _, kind, data in pending:
            if kind == "deliver" and data.honest:
                self.counts["dropped"] += 1
                self.counts["expired_at_stop"] += 1
        for s in self.sessions:
            if s["outcome"] is None:
                s["outcome"] = "not_finished"

    def _report(self):
        sessions = []
        for s in self.sessions:
            sessions.append({k: s[k] for k in ("session", "requester", "challenger", "started_ms",
                                               "finished_ms", "outcome", "sk_match",
                                               "requester_outcome", "challenger_outcome")})
        c = self.counts
        accounting_ok = c["sent"] == c["delivered"] + c["dropped"] + c["suppressed"]
        privacy = self._privacy_scan()
        data = {
            "scenario": self.sc.name,
            "seed": self.sc.seed,
            "backend": self.sc.backend,
            "window_ms": self.sc.window_ms,
            "sim_time_ms": self.now_ns / NS_PER_MS,
            "sessions": sessions,
            "summary": {
                "sessions": len(sessions),
                "success": sum(s["outcome"] == "success" for s in sessions),
                "sk_matches": sum(bool(s["sk_match"]) for s in sessions),
                "outcomes": _tally(s["outcome"] for s in sessions),
            },
            "messages": dict(c, by_type=dict(sorted(self.by_type.items())),
                             accounting_ok=accounting_ok),
            "adversary": self.actions,
            "updates": self.update_log,
            "privacy": privacy,
            "registry_audit": self.authority.audit(),
        }
        data["assertions"] = self._assertions(data)
        data["passed"] = all(a["passed"] for a in data["assertions"])
        return data

    def _assertions(self, data):
        out = []
        for e in self.sc.expect:
            if "session" in e:
                obs = data["sessions"][e["session"]]["outcome"]
                out.append({"check": f"session {e['session']} outcome {e['outcome']}",
                            "observed": obs, "passed": outcome_matches(obs, e["outcome"])})
            elif "sessions" in e:
                obs = [s["outcome"] for s in data["sessions"]]
                out.append({"check": f"all sessions {e['outcome']}", "observed": _tally(obs),
                            "passed": bool(obs) and all(outcome_matches(o, e["outcome"]) for o in obs)})
            elif "action" in e:
                act = data["adversary"][e["action"]]
                if "sk_recovered" in e:
                    obs = act.get("sk_recovered")
                    out.append({"check": f"action {e['action']} sk_recovered={e['sk_recovered']}",
                                "observed": obs, "passed": obs == e["sk_recovered"]})
                else:
                    tally = act.get("tally", {act["outcome"]: 1})
                    ok = all(outcome_matches(o, e["outcome"]) for o in tally)
                    out.append({"check": f"action {e['action']} ({act['action']}) outcome {e['outcome']}",
                                "observed": tally if "tally" in act else act["outcome"], "passed": ok})
            elif "update" in e:
                u = data["updates"][e["update"]]
                ok = outcome_matches(u["outcome"], e.get("outcome", "success"))
                out.append({"check": f"update {e['update']} outcome {e.get('outcome', 'success')}",
                            "observed": u["outcome"], "passed": ok})
            elif "sk_matches" in e:
                obs = data["summary"]["sk_matches"]
                out.append({"check": f"sk_matches == {e['sk_matches']}", "observed": obs,
                            "passed": obs == e["sk_matches"]})
            elif "pseudonym_leaks" in e:
                obs = data["privacy"]["pseudonym_leaks"]
                out.append({"check": f"pseudonym_leaks == {e['pseudonym_leaks']}", "observed": obs,
                            "passed": obs == e["pseudonym_leaks"]})
            elif "accounting" in e:
                obs = data["messages"]["accounting_ok"]
                out.append({"check": "sent == delivered + dropped + suppressed",
                            "observed": obs, "passed": obs == e["accounting"]})
        return out


def _tally(items):
    t = {}
    for i in items:
        t[i] = t.get(i, 0) + 1
    return dict(sorted(t.items()))


def run_scenario(sc, seed=None):
    if seed is not None:
        sc = Scenario(**{**sc.__dict__, "seed": seed})
    return Simulator(sc).run()
