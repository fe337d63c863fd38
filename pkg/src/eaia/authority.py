"""Authority (AMF) side: setup, registration, pseudonym updates, registry.

State on disk lives in one directory:

    master.key      hex master scalar s, mode 0600
    authority.log   JSON lines, append-only; replaying it rebuilds all state

Log events (keys sorted, one object per line)::

    {"event": "setup", "params": {...SystemParams.to_dict()}}
    {"event": "register", "rid": hex, "X": hex point, "r": hex, "id": hex, "at": ms}
    {"event": "update", "rid": hex, "r": hex, "id": hex, "at": ms}

``r`` is the per-issue secret; with s it determines every derived value, so
a reload recomputes records and cross-checks the logged pseudonyms.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    DuplicateRegistration, MalformedPoint, RidMismatch, SignatureInvalid, StateError,
    UnknownPseudonym,
)
from .group import SystemParams, random_nonzero_scalar, xor_bytes
from .protocol import (
    DEFAULT_WINDOW_MS, RegistrationReply, check_fresh, registration_hash, ts_bytes, update_mask,
)
from .wire import PseudonymUpdateReply

LOG_NAME = "authority.log"
KEY_NAME = "master.key"
MAX_ISSUE_DRAWS = 64


@dataclass
class VehicleRecord:
    rid: bytes
    X: object
    r: int          # registration-time secret, y = r + s*H
    R: object
    y: int
    Y: object
    reg_id: bytes   # pseudonym bound into H at registration
    current_r: int
    current_R: object
    current_id: bytes
    issued_at: int
    reg_at: int = 0


def pseudonym_for(params, s, rid, R):
    return xor_bytes(rid, params.hashes.h_mask(params.curve.encode_scalar(s) + R.encode(),
                                               params.mask_bits))


def issue_partial_key(params, s, rid, X, r):
    """Authority computation for one registration with an explicit r."""
    P = params.P
    R = r * P
    pid = pseudonym_for(params, s, rid, R)
    H = registration_hash(params, pid, X, R)
    y = (r + s * H) % params.q
    Y = R + H * params.P_pub
    return RegistrationReply(y=y, R=R, Y=Y, id=pid)


class Authority:
    def __init__(self, params, master_key, state_dir=None):
        if not 0 < master_key < params.q or master_key * params.P != params.P_pub:
            raise StateError("master key does not match P_pub")
        self.params = params
        self._s = master_key
        self.records = {}   # rid -> VehicleRecord
        self.registry = {}  # current pseudonym -> rid
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self._lock = threading.RLock()

    def __repr__(self):
        return f"Authority({self.params.curve.name}, vehicles={len(self.records)})"

    @classmethod
    def setup(cls, curve, rng, key_bits=256, tag_bits=256, mask_bits=256, state_dir=None):
        s = random_nonzero_scalar(curve, rng)
        params = SystemParams(curve, s * curve.G, key_bits, tag_bits, mask_bits)
        auth = cls(params, s, state_dir)
        if state_dir is not None:
            auth._write_fresh()
        return auth

    # -- persistence -----------------------------------------------------

    def _write_fresh(self):
        d = self.state_dir
        d.mkdir(parents=True, exist_ok=True)
        key_path = d / KEY_NAME
        key_path.write_text(f"{self._s:x}\n")
        os.chmod(key_path, 0o600)
        (d / LOG_NAME).write_text("")
        self._append({"event": "setup", "params": self.params.to_dict()})

    def _append(self, event):
        if self.state_dir is None:
            return
        with open(self.state_dir / LOG_NAME, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def save(self, state_dir):
        """Write the full state (key + reconstructed log) to a new directory."""
        self.state_dir = Path(state_dir)
        self._write_fresh()
        for rec in sorted(self.records.values(), key=lambda rec: rec.issued_at):
            self._append(self._register_event(rec))
            if rec.current_id != rec.reg_id:
                self._append(self._update_event(rec))

    @classmethod
    def load(cls, state_dir):
        d = Path(state_dir)
        try:
            s = int((d / KEY_NAME).read_text().strip(), 16)
            lines = (d / LOG_NAME).read_text().splitlines()
        except (OSError, ValueError) as exc:
            raise StateError(f"cannot read authority state in {d}: {exc}") from exc
        try:
            events = [json.loads(line) for line in lines if line.strip()]
            if not events or events[0].get("event") != "setup":
                raise StateError("log does not start with a setup event")
            params = SystemParams.from_dict(events[0]["params"])
            auth = cls(params, s)
            for ev in events[1:]:
                auth._replay(ev)
        except StateError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise StateError(f"corrupt authority log: {exc}") from exc
        auth.state_dir = d
        return auth

    def _replay(self, ev):
        kind = ev["event"]
        rid = bytes.fromhex(ev["rid"])
        r = int(ev["r"], 16)
        if kind == "register":
            X = self.params.curve.decode_point(bytes.fromhex(ev["X"]))
            rec = self._issue(rid, X, r, ev["at"])
        elif kind == "update":
            rec = self._rotate(self.records[rid], r, ev["at"])
        else:
            raise StateError(f"unknown event {kind!r}")
        if rec.current_id.hex() != ev["id"]:
            raise StateError(f"replayed pseudonym differs from log for event {ev}")

    def _register_event(self, rec):
        return {"event": "register", "rid": rec.rid.hex(), "X": rec.X.encode().hex(),
                "r": f"{rec.r:x}", "id": rec.reg_id.hex(), "at": rec.reg_at}

    def _update_event(self, rec):
        return {"event": "update", "rid": rec.rid.hex(), "r": f"{rec.current_r:x}",
                "id": rec.current_id.hex(), "at": rec.issued_at}

    # -- registration ----------------------------------------------------

    def _issue(self, rid, X, r, now):
        reply = issue_partial_key(self.params, self._s, rid, X, r)
        rec = VehicleRecord(rid=rid, X=X, r=r, R=reply.R, y=reply.y, Y=reply.Y,
                            reg_id=reply.id, current_r=r, current_R=reply.R,
                            current_id=reply.id, issued_at=now, reg_at=now)
        self.records[rid] = rec
        self.registry[reply.id] = rid
        return rec

    def register(self, rid, X, rng, now=0):
        """Register a vehicle and return the reply sent over the secure channel."""
        params = self.params
        if len(rid) != 256 // 8:
            raise ValueError("real identity must be exactly 256 bits")
        if X.curve is not params.curve or not params.curve.is_on_curve(X) or X.is_identity:
            raise MalformedPoint("X is not a valid group element")
        with self._lock:
            if rid in self.records:
                raise DuplicateRegistration(f"rid {rid.hex()[:16]}... already registered")
            for _ in range(MAX_ISSUE_DRAWS):
                r = random_nonzero_scalar(params.curve, rng)
                reply = issue_partial_key(params, self._s, rid, X, r)
                # y == 0 or X + Y == O would give a degenerate key pair
                if reply.y and not (X + reply.Y).is_identity and reply.id not in self.registry:
                    break
            else:
                raise RuntimeError("could not draw a usable registration secret")
            rec = self._issue(rid, X, r, now)
            self._append(self._register_event(rec))
        return RegistrationReply(y=rec.y, R=rec.R, Y=rec.Y, id=rec.reg_id)

    # -- pseudonym update ------------------------------------------------

    def _rotate(self, rec, r_new, now):
        R_new = r_new * self.params.P
        new_id = pseudonym_for(self.params, self._s, rec.rid, R_new)
        del self.registry[rec.current_id]
        self.registry[new_id] = rec.rid
        rec.current_r, rec.current_R, rec.current_id, rec.issued_at = r_new, R_new, new_id, now
        return rec

    def recover_rid(self, rec):
        return xor_bytes(rec.current_id, self.params.hashes.h_mask(
            self.params.curve.encode_scalar(self._s) + rec.current_R.encode(),
            self.params.mask_bits))

    def process_pseudonym_update(self, req, now, window=DEFAULT_WINDOW_MS, rng=None):
        params = self.params
        rng = rng if rng is not None else secrets.SystemRandom()
        with self._lock:
            rec = self.records.get(self.registry.get(req.id))
            if rec is None:
                raise UnknownPseudonym("update request for an unknown pseudonym")
            check_fresh(req.T, now, window)
            h = params.hashes.h1_scalar(req.id + req.A.encode() + ts_bytes(req.T))
            if req.sigma * req.B != h * params.P + rec.Y:
                raise SignatureInvalid("update request signature does not verify")
            if req.R != rec.R:
                raise RidMismatch("request carries a registration point we did not issue")
            if self.recover_rid(rec) != rec.rid:
                raise RidMismatch("recovered real identity differs from the stored one")
            for _ in range(MAX_ISSUE_DRAWS):
                r_new = random_nonzero_scalar(params.curve, rng)
                candidate = pseudonym_for(params, self._s, rec.rid, r_new * params.P)
                if candidate not in self.registry:
                    break
            else:
                raise RuntimeError("could not draw a fresh pseudonym")
            self._rotate(rec, r_new, now)
            self._append(self._update_event(rec))
            Q = xor_bytes(update_mask(params, rec.y), rec.current_id)
        return PseudonymUpdateReply(Q=Q, T_c=now)

    # -- registry --------------------------------------------------------

    def registry_lookup(self, pid):
        rid = self.registry.get(bytes(pid))
        if rid is None:
            raise UnknownPseudonym("pseudonym is not currently registered")
        rec = self.records[rid]
        return rec.X, rec.Y

    # usable directly as a Vehicle lookup callable
    lookup = registry_lookup

    def export_registry(self):
        out = {}
        for pid, rid in sorted(self.registry.items()):
            rec = self.records[rid]
            out[pid.hex()] = {"X": rec.X.encode().hex(), "Y": rec.Y.encode().hex()}
        return out

    def audit(self):
        """Check every record's key equations; returns a list of problems (empty if sound)."""
        params = self.params
        problems = []
        for rid, rec in self.records.items():
            H = registration_hash(params, rec.reg_id, rec.X, rec.R)
            if rec.y * params.P != rec.R + H * params.P_pub:
                problems.append(f"{rid.hex()[:16]}: y*P != R + H*P_pub")
            if rec.Y != rec.y * params.P:
                problems.append(f"{rid.hex()[:16]}: Y != y*P")
            if self.recover_rid(rec) != rid:
                problems.append(f"{rid.hex()[:16]}: pseudonym does not unmask to rid")
            if self.registry.get(rec.current_id) != rid:
                problems.append(f"{rid.hex()[:16]}: registry entry missing")
        if len(self.registry) != len(self.records):
            problems.append("registry size differs from record count")
        return problems


def registry_lookup_from_export(params, exported):
    """Lookup callable over a registry exported with ``Authority.export_registry``."""
    curve = params.curve
    table = {bytes.fromhex(k): (curve.decode_point(bytes.fromhex(v["X"])),
                                curve.decode_point(bytes.fromhex(v["Y"])))
             for k, v in exported.items()}

    def lookup(pid):
        try:
            return table[bytes(pid)]
        except KeyError:
            raise UnknownPseudonym("pseudonym is not in the exported registry") from None

    return lookup
