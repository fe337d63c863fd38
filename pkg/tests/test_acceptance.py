"""Acceptance suite: one test per criterion, each recorded as PASS/FAIL in the
terminal summary (see conftest.py). Run alone with

    pytest tests/test_acceptance.py -v
"""

import random
import time

import pytest

from conftest import ScriptedRng, make_fleet
from eaia.authority import issue_partial_key
from eaia.costmodel import (
    AttackModel, PrimitiveCosts, avg_auth_time, load_schemes, monte_carlo_auth_time,
    scheme_attack_model, table_iv, table_v, table_vii,
)
from eaia.errors import (
    DegenerateEphemeral, MalformedMessage, ReplayDetected, SignatureInvalid, StaleTimestamp,
    TagMismatch, UnknownPseudonym,
)
from eaia.group import P256, TOY
from eaia.netsim import flip_bits, impersonation_probe, load_scenario, run_scenario
from eaia.protocol import (
    _session_key, build_challenge, finalize, process_challenge, real_id_from_vin,
    registration_hash, ts_bytes,
)
from eaia.wire import (
    TYPE_CHALLENGE, TYPE_RESPONSE, decode_message, encode_message, field_spans,
)
from test_wire import sample_messages


class _Recorder:
    def __init__(self, inner):
        self.inner, self.draws = inner, []

    def randrange(self, *args):
        v = self.inner.randrange(*args)
        self.draws.append(v)
        return v


def _expected_key(params, id_i, id_j, z_scalar):
    return params.hashes.h3_key(id_i + id_j + (z_scalar % params.q * params.P).encode())


def _check_registration(params, keys):
    H = registration_hash(params, keys.id, keys.X, keys.R)
    assert keys.y * params.P == keys.R + H * params.P_pub == keys.Y


# -- 1 -------------------------------------------------------------------------------

def _toy_sweep():
    auth, f = make_fleet(TOY, ["I", "J"], seed=19)
    params, q = auth.params, TOY.q
    vi, vj = f["I"], f["J"]
    for v in (vi, vj):
        _check_registration(params, v.keys)
    # discrete logs by repeated addition: an oracle independent of point_mul
    dlog, acc = {}, TOY.identity
    for k in range(q):
        dlog[acc.encode()] = k
        acc = acc + TOY.G
    req = decode_message(vj.auth_request(), params)
    now = 777
    runs = degenerate = 0
    for a in range(1, q):
        for b in range(1, q):
            A = a * TOY.G
            h = params.hashes.h1_scalar(vi.id + A.encode() + ts_bytes(now))
            if (h + vi.keys.y) % q == 0:
                with pytest.raises(DegenerateEphemeral):
                    build_challenge(params, req, vi.keys, now, ScriptedRng([a, b]), max_draws=1)
                degenerate += 1
                continue
            msg, eph = build_challenge(params, req, vi.keys, now, ScriptedRng([a, b]), max_draws=1)
            assert dlog[msg.B.encode()] == b and dlog[eph.A.encode()] == a
            # signature identity, in exponents
            assert msg.sigma * b % q == (h + dlog[vi.keys.Y.encode()]) % q
            for d in range(1, q):
                eph_d = type(eph)(**{**eph.__dict__})
                resp, sk_j, peer = process_challenge(params, msg, vj.keys, auth.registry_lookup,
                                                     now, 500, ScriptedRng([d]))
                assert peer == vi.id and dlog[resp.D.encode()] == d
                sk_i = finalize(params, resp, eph_d, vi.keys, now, 500)
                k = _session_key(params, vi.id, vj.id, eph.A, resp.D, resp.T_b)
                z = d * (k * a + dlog[vi.keys.X.encode()])
                assert sk_i == sk_j == _expected_key(params, vi.id, vj.id, z)
                runs += 1
    # every registration secret on the toy curve satisfies the partial-key identity
    rid = real_id_from_vin("toy-sweep", params)
    for r in range(1, q):
        reply = issue_partial_key(params, auth._s, rid, vi.keys.X, r)
        H = registration_hash(params, reply.id, vi.keys.X, reply.R)
        assert reply.y % q == (r + auth._s * H) % q
    return runs, degenerate


def _p256_runs(n):
    auth, f = make_fleet(P256, [f"V{i}" for i in range(8)], seed=2024)
    params, q = auth.params, P256.q
    names = sorted(f)
    for v in f.values():
        _check_registration(params, v.keys)
    rng = random.Random(99)
    for run in range(n):
        ni, nj = rng.sample(names, 2)
        vi, vj = f[ni], f[nj]
        now = 10 * run
        vi.rng = _Recorder(vi.rng.inner if isinstance(vi.rng, _Recorder) else vi.rng)
        vj.rng = _Recorder(vj.rng.inner if isinstance(vj.rng, _Recorder) else vj.rng)
        ch = vi.on_auth_request(vj.auth_request(), now, handle=run)
        eph = vi.sessions[run]
        a, b = eph.a, eph.b
        msg = decode_message(ch, params)
        h = params.hashes.h1_scalar(vi.id + eph.A.encode() + ts_bytes(now))
        assert msg.sigma * b % q == (h + vi.keys.y) % q
        resp, sk_j, peer = vj.on_challenge(ch, now + 1)
        d = vj.rng.draws[-1]
        sk_i = vi.on_response(resp, now + 2, handle=run)
        k = _session_key(params, vi.id, vj.id, a * P256.G, decode_message(resp, params).D, now + 1)
        z = d * (k * a + vi.keys.x)
        assert peer == vi.id
        assert sk_i == sk_j == _expected_key(params, vi.id, vj.id, z)
    return n


def test_c1_protocol_correctness(criterion):
    with criterion(1, "1000 P-256 runs + exhaustive toy sweep agree on SK; identities hold; < 30 s"):
        t0 = time.perf_counter()
        runs, degenerate = _toy_sweep()
        assert runs + degenerate * 18 == 18 ** 3
        assert _p256_runs(1000) == 1000
        elapsed = time.perf_counter() - t0
        print(f"criterion 1: toy runs {runs}, degenerate sigma refused {degenerate}, "
              f"elapsed {elapsed:.1f} s")
        assert elapsed < 30


# -- 2, 3, 4 ----------------------------------------------------------------------------

def test_c2_table_iv(criterion):
    with criterion(2, "Table IV computation times exact to 3 decimals"):
        rows = {r["scheme"]: r for r in table_iv()}
        want = {"EAIA": 2.354, "PPMA": 0.036, "PPDAS": 15.687, "SPPC": 38.541, "HDMA": 30.311}
        for name, ms in want.items():
            assert rows[name]["time_ms"] == ms
            assert round(rows[name]["time_ms"], 3) == round(rows[name]["published_time_ms"], 3)
        assert "29.781" in rows["HDMA"]["discrepancy_note"]


def test_c3_table_v(criterion):
    with criterion(3, "Table V transmission/propagation delays"):
        rows = {r["message_bits"]: r for r in table_v()}
        want = {1312: 52.48, 1504: 60.16, 1696: 67.84, 2272: 90.88, 3216: 128.64}
        for bits, tt in want.items():
            assert abs(rows[bits]["tt_us"] - tt) < 0.005
            assert rows[bits]["tp_us"] == pytest.approx(200 / 3e8 * 1e6, abs=5e-4)
            assert round(rows[bits]["tp_us"], 2) == rows[bits]["published_tp_us"] == 0.67
            assert rows[bits]["matches_published"]


def test_c4_table_vii(criterion):
    with criterion(4, "Table VII energy totals; PPMA per-bit value flagged"):
        rows = {r["scheme"]: r for r in table_vii()}
        want = {"EAIA": 36.473, "HDMA": 150.245, "PPDAS": 66.804, "SPPC": 58.620}
        for name, total in want.items():
            assert rows[name]["total_mj"] == total
        ppma = rows["PPMA"]
        assert ppma["transmit_mj"] == 1.459
        assert ppma["published_transmit_mj"] == 14.588
        assert not ppma["matches_published"] and "14.588" in ppma["discrepancy_note"]


# -- 5 ----------------------------------------------------------------------------------

def test_c5_attack_time(criterion):
    with criterion(5, "analytic attack-time model within 3 SE of Monte Carlo (1e5 trials)"):
        eaia = scheme_attack_model(load_schemes()["EAIA"], PrimitiveCosts.default(), 0.0)
        fixtures = [
            AttackModel(0.0, [5.0], 10.0),
            AttackModel(0.0, eaia.t_fail, eaia.t_success),
            AttackModel(0.0, [0.5, 7.0, 2.0, 11.0], 3.0),
        ]
        worst = 0.0
        for fi, base in enumerate(fixtures):
            m0 = AttackModel(0.0, base.t_fail, base.t_success)
            assert avg_auth_time(m0) == base.t_success
            for pi, p in enumerate((0.1, 0.3, 0.5, 0.7, 0.9)):
                m = AttackModel(p, base.t_fail, base.t_success)
                mean, se = monte_carlo_auth_time(m, 100_000, seed=[fi, pi])
                z = abs(mean - avg_auth_time(m)) / se
                worst = max(worst, z)
                assert z <= 3, (fi, p, mean, avg_auth_time(m), se)
        print(f"criterion 5: worst |z| = {worst:.2f}")


# -- 6 ----------------------------------------------------------------------------------

def _mutation_outcome(fleet, params, field, bit_rng, now):
    vi, vj = fleet["V1"], fleet["V2"]
    ch = vi.on_auth_request(vj.auth_request(), now, handle=now)
    if field in ("B", "N", "sigma"):
        s, e = field_spans(ch)[field]
        bad = flip_bits(ch, s, e, [bit_rng.randrange(8 * (e - s))])
        vi.abort(now)
        try:
            vj.on_challenge(bad, now)
        except (SignatureInvalid, TagMismatch) as exc:
            return type(exc).__name__
        return "accepted"
    resp, _, _ = vj.on_challenge(ch, now)
    s, e = field_spans(resp)[field]
    bad = flip_bits(resp, s, e, [bit_rng.randrange(8 * (e - s))])
    try:
        vi.on_response(bad, now, handle=now)
    except (SignatureInvalid, TagMismatch) as exc:
        return type(exc).__name__
    return "accepted"


def test_c6_adversarial_suite(criterion):
    with criterion(6, "replay, single-bit tamper, impersonation and privacy checks"):
        # replay beyond and within the window, through the simulator
        data = run_scenario(load_scenario("replay.json")).data
        assert data["adversary"][0]["outcome"] == StaleTimestamp.__name__
        assert data["adversary"][1]["outcome"] == ReplayDetected.__name__

        auth, f = make_fleet(P256, ["V1", "V2", "V3"], seed=606)
        params = auth.params
        ch = f["V1"].on_auth_request(f["V2"].auth_request(), 0, handle="r")
        f["V2"].on_challenge(ch, 0)
        with pytest.raises(ReplayDetected):
            f["V2"].on_challenge(ch, 400)
        with pytest.raises(StaleTimestamp):
            f["V2"].on_challenge(ch, 1200)

        # 500 seeded single-bit mutations, 100 per field
        bit_rng = random.Random(6)
        outcomes = {}
        now = 10_000
        for field in ("B", "N", "sigma", "eta", "D"):
            for _ in range(100):
                now += 1000  # keeps every session outside the previous window
                out = _mutation_outcome(f, params, field, bit_rng, now)
                outcomes[(field, out)] = outcomes.get((field, out), 0) + 1
        print(f"criterion 6: mutation outcomes {sorted(outcomes.items())}")
        assert sum(outcomes.values()) == 500
        assert all(out != "accepted" for _, out in outcomes)

        # impersonation without the target's (x, y)
        rng = random.Random(66)
        target, responder = f["V1"], f["V2"]
        results = {}
        captured = f["V1"].on_auth_request(responder.auth_request(), 0, handle="cap")
        for i in range(1000):
            out = impersonation_probe(params, responder, target.id, "random_sigma", rng, 50_000 + i)
            results[out] = results.get(out, 0) + 1
        for i in range(100):
            out = impersonation_probe(params, responder, target.id, "own_keys", rng, 60_000 + i,
                                      adversary_keys=f["V3"].keys)
            results[out] = results.get(out, 0) + 1
        for i in range(50):
            out = impersonation_probe(params, responder, target.id, "reuse_sigma", rng, 1 + i,
                                      captured=captured)
            results[out] = results.get(out, 0) + 1
        print(f"criterion 6: impersonation outcomes {results}")
        assert results == {"SignatureInvalid": 1150}

        # no pseudonym (current or retired) appears in a challenge or response,
        # and no real identity appears in any frame, over 1000 runs with updates
        auth, f = make_fleet(P256, ["V1", "V2", "V3", "V4"], seed=616)
        params = auth.params
        names = sorted(f)
        rids = set(auth.records)
        issued = {v.id for v in f.values()}
        frames = []
        rng = random.Random(61)
        for run in range(1000):
            now = 1000 * run
            if run % 100 == 99:
                v = f[names[run // 100 % 4]]
                req = decode_message(v.pseudonym_update_request(now), params)
                reply = auth.process_pseudonym_update(req, now, rng=rng)
                reply_frame = encode_message(reply, params)
                issued.add(v.on_pseudonym_update_reply(reply_frame, now))
                frames.append(reply_frame)
            ni, nj = rng.sample(names, 2)
            req = f[nj].auth_request()
            chf = f[ni].on_auth_request(req, now, handle=run)
            resp, sk_j, _ = f[nj].on_challenge(chf, now)
            assert f[ni].on_response(resp, now, handle=run) == sk_j
            frames += [req, chf, resp]
        leaks = sum(1 for fr in frames if fr[0] in (TYPE_CHALLENGE, TYPE_RESPONSE)
                    and any(pid in fr for pid in issued))
        rid_leaks = sum(1 for fr in frames if any(rid in fr for rid in rids))
        print(f"criterion 6: {len(issued)} pseudonyms, {len(frames)} frames, "
              f"{leaks} pseudonym leaks, {rid_leaks} real-identity leaks")
        assert len(issued) == 14
        assert leaks == 0 and rid_leaks == 0


# -- 7 ----------------------------------------------------------------------------------

def _update_round_trips(curve):
    auth, f = make_fleet(curve, [f"V{i}" for i in range(20)], seed=707)
    params = auth.params
    for rid, rec in auth.records.items():
        assert auth.recover_rid(rec) == rid
    rng = random.Random(7)
    for i, name in enumerate(sorted(f)[:10]):
        v = f[name]
        rid = auth.registry[v.id]
        for t in range(3):
            now = 100 * (3 * i + t)
            old = v.id
            req = decode_message(v.pseudonym_update_request(now), params)
            reply = auth.process_pseudonym_update(req, now, rng=rng)
            new = v.on_pseudonym_update_reply(encode_message(reply, params), now)
            assert new == auth.records[rid].current_id
            assert auth.registry[new] == rid
            with pytest.raises(UnknownPseudonym):
                auth.registry_lookup(old)
            assert auth.recover_rid(auth.records[rid]) == rid
    assert auth.audit() == []


def test_c7_registration_and_update(criterion):
    with criterion(7, "registration and pseudonym-update round trips (toy and P-256)"):
        for curve in (TOY, P256):
            _update_round_trips(curve)


# -- 8 ----------------------------------------------------------------------------------

def test_c8_fuzzed_decode(criterion):
    with criterion(8, "1e5 fuzzed decodes never crash; encode/decode identity"):
        params_by_curve = [make_fleet(c, ["V1"], seed=8)[0].params for c in (TOY, P256)]
        rng = random.Random(8)
        valid = malformed = 0
        for params in params_by_curve:
            samples = [encode_message(m, params) for m in sample_messages(params, rng)]
            for m in sample_messages(params, random.Random(80)):
                frame = encode_message(m, params)
                assert decode_message(frame, params) == m
            for i in range(50_000):
                kind = i % 3
                if kind == 0:
                    data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 300)))
                elif kind == 1:
                    buf = bytearray(rng.choice(samples))
                    for _ in range(rng.randrange(1, 6)):
                        buf[rng.randrange(len(buf))] = rng.randrange(256)
                    data = bytes(buf)
                else:
                    base = rng.choice(samples)
                    cut = rng.randrange(len(base) + 1)
                    data = base[:cut] + bytes(rng.randrange(256) for _ in range(rng.randrange(4)))
                try:
                    msg = decode_message(data, params)
                except MalformedMessage:
                    malformed += 1
                    continue
                assert encode_message(msg, params) == data
                valid += 1
        print(f"criterion 8: {valid} valid, {malformed} malformed of {valid + malformed}")
        assert valid + malformed == 100_000


# -- 9 ----------------------------------------------------------------------------------

def test_c9_determinism(criterion, tmp_path):
    with criterion(9, "identical (scenario, seed) gives byte-identical report JSON"):
        for name in ("honest.json", "replay.json", "faults.json", "toy_lossy.json",
                     "ephemeral_leak.json"):
            sc = load_scenario(name)
            assert run_scenario(sc).to_json() == run_scenario(sc).to_json()
        from eaia.cli import main
        for d in ("a", "b"):
            assert main(["sim", "mitm.json", "--seed", "3", "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a" / "mitm.report.json").read_bytes() == \
            (tmp_path / "b" / "mitm.report.json").read_bytes()
        assert (tmp_path / "a" / "mitm.summary.csv").read_bytes() == \
            (tmp_path / "b" / "mitm.summary.csv").read_bytes()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
