import contextlib
import random

import pytest

from eaia.authority import Authority
from eaia.group import P256, TOY
from eaia.protocol import Vehicle, real_id_from_vin, verify_registration

_ACCEPTANCE = pytest.StashKey[list]()


class ScriptedRng:
    """randrange() that returns a fixed script, then fails loudly."""

    def __init__(self, values):
        self.values = list(values)

    def randrange(self, *args):
        if not self.values:
            raise LookupError("script exhausted")
        return self.values.pop(0)


def make_fleet(curve, names, seed=0, window=500):
    rng = random.Random(seed)
    auth = Authority.setup(curve, rng)
    params = auth.params
    fleet = {}
    for name in names:
        x = rng.randrange(1, curve.q)
        reply = auth.register(real_id_from_vin(name, params), x * curve.G, rng)
        keys = verify_registration(params, reply, x)
        fleet[name] = Vehicle(name, params, keys, auth.registry_lookup, window,
                              random.Random(f"{seed}:{name}"))
    return auth, fleet


def run_session(vi, vj, now=1000, handle=0):
    """Three-message exchange, vi challenging vj. Returns (sk_i, sk_j, frames)."""
    req = vj.auth_request()
    ch = vi.on_auth_request(req, now, handle)
    resp, sk_j, _ = vj.on_challenge(ch, now + 1)
    sk_i = vi.on_response(resp, now + 2, handle)
    return sk_i, sk_j, (req, ch, resp)


@pytest.fixture(params=[TOY, P256], ids=["toy", "p256"])
def curve(request):
    return request.param


@pytest.fixture
def fleet(curve):
    return make_fleet(curve, ["V1", "V2", "V3"], seed=11)


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion's verdict."""
    results = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextlib.contextmanager
    def record(number, title):
        try:
            yield
        except BaseException:
            results.append((number, title, False))
            raise
        results.append((number, title, True))

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok in sorted(results):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
