import json
import threading
import time

import pytest

from medcurate.gateway import (
    ChatRequest,
    GatewayConfig,
    GatewayError,
    LlmGateway,
    MissingFixtureError,
    RateLimiter,
    TransientError,
)


class Echo:
    def __init__(self, fail_first=0, delay=0.0):
        self.calls = 0
        self.fail_first = fail_first
        self.delay = delay
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def __call__(self, payload):
        with self.lock:
            self.calls += 1
            n = self.calls
            self.active += 1
            self.peak = max(self.peak, self.active)
        try:
            if self.delay:
                time.sleep(self.delay)
            if n <= self.fail_first:
                raise TransientError("HTTP 503")
            text = payload["messages"][-1]["content"][0]["text"]
            return {"choices": [{"message": {"content": text.upper()}}], "usage": {"total_tokens": 3}}
        finally:
            with self.lock:
                self.active -= 1


class FakeClock:
    def __init__(self):
        self.now = 0.0
        self.slept = []

    def __call__(self):
        return self.now

    def sleep(self, s):
        self.slept.append(s)
        self.now += s


def gw(tmp_path, mode="record", transport=None, **kw):
    clock = FakeClock()
    cfg = GatewayConfig(mode=mode, fixtures=tmp_path / "fx", **kw)
    return LlmGateway(cfg, transport=transport or Echo(), clock=clock, sleep=clock.sleep), clock


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        GatewayConfig(mode="offline")
    with pytest.raises(ValueError):
        GatewayConfig(mode="replay", fixtures=None)
    with pytest.raises(ValueError):
        GatewayConfig(mode="live", max_concurrency=0)


def test_cache_key_is_stable_and_sensitive(tmp_path):
    g, _ = gw(tmp_path)
    a = ChatRequest("hello")
    assert g.cache_key(a) == g.cache_key(ChatRequest("hello"))
    assert g.cache_key(a) != g.cache_key(ChatRequest("hello", temperature=0.5))
    assert g.cache_key(a) != g.cache_key(ChatRequest("hello", system="s"))
    img = tmp_path / "i.png"
    img.write_bytes(b"one")
    k1 = g.cache_key(ChatRequest("hello", media=(str(img),)))
    img.write_bytes(b"two")
    assert g.cache_key(ChatRequest("hello", media=(str(img),))) != k1


def test_record_then_replay(tmp_path):
    t = Echo()
    g, _ = gw(tmp_path, transport=t)
    r = g.complete(ChatRequest("hi"))
    assert r.text == "HI" and not r.cached
    assert g.fixture_path(r.key).is_file()
    assert g.fixture_path(r.key).parent.name == r.key[:2]
    assert g.complete(ChatRequest("hi")).cached
    assert t.calls == 1 and g.cache_hits == 1

    forbidden = Echo()
    g2, _ = gw(tmp_path, mode="replay", transport=forbidden)
    assert g2.complete(ChatRequest("hi")).text == "HI"
    assert forbidden.calls == 0 and g2.network_calls == 0


def test_replay_miss_names_key(tmp_path):
    g, _ = gw(tmp_path, mode="replay")
    with pytest.raises(MissingFixtureError) as e:
        g.complete(ChatRequest("never recorded"))
    assert e.value.key == g.cache_key(ChatRequest("never recorded"))


def test_write_fixture_serves_replay(tmp_path):
    g, _ = gw(tmp_path, mode="replay")
    key = g.write_fixture(ChatRequest("q"), "canned")
    assert json.loads(g.fixture_path(key).read_text())["response"]["text"] == "canned"
    assert g.complete(ChatRequest("q")).text == "canned"


def test_retries_with_backoff(tmp_path):
    t = Echo(fail_first=2)
    g, clock = gw(tmp_path, transport=t, backoff=0.5, max_attempts=3)
    assert g.complete(ChatRequest("x")).text == "X"
    assert t.calls == 3
    assert clock.slept == [0.5, 1.0]


def test_retries_exhausted(tmp_path):
    g, _ = gw(tmp_path, transport=Echo(fail_first=5), max_attempts=2)
    with pytest.raises(GatewayError, match="after 2 attempts"):
        g.complete(ChatRequest("x"))


def test_rate_limiter_sliding_window():
    clock = FakeClock()
    lim = RateLimiter(2, 60.0, clock, clock.sleep)
    for _ in range(5):
        lim.acquire()
    assert clock.now == pytest.approx(120.0)


def test_concurrency_bound_and_order(tmp_path):
    t = Echo(delay=0.02)
    g = LlmGateway(GatewayConfig(mode="live", max_concurrency=2, requests_per_minute=10_000), transport=t)
    reqs = [ChatRequest(f"r{i}") for i in range(10)]
    out = g.complete_batch(reqs)
    assert [r.text for r in out] == [f"R{i}" for i in range(10)]
    assert t.peak <= 2


def test_identical_inflight_requests_share_one_call(tmp_path):
    t = Echo(delay=0.02)
    g = LlmGateway(GatewayConfig(mode="live", max_concurrency=4, requests_per_minute=10_000), transport=t)
    out = g.complete_batch([ChatRequest("same")] * 6)
    assert {r.text for r in out} == {"SAME"}
    assert t.calls == 1


def test_batch_errors_are_positional(tmp_path):
    g, _ = gw(tmp_path, mode="replay")
    key = g.write_fixture(ChatRequest("b"), "B!")
    out = g.complete_batch([ChatRequest("a"), ChatRequest("b"), ChatRequest("c")])
    assert isinstance(out[0], MissingFixtureError)
    assert out[1].text == "B!" and out[1].key == key
    assert isinstance(out[2], MissingFixtureError)
