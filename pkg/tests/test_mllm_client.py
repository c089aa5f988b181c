import json
import threading
import time

import numpy as np
import pytest

from matforge.errors import AuthError, MalformedResponse, NoValidChoice, RateLimited
from matforge.errors import TransportError
from matforge.mllm_client import (
    MLLMClient,
    MLLMResponse,
    MockTransport,
    PromptPayload,
    ReplayTransport,
    extract_choice,
    image_part,
    parse_json_object,
    request_hash,
    text_part,
)


def _payload(text="pick one"):
    return PromptPayload(system="sys", turns=[[text_part(text)]], expect_json=True)


def _client(script, **kw):
    sleeps = []
    transport = MockTransport(script)
    client = MLLMClient(transport, model="mock", sleep=sleeps.append, **kw)
    return client, transport, sleeps


def test_json_choice_parsed():
    client, _, _ = _client(['{"choice": 3}'])
    resp = client.complete(_payload())
    assert resp.parsed == {"choice": 3}
    assert resp.text == '{"choice": 3}'


def test_code_fence_stripped():
    assert parse_json_object('Sure:\n```json\n{"choice": "wood"}\n```') == {"choice": "wood"}
    assert parse_json_object("no json here") is None
    assert parse_json_object('[1, 2] then {"a": 1}') == {"a": 1}


def test_retry_after_rate_limit():
    client, transport, sleeps = _client([(429, {}), (429, {}), '{"choice": "metal"}'])
    resp = client.complete(_payload())
    assert resp.parsed["choice"] == "metal"
    assert sleeps == [1, 2]
    assert transport.calls == 3


def test_rate_limit_exhausted():
    client, transport, sleeps = _client([(429, {})] * 10)
    with pytest.raises(RateLimited):
        client.complete(_payload())
    assert sleeps == [1, 2, 4]
    assert transport.calls == 4


def test_server_errors_retry_then_fail():
    client, _, sleeps = _client([(503, {})] * 10)
    with pytest.raises(TransportError):
        client.complete(_payload())
    assert sleeps == [1, 2, 4]


@pytest.mark.parametrize("status", [401, 403])
def test_auth_error_no_retry(status):
    client, transport, sleeps = _client([(status, {"error": "bad key"}), "never"])
    with pytest.raises(AuthError):
        client.complete(_payload())
    assert transport.calls == 1 and sleeps == []


def test_malformed_body():
    client, _, _ = _client([(200, {"unexpected": True})])
    with pytest.raises(MalformedResponse):
        client.complete(_payload())


def test_request_shape():
    client, transport, _ = _client(["ok"])
    png = image_part(np.zeros((2, 2, 3)))
    client.complete(PromptPayload(system="s", turns=[[png, text_part("q")]], max_tokens=7))
    req = transport.requests[0]
    assert req["temperature"] == 0 and req["max_tokens"] == 7 and req["model"] == "mock"
    assert req["messages"][0] == {"role": "system", "content": "s"}
    url = req["messages"][1]["content"][0]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")


def test_payload_invariants():
    with pytest.raises(ValueError):
        PromptPayload(system="s", turns=[])
    with pytest.raises(ValueError):
        PromptPayload(system="s", turns=[[text_part("q")]], temperature=0.7)
    with pytest.raises(ValueError):
        image_part(b"x" * (20 * 1024 * 1024 + 1))


def test_extract_choice_json():
    resp = MLLMResponse('{"choice":"metal"}', {"choice": "metal"})
    assert extract_choice(resp, ["metal", "wood"]) == "metal"
    resp = MLLMResponse('{"choice":"METAL"}', {"choice": "METAL"})
    assert extract_choice(resp, ["metal", "wood"]) == "metal"


def test_extract_choice_text_fallback():
    assert extract_choice(MLLMResponse("The material is Wood."), ["metal", "wood"]) == "wood"


def test_extract_choice_ambiguous():
    with pytest.raises(NoValidChoice):
        extract_choice(MLLMResponse("could be metal or wood"), ["metal", "wood"])
    with pytest.raises(NoValidChoice):
        extract_choice(MLLMResponse("no idea"), ["metal", "wood"])


def test_extract_choice_invalid_json_choice():
    with pytest.raises(NoValidChoice):
        extract_choice(MLLMResponse('{"choice": "glass"}', {"choice": "glass"}),
                       ["metal", "wood"])


def test_extract_choice_whole_words():
    # "oak" must not match inside "cloak"
    assert extract_choice(MLLMResponse("a cloak of steel"), ["oak", "steel"]) == "steel"


def test_record_then_replay(tmp_path):
    log = tmp_path / "session.jsonl"
    answers = iter(['{"choice": "a"}', (429, {}), '{"choice": "b"}'])
    client, _, _ = _client(lambda req: next(answers), log_path=log)
    first = [client.complete(_payload("q1")), client.complete(_payload("q2"))]
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [x["status"] for x in lines] == [200, 429, 200]
    assert lines[0]["request_hash"] == request_hash(lines[0]["request"])

    replay = MLLMClient(ReplayTransport(log), model="mock", sleep=lambda s: None)
    again = [replay.complete(_payload("q1")), replay.complete(_payload("q2"))]
    assert [r.text for r in again] == [r.text for r in first]
    with pytest.raises(TransportError):
        replay.complete(_payload("never recorded"))


def test_in_flight_cap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def slow(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return "ok"

    client, _, _ = _client(slow, max_in_flight=2)
    threads = [threading.Thread(target=client.complete, args=(_payload(),)) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] == 2


def test_from_env_requires_key(monkeypatch):
    monkeypatch.delenv("MLLM_API_KEY", raising=False)
    with pytest.raises(AuthError):
        MLLMClient.from_env()
