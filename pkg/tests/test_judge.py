import base64
import io
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from PIL import Image

from layerflow import judge, rgba


def fixture_dir(tmp_path, bodies):
    for i, b in enumerate(bodies):
        (tmp_path / f"case_{i:03d}.json").write_text(b if isinstance(b, str) else json.dumps(b))
    return judge.FixtureJudgeClient(tmp_path)


def cases(n, methods=("M",)):
    return [{m: [rgba.blank(4, 4), rgba.blank(4, 4)] for m in methods} for _ in range(n)]


def test_all_fives_is_one(tmp_path):
    res = judge.judge_score(cases(4), fixture_dir(tmp_path, [{"M": 5}] * 4))
    assert res.scores == {"M": 1.0} and res.n_valid == 4 and res.errors == []


def test_mean_normalization(tmp_path):
    res = judge.judge_score(cases(3), fixture_dir(tmp_path, [{"M": 4}, {"M": 5}, {"M": 4}]))
    assert res.raw_means["M"] == pytest.approx(13 / 3)
    assert abs(res.scores["M"] - 0.8667) < 1e-4


def test_malformed_cases_excluded_and_counted(tmp_path):
    bodies = [{"M": 3, "N": 2}, {"M": "five", "N": 1}, "{oops", {"M": 6, "N": 1}, {"N": 2}, {"M": True, "N": 1},
              {"M": 4.0, "N": 1}, [1, 2], {"M": 5, "N": 4}]
    res = judge.judge_score(cases(len(bodies), ("M", "N")), fixture_dir(tmp_path, bodies))
    assert res.n_valid == 2 and res.n_errors == 7 and res.n_cases == 9
    assert res.scores == {"M": pytest.approx(0.8), "N": pytest.approx(0.6)}
    assert [i for i, _ in res.errors] == [1, 2, 3, 4, 5, 6, 7]


def test_request_contract(tmp_path):
    client = fixture_dir(tmp_path, [{"A": 2, "B": 3}])
    judge.judge_score(cases(1, ("A", "B")), client)
    (req,) = client.requests
    assert set(req) == {"prompt", "images", "method_names"}
    assert req["method_names"] == ["A", "B"] and req["prompt"] == judge.RUBRIC_PROMPT
    assert len(req["images"]) == 4
    img = Image.open(io.BytesIO(base64.b64decode(req["images"][0])))
    assert img.mode == "RGBA" and img.size == (4, 4)


def test_parse_scores_contract():
    assert judge.parse_scores('{"M": 1, "extra": 9}', ["M"]) == {"M": 1}
    for bad in ('{"M": 0}', '{"M": "5"}', '{"M": 2.5}', "null"):
        with pytest.raises(judge.JudgeResponseError):
            judge.parse_scores(bad, ["M"])


def test_missing_fixture_response_is_counted(tmp_path):
    res = judge.judge_score(cases(2), fixture_dir(tmp_path, [{"M": 2}]))
    assert res.n_valid == 1 and res.n_errors == 1


def test_no_cases_or_methods():
    with pytest.raises(ValueError):
        judge.judge_score([], None)
    with pytest.raises(ValueError):
        judge.judge_score([{}], None)


class _Handler(BaseHTTPRequestHandler):
    calls = 0

    def do_POST(self):
        type(self).calls += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if type(self).calls == 1:
            self.send_response(503)
            self.end_headers()
            return
        out = json.dumps({m: 4 for m in body["method_names"]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


def test_http_client_retries(monkeypatch):
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        monkeypatch.setenv(judge.ENDPOINT_ENV, f"http://127.0.0.1:{server.server_port}/judge")
        client = judge.HttpJudgeClient("http://unused.invalid", timeout=5, backoff=0.01)
        res = judge.judge_score(cases(1), client)
        assert res.scores == {"M": 0.8} and _Handler.calls == 2
    finally:
        server.shutdown()


def test_http_client_gives_up(monkeypatch):
    monkeypatch.delenv(judge.ENDPOINT_ENV, raising=False)
    client = judge.HttpJudgeClient("http://127.0.0.1:9/none", timeout=1, attempts=2, backoff=0.0)
    res = judge.judge_score(cases(1), client)
    assert res.n_errors == 1 and "2 attempts" in res.errors[0][1]
    with pytest.raises(ValueError):
        judge.HttpJudgeClient(None)
