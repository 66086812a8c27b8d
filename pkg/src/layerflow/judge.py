"""Structured-rubric judging of layered results from several methods.

All methods' renders for one test case go out in a single request; the
judge answers with a JSON object mapping method name to an integer 1-5.
Per-method means are normalized to [0, 1] by dividing by 5.
"""

from __future__ import annotations

import base64
import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from . import rgba

ENDPOINT_ENV = "LAYERFLOW_JUDGE_ENDPOINT"
SCORE_MIN, SCORE_MAX = 1, 5

RUBRIC_PROMPT = (
    "Several methods were given the same input and each produced a layered poster. "
    "For every method you receive its flattened poster followed by its text, foreground "
    "and background layers. Rate each method with one integer from 1 to 5, where "
    "1 = very poor (chaotic structure, layers clearly inconsistent), 2 = poor, "
    "3 = acceptable with clear flaws, 4 = good, and 5 = very good (clean structure, "
    "sensible layer relationships, coherent as a whole). Judge how well the layers agree "
    "with each other, whether occlusion and depth ordering are plausible, and whether the "
    "flattened poster is readable and well laid out. Reply with only a JSON object that "
    "maps each method name to its integer score."
)


class JudgeResponseError(ValueError):
    pass


class JudgeClient(Protocol):
    name: str

    def request(self, payload: dict) -> str:
        """Send one judging request; return the raw response text."""
        ...


class FixtureJudgeClient:
    """Returns canned responses from ``case_NNN.json`` files, in order."""

    name = "fixture"

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"judge fixture directory {self.directory} does not exist")
        self.files = sorted(self.directory.glob("case_*.json"))
        self.requests: list[dict] = []

    def request(self, payload: dict) -> str:
        i = len(self.requests)
        self.requests.append(payload)
        if i >= len(self.files):
            raise JudgeResponseError(f"no fixture response for case {i}")
        return self.files[i].read_text(encoding="utf-8")


class HttpJudgeClient:
    """POSTs the request as JSON; retries with exponential backoff."""

    name = "http"

    def __init__(self, endpoint: str | None = None, timeout: float = 60.0, attempts: int = 3, backoff: float = 1.0):
        self.endpoint = os.environ.get(ENDPOINT_ENV) or endpoint
        if not self.endpoint:
            raise ValueError(f"no judge endpoint configured (set {ENDPOINT_ENV} or the config)")
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff

    def request(self, payload: dict) -> str:
        body = json.dumps(payload).encode("utf-8")
        last = None
        for attempt in range(self.attempts):
            req = urllib.request.Request(
                self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.read().decode("utf-8")
            except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
                last = e
                if attempt + 1 < self.attempts:
                    time.sleep(self.backoff * 2**attempt)
        raise ConnectionError(f"judge endpoint {self.endpoint} failed after {self.attempts} attempts: {last}")


def build_request(renders: dict[str, list], prompt: str = RUBRIC_PROMPT) -> dict:
    """``renders`` maps method name to its ordered RGBA images."""
    names = list(renders)
    images = [base64.b64encode(rgba.png_bytes(im)).decode("ascii") for n in names for im in renders[n]]
    return {"prompt": prompt, "images": images, "method_names": names}


def parse_scores(text: str, methods: list[str]) -> dict[str, int]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise JudgeResponseError(f"malformed JSON: {e}") from e
    if not isinstance(obj, dict):
        raise JudgeResponseError(f"expected a JSON object, got {type(obj).__name__}")
    out = {}
    for m in methods:
        if m not in obj:
            raise JudgeResponseError(f"missing score for method {m!r}")
        v = obj[m]
        if isinstance(v, bool) or not isinstance(v, int):
            raise JudgeResponseError(f"score for {m!r} is not an integer: {v!r}")
        if not SCORE_MIN <= v <= SCORE_MAX:
            raise JudgeResponseError(f"score for {m!r} is outside {SCORE_MIN}-{SCORE_MAX}: {v}")
        out[m] = v
    return out


@dataclass
class JudgeResult:
    scores: dict[str, float]
    raw_means: dict[str, float]
    n_cases: int
    n_valid: int
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_errors(self) -> int:
        return len(self.errors)


def judge_score(cases: list[dict[str, list]], client: JudgeClient, prompt: str = RUBRIC_PROMPT) -> JudgeResult:
    """Score every case; malformed responses are excluded and recorded."""
    if not cases:
        raise ValueError("no test cases to judge")
    methods = list(cases[0])
    if not methods:
        raise ValueError("at least one method is required")
    totals = {m: 0 for m in methods}
    valid = 0
    errors = []
    for i, renders in enumerate(cases):
        try:
            scores = parse_scores(client.request(build_request(renders, prompt)), list(renders))
        except (JudgeResponseError, ConnectionError) as e:
            errors.append((i, str(e)))
            continue
        valid += 1
        for m in methods:
            totals[m] += scores[m]
    raw = {m: (totals[m] / valid if valid else float("nan")) for m in methods}
    norm = {m: raw[m] / SCORE_MAX for m in methods}
    return JudgeResult(norm, raw, len(cases), valid, errors)
