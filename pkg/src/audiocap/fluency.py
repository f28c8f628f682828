"""Fluency error detection and gated post-correction.

A deterministic rule detector stands in for a learned error classifier:
each rule fires at a fixed 0.95 probability, strictly above the 0.90
activation gate. Correction is rule-based (loop collapse, stutter
collapse, trailing-conjunction strip) or delegated to an external
chat-completions endpoint with a fixed revision prompt.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import requests

from .metrics import metric_tokenize

RULE_PROBABILITY = 0.95
TRAILING_CONJUNCTIONS = ("and", "then", "with", "of", "a", "the", "to")

REVISION_PROMPT = ("Revise the sentence to make it more correct and idiomatic: "
                   "\n rain is falling on a tin roof ==> "
                   "rain is falling on the tin roof \n <Text> ==>")
TEXT_SLOT = "<Text>"

MODES = ("rules", "external", "external_with_rules_fallback")


class CorrectorError(RuntimeError):
    pass


class Timeout(CorrectorError):
    pass


class HttpError(CorrectorError):
    pass


class MalformedResponse(CorrectorError):
    pass


class MissingApiKey(CorrectorError):
    pass


@dataclass
class ErrorAssessment:
    probability: float
    triggered_rules: list[str] = field(default_factory=list)


@dataclass
class CorrectorConfig:
    threshold: float = 0.90
    mode: str = "rules"
    endpoint: str = ""
    model: str = "gpt-3.5-turbo"
    api_key_env: str = "AUDIOCAP_API_KEY"
    timeout: float = 30.0
    retries: int = 2
    backoff_base: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def _repeat_run(tokens: list[str], start: int, n: int) -> int:
    """Count of consecutive occurrences of tokens[start:start+n]."""
    unit = tokens[start:start + n]
    k = 1
    while tokens[start + k * n:start + (k + 1) * n] == unit:
        k += 1
    return k


def detect_errors(text: str) -> ErrorAssessment:
    """Rules over the normalized token stream; probability is the max fired.

    R1: some n-gram (n >= 3) repeated consecutively >= 3 times.
    R2: final token is a dangling conjunction/article.
    R3: fewer than 2 tokens.
    R4: same single token >= 3 times consecutively.
    """
    tokens = metric_tokenize(text)
    fired = []
    if any(_repeat_run(tokens, i, n) >= 3
           for n in range(3, len(tokens) // 3 + 1)
           for i in range(len(tokens) - 3 * n + 1)):
        fired.append("R1")
    if tokens and tokens[-1] in TRAILING_CONJUNCTIONS:
        fired.append("R2")
    if len(tokens) < 2:
        fired.append("R3")
    if any(_repeat_run(tokens, i, 1) >= 3 for i in range(len(tokens) - 2)):
        fired.append("R4")
    prob = RULE_PROBABILITY if fired else 0.0
    return ErrorAssessment(probability=prob, triggered_rules=fired)


def correct_with_rules(text: str) -> str:
    """Collapse >= 3-fold loops/stutters and strip trailing conjunctions.

    Longest repeating unit first so a phrase loop collapses as a whole
    rather than via its sub-repetitions; idempotent by fixpoint.
    """
    tokens = metric_tokenize(text)
    while True:
        site = None
        for n in range(len(tokens) // 3, 0, -1):  # longest unit first
            for i in range(len(tokens) - 3 * n + 1):
                if _repeat_run(tokens, i, n) >= 3:
                    site = (i, n, _repeat_run(tokens, i, n))
                    break
            if site:
                break
        if site is None:
            break
        i, n, k = site
        tokens = tokens[:i + n] + tokens[i + k * n:]
    while tokens and tokens[-1] in TRAILING_CONJUNCTIONS:
        tokens.pop()
    return " ".join(tokens)


def _strip_quotes(text: str) -> str:
    out = text.strip()
    while len(out) >= 2 and out[0] == out[-1] and out[0] in "\"'":
        out = out[1:-1].strip()
    return out


def build_revision_request(text: str, cfg: CorrectorConfig) -> dict:
    """Chat-completions request body carrying the revision prompt."""
    return {"model": cfg.model,
            "messages": [{"role": "user",
                          "content": REVISION_PROMPT.replace(TEXT_SLOT, text)}],
            "temperature": 0}


def correct_external(text: str, cfg: CorrectorConfig) -> str:
    if not cfg.endpoint:
        raise HttpError("no endpoint configured")
    headers = {"Content-Type": "application/json"}
    if cfg.api_key_env:
        key = os.environ.get(cfg.api_key_env)
        if key is None:
            raise MissingApiKey(f"environment variable {cfg.api_key_env} unset")
        headers["Authorization"] = f"Bearer {key}"
    body = build_revision_request(text, cfg)

    last: CorrectorError | None = None
    for attempt in range(cfg.retries + 1):
        if attempt:
            time.sleep(cfg.backoff_base * (2 ** (attempt - 1)))
        try:
            resp = requests.post(cfg.endpoint, json=body, headers=headers,
                                 timeout=cfg.timeout)
        except requests.Timeout as e:
            last = Timeout(str(e))
            continue
        except requests.RequestException as e:
            last = HttpError(str(e))
            continue
        if resp.status_code >= 500:
            last = HttpError(f"status {resp.status_code}")
            continue
        if resp.status_code >= 400:
            raise HttpError(f"status {resp.status_code}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, ValueError, KeyError, IndexError,
                TypeError) as e:
            raise MalformedResponse(str(e)) from e
        if not isinstance(content, str):
            raise MalformedResponse("completion content is not a string")
        return _strip_quotes(content)
    assert last is not None
    raise last


@dataclass
class CorrectionResult:
    text: str
    pre: ErrorAssessment
    post: ErrorAssessment
    corrected: bool
    warnings: list[str] = field(default_factory=list)


def correction_pipeline(text: str, cfg: CorrectorConfig | None = None,
                        detector=detect_errors) -> CorrectionResult:
    """Correct only when the error probability strictly exceeds the gate."""
    if cfg is None:
        cfg = CorrectorConfig()
    pre = detector(text)
    if not pre.probability > cfg.threshold:
        return CorrectionResult(text=text, pre=pre, post=pre, corrected=False)
    warnings: list[str] = []
    if cfg.mode == "rules":
        fixed = correct_with_rules(text)
    elif cfg.mode == "external":
        fixed = correct_external(text, cfg)
    else:
        try:
            fixed = correct_external(text, cfg)
        except CorrectorError as e:
            warnings.append(f"external corrector failed ({e}); used rules")
            fixed = correct_with_rules(text)
    post = detector(fixed)
    return CorrectionResult(text=fixed, pre=pre, post=post, corrected=True,
                            warnings=warnings)
