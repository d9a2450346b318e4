"""Score JSON and radiology-style quality reports from captions.

An optional chat-completion endpoint can phrase the output; every remote
answer is re-validated against the locally decoded caption, and any failure
degrades to the deterministic local renderer with ``fallback=True``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .template import (
    ABSENT,
    DESCRIPTIONS,
    HEADERS,
    METRICS,
    ScoreVector,
    Unparseable,
    encode_scores,
    fuzzy_decode,
    strict_decode,
)

log = logging.getLogger(__name__)

SYSTEM_PROMPT_VERSION = "1"
API_KEY_ENV = "IQAGPT_API_KEY"
DEFAULT_TIMEOUT = 30.0
DEFAULT_LLM_MODEL = "gpt-3.5-turbo"
ROLES = ("system", "user", "assistant")
STRUCTURED_MARKER = "STRUCTURED SCORES:"
ACCEPTABLE = "diagnostic quality acceptable"
NOT_ACCEPTABLE = "diagnostic quality not acceptable"

SCORE_PROMPT = "Please rate the quality of this image."
REPORT_PROMPT = "Please write a quality assessment report for this image."


def _rubric_text() -> str:
    lines = []
    for header, name in zip(HEADERS, METRICS):
        lines.append(f"{header}:")
        for k, desc in DESCRIPTIONS[name].items():
            label = "absent" if k is ABSENT else str(k)
            lines.append(f"  {label} = {desc}")
    return "\n".join(lines)


SYSTEM_PROMPT = (
    f"[qcap system prompt v{SYSTEM_PROMPT_VERSION}]\n"
    "You assist radiologists with CT image quality assessment. You receive a quality caption "
    "produced by an image model. Each caption segment names a metric and a rubric description. "
    "The rubric (1 best, 4 worst) is:\n"
    f"{_rubric_text()}\n"
    "When asked to rate, answer with only a JSON object with the keys "
    '"noise_fidelity", "small_structures", "lesion_conspicuity" (null when no lesion) and '
    '"diagnostic_confidence". When asked for a report, write findings covering all four metric '
    "headers verbatim, then an impression line."
)


# local paths --------------------------------------------------------------------

def caption_to_scores(caption: str) -> dict:
    """Fuzzy-decode a caption into the score JSON record; raises ``Unparseable``."""
    scores, _ = fuzzy_decode(caption)
    return scores.as_dict()


def impression_for(s: ScoreVector) -> str:
    return ACCEPTABLE if s.noise_fidelity <= 2 and s.diagnostic_confidence <= 2 else NOT_ACCEPTABLE


@dataclass(frozen=True)
class QualityReport:
    findings: tuple[str, ...]
    impression: str
    scores: ScoreVector

    def render(self) -> str:
        return "\n".join([
            "FINDINGS:",
            *self.findings,
            "",
            f"IMPRESSION: {self.impression}",
            "",
            STRUCTURED_MARKER,
            encode_scores(self.scores),
            "",
        ])


def render_report_fallback(s: ScoreVector) -> QualityReport:
    findings = []
    for header, name in zip(HEADERS, METRICS):
        value = getattr(s, name)
        desc = DESCRIPTIONS[name][value]
        if value is ABSENT:
            findings.append(f"{header}: {desc}.")
        else:
            findings.append(f"{header} is rated {value} of 4: {desc}.")
    return QualityReport(tuple(findings), impression_for(s), s)


def parse_structured_block(report_text: str) -> ScoreVector:
    """Strict-decode the caption line that follows the structured-scores marker."""
    lines = report_text.splitlines()
    try:
        at = lines.index(STRUCTURED_MARKER)
    except ValueError:
        raise ValueError("report has no structured scores block") from None
    if at + 1 >= len(lines):
        raise ValueError("structured scores block is empty")
    return strict_decode(lines[at + 1])


# wire types -----------------------------------------------------------------------

@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"invalid role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0

    def to_wire(self) -> bytes:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
        }
        return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str | None = None
    usage: dict = field(default_factory=dict)

    @classmethod
    def from_wire(cls, payload: dict) -> ChatResponse:
        choice = payload["choices"][0]
        return cls(choice["message"]["content"], choice.get("finish_reason"), payload.get("usage") or {})


class ChatClient(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class HttpChatClient:
    """Minimal OpenAI-compatible chat-completions client."""

    def __init__(self, base_url: str, model: str = DEFAULT_LLM_MODEL, timeout: float = DEFAULT_TIMEOUT,
                 api_key: str | None = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)

    def complete(self, request: ChatRequest) -> ChatResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(f"{self.base_url}/v1/chat/completions", data=request.to_wire(),
                             headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return ChatResponse.from_wire(resp.json())


def build_request(caption: str, mode: str, model: str = DEFAULT_LLM_MODEL) -> ChatRequest:
    prompt = SCORE_PROMPT if mode == "score" else REPORT_PROMPT
    return ChatRequest(model, (ChatMessage("system", SYSTEM_PROMPT),
                               ChatMessage("user", f"{prompt}\nCaption: {caption}")), 0.0)


# LLM path with fallback ---------------------------------------------------------

@dataclass
class SummaryResult:
    mode: str
    text: str
    scores: dict | None
    fallback: bool
    reason: str | None = None


def _local(mode: str, scores: ScoreVector, reason: str | None, fallback: bool) -> SummaryResult:
    if mode == "score":
        text = json.dumps(scores.as_dict(), sort_keys=False)
    else:
        text = render_report_fallback(scores).render()
    return SummaryResult(mode, text, scores.as_dict(), fallback, reason)


def _extract_json(text: str) -> dict:
    match = re.search(r"\{.*\}", text, flags=re.S)
    if match is None:
        raise ValueError("no JSON object in reply")
    return json.loads(match.group(0))


def summarize_via_llm(client: ChatClient | None, caption: str, mode: str,
                      model: str = DEFAULT_LLM_MODEL) -> SummaryResult:
    """Score JSON or report text for ``caption``; never raises on the user path."""
    if mode not in ("score", "report"):
        raise ValueError(f"mode must be 'score' or 'report', got {mode!r}")
    try:
        local, _ = fuzzy_decode(caption)
    except Unparseable as exc:
        return SummaryResult(mode, f"caption could not be decoded: {exc}", None, True, "unparseable caption")
    if client is None:
        return _local(mode, local, "no endpoint configured", True)
    try:
        reply = client.complete(build_request(caption, mode, model)).content
    except Exception as exc:  # transport errors, timeouts, malformed payloads
        log.warning("chat endpoint failed, using local fallback: %s", exc)
        return _local(mode, local, f"endpoint error: {type(exc).__name__}", True)

    if mode == "score":
        try:
            remote = ScoreVector.from_list([_extract_json(reply).get(m) for m in METRICS])
        except (ValueError, TypeError, AttributeError) as exc:
            log.warning("unusable score reply, using local fallback: %s", exc)
            return _local(mode, local, "unparseable reply", True)
        if remote != local:
            log.warning("remote scores %s disagree with caption %s; local wins", remote.as_list(), local.as_list())
            return _local(mode, local, "reply disagrees with caption", True)
        return SummaryResult(mode, json.dumps(remote.as_dict()), remote.as_dict(), False)

    low = reply.lower()
    if not all(h.lower() in low for h in HEADERS):
        log.warning("report reply lacks metric headers, using local fallback")
        return _local(mode, local, "reply misses metric headers", True)
    text = "\n".join([reply.rstrip(), "", STRUCTURED_MARKER, encode_scores(local), ""])
    return SummaryResult(mode, text, local.as_dict(), False)


# interactive session ------------------------------------------------------------

HELP = """commands:
  load <image.ctiq>   load an image raster
  score               rate the loaded image
  report              write a quality report for the loaded image
  help                show this text
  quit                end the session"""


class ChatSession:
    """Single-image dialogue state; one answer per command."""

    def __init__(self, model, client: ChatClient | None = None, llm_model: str = DEFAULT_LLM_MODEL):
        self.model = model
        self.client = client
        self.llm_model = llm_model
        self.image: np.ndarray | None = None
        self.image_path: str | None = None
        self.caption: str | None = None

    def handle(self, line: str) -> dict:
        from .captioner import generate_caption
        from .data import read_raster

        parts = line.strip().split(maxsplit=1)
        cmd = parts[0].lower() if parts else ""
        record = {"type": "exchange", "command": line.strip(), "caption": None, "fallback": None}
        if cmd == "load":
            if len(parts) < 2:
                record["response"] = "error: usage is 'load <image.ctiq>'"
                return record
            try:
                self.image = read_raster(parts[1])
            except (OSError, ValueError) as exc:
                record["response"] = f"error: cannot load {parts[1]}: {exc}"
                return record
            self.image_path, self.caption = parts[1], None
            record["response"] = f"loaded {parts[1]} ({self.image.shape[0]}x{self.image.shape[1]})"
        elif cmd in ("score", "report"):
            if self.image is None:
                record["response"] = "error: no image loaded; use 'load <image.ctiq>' first"
                return record
            if self.caption is None:
                self.caption = generate_caption(self.model, self.image).text
            result = summarize_via_llm(self.client, self.caption, cmd, self.llm_model)
            record.update(caption=self.caption, fallback=result.fallback, scores=result.scores,
                          reason=result.reason)
            record["response"] = result.text + ("\n[fallback: local rendering]" if result.fallback else "")
        else:
            record["response"] = HELP
        return record


def chat_repl(model, transcript_path, stdin=None, stdout=None, client: ChatClient | None = None,
              llm_model: str = DEFAULT_LLM_MODEL) -> int:
    """Run the command loop until ``quit`` or end of input; returns an exit status."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    session = ChatSession(model, client, llm_model)
    path = Path(transcript_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as sink:
        sink.write(json.dumps({"type": "session", "system_prompt_version": SYSTEM_PROMPT_VERSION,
                               "system_prompt": SYSTEM_PROMPT}) + "\n")
        for line in stdin:
            if not line.strip():
                continue
            if line.strip().lower() in ("quit", "exit"):
                break
            record = session.handle(line)
            stdout.write(record["response"] + "\n")
            stdout.flush()
            sink.write(json.dumps(record) + "\n")
            sink.flush()
    return 0
