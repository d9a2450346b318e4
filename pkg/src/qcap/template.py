"""Lossless mapping between rubric score vectors and quality-caption text.

A caption has four ``"; "``-separated segments, one per metric, each of the
form ``"<Header>: <description>"``. Descriptions come from a closed lexicon
of 17 strings (four per metric plus one for an absent lesion).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from rapidfuzz import fuzz
from rapidfuzz.distance import Levenshtein

LEXICON_VERSION = "1"

METRICS = (
    "noise_fidelity",
    "small_structures",
    "lesion_conspicuity",
    "diagnostic_confidence",
)

HEADERS = (
    "Image noise and structural fidelity",
    "Visibility of small structures",
    "Subjective visual lesion conspicuity",
    "Diagnostic confidence",
)

ABSENT = None
ABSENT_DESCRIPTION = "not applicable, no lesion present"

DESCRIPTIONS: dict[str, dict[int | None, str]] = {
    "noise_fidelity": {
        1: "better than usual, acceptable for diagnostic interpretation",
        2: "average, acceptable for diagnostic interpretation",
        3: "sub-optimal, for limited diagnostic information only",
        4: "unacceptable for diagnostic interpretation",
    },
    "small_structures": {
        1: "excellent visualization",
        2: "acceptable visibility",
        3: "sub-optimal visibility",
        4: "unacceptable visualization",
    },
    "lesion_conspicuity": {
        1: "well-seen lesion with well-visualized margins",
        2: "well-seen lesion with poorly visualized margins",
        3: "poorly seen lesion with poorly visualized margins",
        4: "lesion blurred with severe loss of margins",
        ABSENT: ABSENT_DESCRIPTION,
    },
    "diagnostic_confidence": {
        1: "completely confident",
        2: "probably confident",
        3: ("confident only for a limited clinical entity such as a kidney stone, "
            "a calcified lesion, or a large lesion"),
        4: "poor confidence",
    },
}

SEPARATOR = "; "
# normalized edit distance above which a segment body is rejected
FUZZY_BUDGET = 0.5
# minimum partial-ratio score for locating a mutated header
HEADER_MATCH = 80.0


class MalformedCaption(ValueError):
    def __init__(self, segment: int, reason: str):
        super().__init__(f"segment {segment}: {reason}")
        self.segment = segment
        self.reason = reason


class Unparseable(ValueError):
    def __init__(self, message: str, distances: list[float | None] | None = None):
        super().__init__(message)
        self.distances = distances or []


@dataclass(frozen=True)
class ScoreVector:
    noise_fidelity: int
    small_structures: int
    lesion_conspicuity: int | None
    diagnostic_confidence: int

    def __post_init__(self):
        for name in METRICS:
            value = getattr(self, name)
            if value is ABSENT and name == "lesion_conspicuity":
                continue
            if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 4:
                raise ValueError(f"{name} must be an integer in 1..4, got {value!r}")

    @classmethod
    def from_list(cls, values) -> ScoreVector:
        if len(values) != 4:
            raise ValueError("a score vector has exactly four entries")
        return cls(*[None if v is None else int(v) for v in values])

    def as_list(self) -> list[int | None]:
        return [getattr(self, name) for name in METRICS]

    def as_dict(self) -> dict[str, int | None]:
        return {name: getattr(self, name) for name in METRICS}

    @property
    def lesion_present(self) -> bool:
        return self.lesion_conspicuity is not ABSENT


def all_score_vectors() -> list[ScoreVector]:
    """All 4 x 4 x 5 x 4 = 320 valid score vectors."""
    return [ScoreVector(a, b, c, d)
            for a, b, c, d in itertools.product(range(1, 5), range(1, 5), [1, 2, 3, 4, ABSENT], range(1, 5))]


def description_for(metric: str | int, score: int | None) -> str:
    name = METRICS[metric] if isinstance(metric, int) else metric
    if name not in DESCRIPTIONS:
        raise ValueError(f"unknown metric {metric!r}")
    if score is ABSENT and name != "lesion_conspicuity":
        raise ValueError(f"{name} cannot be absent")
    if score is not ABSENT and (isinstance(score, bool) or score not in (1, 2, 3, 4)):
        raise ValueError(f"score {score!r} out of range")
    return DESCRIPTIONS[name][score]


def encode_scores(scores: ScoreVector) -> str:
    return SEPARATOR.join(
        f"{header}: {description_for(name, getattr(scores, name))}"
        for header, name in zip(HEADERS, METRICS)
    )


def strict_decode(text: str) -> ScoreVector:
    """Inverse of ``encode_scores``; accepts only the byte-exact canonical form."""
    if text.endswith("\n"):
        text = text[:-1]
    segments = text.split(SEPARATOR)
    values = []
    for i, (header, name) in enumerate(zip(HEADERS, METRICS)):
        if i >= len(segments):
            raise MalformedCaption(i, "missing segment")
        prefix = header + ": "
        seg = segments[i]
        if not seg.startswith(prefix):
            raise MalformedCaption(i, f"expected header {header!r}")
        body = seg[len(prefix):]
        # the metric-4 score-3 description contains ", " but never "; "
        matches = [score for score, desc in DESCRIPTIONS[name].items() if desc == body]
        if not matches:
            raise MalformedCaption(i, f"unknown description {body!r}")
        values.append(matches[0])
    if len(segments) != len(HEADERS):
        raise MalformedCaption(len(HEADERS), "trailing content")
    return ScoreVector(*values)


def _segments_by_header(text: str) -> list[str | None]:
    """Anchor each header by approximate substring alignment; bodies lie between."""
    low = text.strip().lower()
    spans = []
    cursor = 0
    for header in HEADERS:
        h = header.lower()
        found = low.find(h, cursor)
        if found >= 0:
            span = (found, found + len(h))
        else:
            hit = fuzz.partial_ratio_alignment(h, low[cursor:], score_cutoff=HEADER_MATCH)
            span = None if hit is None else (cursor + hit.dest_start, cursor + hit.dest_end)
        spans.append(span)
        if span is not None:
            cursor = span[1]
    bodies: list[str | None] = []
    for i, span in enumerate(spans):
        if span is None:
            bodies.append(None)
            continue
        nxt = next((s[0] for s in spans[i + 1:] if s is not None), len(low))
        body = low[span[1]:nxt].strip()
        if body.startswith(":"):
            body = body[1:]
        bodies.append(body.strip(" ;"))
    return bodies


def _segments_by_colon(text: str) -> list[str | None] | None:
    """Split on the four header colons; descriptions never contain ':'."""
    pieces = text.strip().lower().split(":")
    if len(pieces) != len(HEADERS) + 1:
        return None
    bodies = []
    for k in range(1, len(HEADERS)):
        piece = pieces[k]
        nxt = HEADERS[k].lower()
        # the tail of each piece is the next segment's header
        cut = min(range(len(piece) + 1),
                  key=lambda j: (Levenshtein.distance(piece[j:].strip(" ;"), nxt), -j))
        bodies.append(piece[:cut].strip(" ;"))
    bodies.append(pieces[-1].strip(" ;"))
    return bodies


def _match_bodies(bodies: list[str | None]):
    values: list[int | None] = []
    distances: list[int | None] = []
    failed = []
    for i, (name, body) in enumerate(zip(METRICS, bodies)):
        if body is None:
            values.append(None)
            distances.append(None)
            failed.append(i)
            continue
        d, score, desc = min(
            ((Levenshtein.distance(body, desc), k, desc) for k, desc in DESCRIPTIONS[name].items()),
            key=lambda item: item[0],
        )
        distances.append(d)
        if d / max(len(body), len(desc), 1) > FUZZY_BUDGET:
            values.append(None)
            failed.append(i)
        else:
            values.append(score)
    return values, distances, failed


def fuzzy_decode(text: str) -> tuple[ScoreVector, list[int]]:
    """Decode a possibly imperfect caption to the nearest lexicon entries.

    Returns the score vector and the Levenshtein distance of each segment
    body to its chosen description. Raises ``Unparseable`` when any segment
    cannot be recovered within the edit budget.
    """
    attempts = [_match_bodies(_segments_by_header(text))]
    by_colon = _segments_by_colon(text)
    if by_colon is not None:
        attempts.append(_match_bodies(by_colon))
    good = [a for a in attempts if not a[2]]
    if not good:
        values, distances, failed = attempts[0]
        raise Unparseable(f"unrecoverable segments {failed}", distances)
    values, distances, _ = min(good, key=lambda a: sum(a[1]))
    return ScoreVector(*values), distances


def lexicon_table() -> dict:
    """The description lexicon as a JSON-ready record."""
    return {
        "version": LEXICON_VERSION,
        "headers": dict(zip(METRICS, HEADERS)),
        "descriptions": {
            name: {("absent" if k is ABSENT else str(k)): v for k, v in table.items()}
            for name, table in DESCRIPTIONS.items()
        },
    }
