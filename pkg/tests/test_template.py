import itertools
import json

import pytest
from rapidfuzz.distance import Levenshtein

from qcap.template import (
    ABSENT,
    DESCRIPTIONS,
    HEADERS,
    METRICS,
    MalformedCaption,
    ScoreVector,
    Unparseable,
    all_score_vectors,
    description_for,
    encode_scores,
    fuzzy_decode,
    lexicon_table,
    strict_decode,
)

SAMPLE_CAPTION = (
    "Image noise and structural fidelity: unacceptable for diagnostic interpretation; "
    "Visibility of small structures: unacceptable visualization; "
    "Subjective visual lesion conspicuity: well-seen lesion with poorly visualized margins; "
    "Diagnostic confidence: poor confidence"
)


def test_rubric_strings():
    assert description_for("noise_fidelity", 4) == "unacceptable for diagnostic interpretation"
    assert description_for("small_structures", 1) == "excellent visualization"
    assert description_for("lesion_conspicuity", ABSENT) == "not applicable, no lesion present"


@pytest.mark.parametrize("metric,score", [("noise_fidelity", 0), ("noise_fidelity", 5),
                                          ("small_structures", ABSENT), ("nope", 1)])
def test_description_errors(metric, score):
    with pytest.raises(ValueError):
        description_for(metric, score)


def test_lexicon_has_17_entries():
    assert sum(len(t) for t in DESCRIPTIONS.values()) == 17
    table = lexicon_table()
    json.dumps(table)
    assert table["descriptions"]["lesion_conspicuity"]["absent"] == "not applicable, no lesion present"


def test_encode_worked_example():
    assert encode_scores(ScoreVector(4, 4, 2, 4)) == SAMPLE_CAPTION


def test_encode_absent_lesion():
    text = encode_scores(ScoreVector(1, 1, ABSENT, 1))
    assert "Subjective visual lesion conspicuity: not applicable, no lesion present" in text


def test_exhaustive_round_trip():
    vectors = all_score_vectors()
    assert len(vectors) == 320 == len(set(vectors))
    for s in vectors:
        text = encode_scores(s)
        assert strict_decode(text) == s
        assert strict_decode(text + "\n") == s
        assert text.count("; ") == 3
        positions = [text.index(h + ": ") for h in HEADERS]
        assert positions == sorted(positions)
        sv, dist = fuzzy_decode(text)
        assert sv == s and dist == [0, 0, 0, 0]


def test_score_vector_validation():
    with pytest.raises(ValueError):
        ScoreVector(1, ABSENT, 1, 1)
    with pytest.raises(ValueError):
        ScoreVector(1, 2, 3, 5)
    assert ScoreVector.from_list([2, 3, None, 1]).as_list() == [2, 3, None, 1]


class TestStrictDecode:
    def test_misspelled_header(self):
        bad = SAMPLE_CAPTION.replace("Image noise", "Imgae noise")
        with pytest.raises(MalformedCaption) as err:
            strict_decode(bad)
        assert err.value.segment == 0

    def test_swapped_descriptions(self):
        bad = encode_scores(ScoreVector(2, 3, 1, 2)).replace(
            "sub-optimal visibility", "average, acceptable for diagnostic interpretation")
        with pytest.raises(MalformedCaption) as err:
            strict_decode(bad)
        assert err.value.segment == 1

    def test_each_metric_accepts_only_its_own_strings(self):
        for i, name in enumerate(METRICS):
            for other in METRICS:
                if other == name:
                    continue
                for desc in DESCRIPTIONS[other].values():
                    if desc in DESCRIPTIONS[name].values():
                        continue
                    parts = encode_scores(ScoreVector(1, 1, 1, 1)).split("; ")
                    parts[i] = f"{HEADERS[i]}: {desc}"
                    with pytest.raises(MalformedCaption):
                        strict_decode("; ".join(parts))

    @pytest.mark.parametrize("text", ["", "nonsense", SAMPLE_CAPTION + "; extra", SAMPLE_CAPTION + " ",
                                      SAMPLE_CAPTION.lower()])
    def test_rejects_non_canonical(self, text):
        with pytest.raises(MalformedCaption):
            strict_decode(text)


class TestFuzzyDecode:
    def test_single_typo(self):
        text = SAMPLE_CAPTION.replace("poor confidence", "poor confidense")
        sv, dist = fuzzy_decode(text)
        assert sv == ScoreVector(4, 4, 2, 4)
        assert dist == [0, 0, 0, 1]

    def test_case_insensitive_headers(self):
        sv, _ = fuzzy_decode(SAMPLE_CAPTION.upper())
        assert sv == ScoreVector(4, 4, 2, 4)

    def test_within_metric_entries_are_far_apart(self):
        # a single edit can never move a body closer to another entry of the same metric
        for table in DESCRIPTIONS.values():
            for a, b in itertools.combinations(table.values(), 2):
                assert Levenshtein.distance(a, b) > 2

    def test_unparseable(self):
        with pytest.raises(Unparseable):
            fuzzy_decode("Image noise and structural fidelity: average")
        with pytest.raises(Unparseable):
            fuzzy_decode("completely unrelated text with no structure")

    def test_far_body_rejected(self):
        text = SAMPLE_CAPTION.replace("poor confidence", "xqzv wkjh mmmm")
        with pytest.raises(Unparseable) as err:
            fuzzy_decode(text)
        assert err.value.distances[3] is not None
