"""Caption metrics (BLEU, ROUGE-L, METEOR, CIDEr) and score metrics (accuracy, PLCC, SROCC)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .captioner import split_words
from .template import METRICS, ScoreVector

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9  # F = PR / (alpha P + (1 - alpha) R) = 10PR / (R + 9P)
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
CIDER_SCALE = 10.0
CORRELATED_METRICS = ("noise_fidelity", "small_structures", "diagnostic_confidence")


def eval_tokens(text: str) -> list[str]:
    """Lower-cased, punctuation-split tokens shared by all caption metrics."""
    return [w.lower() for w in split_words(text)]


@dataclass
class EvalPair:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError("an evaluation pair needs at least one reference")

    @classmethod
    def from_text(cls, candidate: str, references: list[str] | str) -> EvalPair:
        if isinstance(references, str):
            references = [references]
        return cls(eval_tokens(candidate), [eval_tokens(r) for r in references])


def _check(pairs):
    if not pairs:
        raise ValueError("empty corpus")


def ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# BLEU ------------------------------------------------------------------------------

def _closest_ref_len(cand_len: int, refs: list[list[str]]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def _clipped(cand: list[str], refs: list[list[str]], k: int) -> tuple[int, int]:
    counts = ngrams(cand, k)
    best = Counter()
    for r in refs:
        best |= ngrams(r, k)
    return sum(min(c, best[g]) for g, c in counts.items()), sum(counts.values())


def bleu_n(pairs: list[EvalPair], n: int) -> float:
    """Corpus BLEU-n (uniform weights, unsmoothed)."""
    _check(pairs)
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    log_p = 0.0
    for k in range(1, n + 1):
        hit = total = 0
        for p in pairs:
            h, t = _clipped(p.candidate, p.references, k)
            hit += h
            total += t
        if hit == 0:
            return 0.0
        log_p += math.log(hit / total) / n
    c = sum(len(p.candidate) for p in pairs)
    r = sum(_closest_ref_len(len(p.candidate), p.references) for p in pairs)
    return math.exp(min(0.0, 1.0 - r / c) + log_p)


def sentence_bleu(candidate: list[str], references: list[list[str]], n: int = 4) -> float:
    """Add-one smoothed sentence BLEU, for per-sample diagnostics only."""
    if not candidate:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        hit, total = _clipped(candidate, references, k)
        log_p += math.log((hit + 1) / (total + 1)) / n
    r = _closest_ref_len(len(candidate), references)
    return math.exp(min(0.0, 1.0 - r / len(candidate)) + log_p)


# ROUGE-L -------------------------------------------------------------------------

def lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand: list[str], ref: list[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(pairs: list[EvalPair]) -> float:
    _check(pairs)
    return float(np.mean([max(rouge_l_pair(p.candidate, r) for r in p.references) for p in pairs]))


# METEOR --------------------------------------------------------------------------

def meteor_alignment(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact-match unigram alignment with the most matches and, among those, the fewest chunks.

    Solved exactly by memoized search over (candidate position, previous
    reference position, used reference set). Pathologically repetitive
    inputs that exceed ``_METEOR_STATE_BUDGET`` fall back to the greedy
    longest-run alignment.
    """
    greedy = _greedy_alignment(cand, ref)
    # each continuation consumes a shared bigram, which bounds chunks from below
    shared = sum((ngrams(cand, 2) & ngrams(ref, 2)).values())
    if count_chunks(greedy) <= max(1, len(greedy) - shared) or not greedy:
        return greedy
    try:
        return _exact_alignment(cand, ref)
    except _BudgetExceeded:
        return greedy


_METEOR_STATE_BUDGET = 50_000


class _BudgetExceeded(Exception):
    pass


def _exact_alignment(cand, ref):
    positions: dict[str, list[int]] = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)
    ccount = Counter(cand)
    type_mask = {w: sum(1 << j for j in js) for w, js in positions.items()}
    # candidate tokens of type w that may stay unmatched in a maximum alignment
    surplus = {w: max(0, c - len(positions.get(w, []))) for w, c in ccount.items()}
    seen_before = []
    running = Counter()
    for w in cand:
        seen_before.append(running[w])
        running[w] += 1
    memo: dict = {}
    neg = -(10 ** 9)

    def best(i, prev, used):
        # max continuations obtainable from candidate position i onward
        if i == len(cand):
            return 0, None
        key = (i, prev, used)
        hit = memo.get(key)
        if hit is not None:
            return hit
        if len(memo) > _METEOR_STATE_BUDGET:
            raise _BudgetExceeded
        w = cand[i]
        result = (neg, None)
        matched = (used & type_mask.get(w, 0)).bit_count()
        if seen_before[i] - matched < surplus[w]:
            sub, _ = best(i + 1, -1, used)
            result = (sub, -1)
        for j in positions.get(w, []):
            if used >> j & 1:
                continue
            sub, _ = best(i + 1, j, used | (1 << j))
            gain = sub + (1 if prev >= 0 and j == prev + 1 else 0)
            if sub > neg and gain > result[0]:
                result = (gain, j)
        memo[key] = result
        return result

    out = []
    prev, used = -1, 0
    for i in range(len(cand)):
        _, j = best(i, prev, used)
        if j is not None and j >= 0:
            out.append((i, j))
            used |= 1 << j
        prev = j if j is not None else -1
    return out


def _greedy_alignment(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Repeatedly align the longest common run of unaligned tokens (leftmost first)."""
    free_c = [True] * len(cand)
    free_r = [True] * len(ref)
    pairs = []
    while True:
        best = (0, 0, 0)  # length, cand start, ref start
        for i in range(len(cand)):
            if not free_c[i]:
                continue
            for j in range(len(ref)):
                if not free_r[j] or cand[i] != ref[j]:
                    continue
                k = 1
                while (i + k < len(cand) and j + k < len(ref) and free_c[i + k] and free_r[j + k]
                       and cand[i + k] == ref[j + k]):
                    k += 1
                if k > best[0]:
                    best = (k, i, j)
        k, i, j = best
        if k == 0:
            break
        for d in range(k):
            free_c[i + d] = free_r[j + d] = False
            pairs.append((i + d, j + d))
    return sorted(pairs)


def count_chunks(alignment: list[tuple[int, int]]) -> int:
    """Runs of candidate-adjacent matches that are also reference-adjacent."""
    if not alignment:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_from_counts(matches: int, chunks: int, cand_len: int, ref_len: int) -> float:
    if matches == 0:
        return 0.0
    p, r = matches / cand_len, matches / ref_len
    f = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / matches) ** METEOR_BETA
    return f * (1.0 - penalty)


def meteor_pair(cand: list[str], ref: list[str]) -> float:
    al = meteor_alignment(cand, ref)
    return meteor_from_counts(len(al), count_chunks(al), len(cand), len(ref))


def meteor(pairs: list[EvalPair]) -> float:
    _check(pairs)
    return float(np.mean([max(meteor_pair(p.candidate, r) for r in p.references) for p in pairs]))


# CIDEr ---------------------------------------------------------------------------

def _tfidf(tokens: list[str], n: int, df: Counter, n_docs: int) -> dict:
    counts = ngrams(tokens, n)
    total = sum(counts.values())
    # unseen n-grams get df = 1, as in the reference implementation
    return {g: (c / total) * math.log(n_docs / max(1, df[g])) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(pairs: list[EvalPair], max_n: int = 4) -> float:
    """CIDEr (no length penalty): mean over n of 10 x mean reference cosine of tf-idf vectors."""
    _check(pairs)
    if len({tuple(tuple(r) for r in p.references) for p in pairs}) < 2:
        raise ValueError("CIDEr needs at least two distinct reference documents")
    n_docs = len(pairs)
    per_n = []
    for n in range(1, max_n + 1):
        df = Counter()
        for p in pairs:
            df.update(set().union(*(ngrams(r, n).keys() for r in p.references)))
        scores = []
        for p in pairs:
            c = _tfidf(p.candidate, n, df, n_docs)
            scores.append(np.mean([_cosine(c, _tfidf(r, n, df, n_docs)) for r in p.references]))
        per_n.append(CIDER_SCALE * float(np.mean(scores)))
    return float(np.mean(per_n))


def caption_metrics(pairs: list[EvalPair]) -> dict[str, float]:
    out = {f"bleu_{n}": bleu_n(pairs, n) for n in range(1, 5)}
    out["rouge_l"] = rouge_l(pairs)
    out["meteor"] = meteor(pairs)
    out["cider"] = cider(pairs)
    return out


# score metrics --------------------------------------------------------------------

def score_accuracy(pred: list[ScoreVector | None], truth: list[ScoreVector],
                   levels: list[str] | None = None):
    """Exact-match rate per metric; ``None`` predictions (undecodable) count as wrong.

    With ``levels`` also returns a {level: {metric: accuracy}} grid.
    """
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(truth)} references")
    if not truth:
        raise ValueError("empty evaluation set")
    hits = np.array([[p is not None and getattr(p, m) == getattr(t, m) for m in METRICS]
                     for p, t in zip(pred, truth)], dtype=float)
    overall = dict(zip(METRICS, hits.mean(axis=0).tolist()))
    if levels is None:
        return overall
    if len(levels) != len(truth):
        raise ValueError("levels must align with predictions")
    grid = {}
    for name in dict.fromkeys(levels):
        rows = [i for i, lv in enumerate(levels) if lv == name]
        grid[name] = dict(zip(METRICS, hits[rows].mean(axis=0).tolist()))
    return overall, grid


def plcc(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("plcc needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise ValueError("plcc needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0 or sy == 0:
        raise ValueError("plcc is undefined for a zero-variance input")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def srocc(x, y) -> float:
    """Pearson correlation of fractional (tie-averaged) ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("srocc needs two 1-D sequences of equal length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("srocc is undefined when every value is tied")
    return plcc(rankdata(x), rankdata(y))


def correlation_grid(pred: np.ndarray, truth: list[ScoreVector]) -> dict[str, dict[str, float | None]]:
    """PLCC/SROCC per non-lesion metric; ``pred`` is (N, 4) continuous predictions.

    Rows whose prediction is NaN (undecodable) are dropped; a degenerate
    metric yields ``None`` rather than an exception.
    """
    pred = np.asarray(pred, dtype=np.float64)
    out = {"plcc": {}, "srocc": {}}
    for m in CORRELATED_METRICS:
        k = METRICS.index(m)
        y = np.array([getattr(t, m) for t in truth], dtype=np.float64)
        x = pred[:, k]
        keep = ~np.isnan(x)
        for name, fn in (("plcc", plcc), ("srocc", srocc)):
            try:
                out[name][m] = fn(x[keep], y[keep])
            except ValueError:
                out[name][m] = None
    return out


@dataclass
class MetricReport:
    bleu: list[float] = field(default_factory=list)
    rouge_l: float | None = None
    meteor: float | None = None
    cider: float | None = None
    accuracy: dict[str, float] = field(default_factory=dict)
    plcc: dict[str, float | None] = field(default_factory=dict)
    srocc: dict[str, float | None] = field(default_factory=dict)
    by_level: dict[str, dict[str, float]] = field(default_factory=dict)
    decode_rate: float | None = None
    n: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


def scores_as_array(scores: list[ScoreVector | None]) -> np.ndarray:
    """(N, 4) float array; ABSENT and undecodable entries become NaN."""
    rows = []
    for s in scores:
        if s is None:
            rows.append([np.nan] * 4)
        else:
            rows.append([np.nan if v is None else float(v) for v in s.as_list()])
    return np.array(rows, dtype=np.float64).reshape(len(rows), 4)
