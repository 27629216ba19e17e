"""Composite answer-quality metrics: exact accuracy, coordinate Match,
per-order BLEU, ROUGE-L, CIDEr, a pluggable 0-100 judge, and their weighted
final score.

Tokenization for the text metrics lowercases, protects coordinate-pair
spans like "[1.,2.]" or "<20.0,40.0>" as single tokens, strips the remaining
punctuation, and splits on whitespace.

Every metric here is a pure function of its inputs; only the remote judge
client performs I/O (sequentially, with bounded retries).
"""

from __future__ import annotations

import math
import os
import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

from .errors import (
    EvaluationError,
    JudgeError,
    JudgeParseError,
    ScoreRangeError,
)

MATCH_L1_THRESHOLD = 16.0
ROUGE_BETA = 1.2
BLEU_EPS = 1e-9

_NUMBER = r"[+-]?(?:\d+\.?\d*|\.\d+)"
_POINT_RE = re.compile(rf"[\[(<]\s*({_NUMBER})\s*,\s*({_NUMBER})\s*[\])>]")

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


@dataclass(frozen=True)
class PredictionPair:
    """One scored record: model output vs ground truth, plus the question tag."""

    output: str
    ground_truth: str
    tag: int = 0


def extract_points(text: str) -> list[tuple[float, float]]:
    """Coordinate pairs like "[1.,2.]", "<20.0,40.0>", "(3,4)", in order."""
    return [(float(m.group(1)), float(m.group(2))) for m in _POINT_RE.finditer(text)]


def tokenize(text: str) -> list[str]:
    """Lowercase tokens with punctuation stripped except inside point spans."""
    text = text.lower()
    protected: list[str] = []

    def stash(m: re.Match) -> str:
        protected.append(re.sub(r"\s+", "", m.group(0)))
        return f" \x00{len(protected) - 1}\x00 "

    masked = _POINT_RE.sub(stash, text)
    masked = masked.translate(_PUNCT_TABLE)
    tokens = []
    for tok in masked.split():
        m = re.fullmatch(r"\x00(\d+)\x00", tok)
        tokens.append(protected[int(m.group(1))] if m else tok)
    return tokens


def accuracy(pairs: Sequence[PredictionPair]) -> float:
    """Mean exact-string-equality indicator."""
    if not pairs:
        raise EvaluationError("accuracy needs at least one pair")
    return sum(1.0 for p in pairs if p.output == p.ground_truth) / len(pairs)


def match_score(
    pairs: Sequence[PredictionPair],
    threshold: float = MATCH_L1_THRESHOLD,
    skip_pointless_mismatch: bool = True,
) -> float:
    """Recall (0-100) of ground-truth points against predicted points.

    A ground-truth point counts as matched when some predicted point lies
    within the L1 threshold. Pairs whose ground truth has no points score 100
    when the output has none either; when the output does have points those
    pairs are skipped by default (set `skip_pointless_mismatch=False` to
    score them 0 instead). Returns the mean over contributing pairs, or 0.0
    when no pair contributes.
    """
    scores = []
    for pair in pairs:
        gt_points = extract_points(pair.ground_truth)
        out_points = extract_points(pair.output)
        if not gt_points:
            if not out_points:
                scores.append(100.0)
            elif not skip_pointless_mismatch:
                scores.append(0.0)
            continue
        matched = sum(
            1
            for gx, gy in gt_points
            if any(abs(gx - ox) + abs(gy - oy) < threshold for ox, oy in out_points)
        )
        scores.append(100.0 * matched / len(gt_points))
    return sum(scores) / len(scores) if scores else 0.0


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(cand_len: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _bleu_from_counts(clipped: int, total: int, cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    precision = clipped / total if total > 0 else BLEU_EPS
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * precision


def bleu_n(candidate: str, references: "str | Sequence[str]", n: int) -> float:
    """Order-n modified (clipped) precision with brevity penalty for one pair.

    When the candidate has no n-grams of order n the precision falls back to
    the epsilon floor; an empty candidate scores 0 through the brevity term.
    """
    if n not in (1, 2, 3, 4):
        raise EvaluationError(f"bleu order must be in 1..4, got {n}")
    if isinstance(references, str):
        references = [references]
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    cand_counts = _ngram_counts(cand, n)
    max_ref = Counter()
    for ref in refs:
        for gram, count in _ngram_counts(ref, n).items():
            max_ref[gram] = max(max_ref[gram], count)
    clipped = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
    total = sum(cand_counts.values())
    ref_len = _closest_ref_len(len(cand), [len(r) for r in refs]) if refs else 0
    return _bleu_from_counts(clipped, total, len(cand), ref_len)


def corpus_bleu_n(
    candidates: Sequence[str], references: Sequence["str | Sequence[str]"], n: int
) -> float:
    """Corpus BLEU_n: clipped counts are pooled over all pairs before dividing."""
    if n not in (1, 2, 3, 4):
        raise EvaluationError(f"bleu order must be in 1..4, got {n}")
    if not candidates or len(candidates) != len(references):
        raise EvaluationError("corpus_bleu_n needs equal, non-empty candidate/reference lists")
    clipped = total = cand_len = ref_len = 0
    for candidate, refs in zip(candidates, references):
        if isinstance(refs, str):
            refs = [refs]
        cand = tokenize(candidate)
        ref_tokens = [tokenize(r) for r in refs]
        cand_counts = _ngram_counts(cand, n)
        max_ref = Counter()
        for ref in ref_tokens:
            for gram, count in _ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], count)
        clipped += sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        total += sum(cand_counts.values())
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), [len(r) for r in ref_tokens])
    return _bleu_from_counts(clipped, total, cand_len, ref_len)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    """Token-level longest-common-subsequence F-measure."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return ((1 + beta**2) * precision * recall) / (recall + beta**2 * precision)


def corpus_rouge_l(pairs: Sequence[PredictionPair]) -> float:
    if not pairs:
        raise EvaluationError("rouge_l needs at least one pair")
    return sum(rouge_l(p.output, p.ground_truth) for p in pairs) / len(pairs)


def _tfidf_vector(tokens: Sequence[str], n: int, doc_freq: dict, corpus_size: int) -> dict:
    counts = _ngram_counts(tokens, n)
    # unseen n-grams keep document frequency 1 so the weight stays finite
    return {
        gram: count * math.log(corpus_size / doc_freq.get(gram, 1.0))
        for gram, count in counts.items()
    }


def _cosine(a: dict, b: dict) -> float:
    dot = sum(weight * b.get(gram, 0.0) for gram, weight in a.items())
    norm_a = math.sqrt(sum(w * w for w in a.values()))
    norm_b = math.sqrt(sum(w * w for w in b.values()))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return dot / (norm_a * norm_b)


def cider(
    candidates: Sequence[str],
    references: Sequence[str],
    corpus: Sequence[str],
    max_n: int = 4,
) -> float:
    """TF-IDF n-gram cosine similarity averaged over n=1..4, scaled to [0,10].

    Inverse document frequencies come from the separate `corpus` (usually the
    ground-truth set). Zero vectors contribute cosine 0.
    """
    if not corpus:
        raise EvaluationError("cider needs a non-empty IDF corpus")
    if not candidates or len(candidates) != len(references):
        raise EvaluationError("cider needs equal, non-empty candidate/reference lists")
    doc_tokens = [tokenize(doc) for doc in corpus]
    doc_freq: list[dict] = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for tokens in doc_tokens:
            for gram in set(_ngram_counts(tokens, n)):
                df[gram] += 1
        doc_freq.append({gram: float(max(count, 1)) for gram, count in df.items()})
    corpus_size = len(corpus)
    per_n = []
    for n in range(1, max_n + 1):
        sims = []
        for candidate, reference in zip(candidates, references):
            vec_c = _tfidf_vector(tokenize(candidate), n, doc_freq[n - 1], corpus_size)
            vec_r = _tfidf_vector(tokenize(reference), n, doc_freq[n - 1], corpus_size)
            sims.append(_cosine(vec_c, vec_r))
        per_n.append(sum(sims) / len(sims))
    return 10.0 * sum(per_n) / len(per_n)


def token_f1(a: str, b: str) -> float:
    """Multiset token F1 between two texts (1.0 when both are empty)."""
    ta, tb = tokenize(a), tokenize(b)
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    overlap = sum((Counter(ta) & Counter(tb)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(ta)
    recall = overlap / len(tb)
    return 2 * precision * recall / (precision + recall)


class Judge(Protocol):
    """Rates one answer against its ground truth on a 0-100 scale."""

    def rate(self, output: str, ground_truth: str) -> float: ...


class StubJudge:
    """Deterministic judge: rounded 100 x token F1. Used by every test."""

    def rate(self, output: str, ground_truth: str) -> float:
        return float(round(100.0 * token_f1(output, ground_truth)))


JUDGE_PROMPT = "rate the following answer based on the correct answer"

_RATING_RE = re.compile(r"\b(\d{1,3})\b")


class RemoteJudge:
    """HTTP judge client configured entirely from environment variables.

    ADAPTERFUSE_JUDGE_ENDPOINT: chat-completions style URL to POST to.
    ADAPTERFUSE_JUDGE_KEY:      bearer token.
    ADAPTERFUSE_JUDGE_MODEL:    model name to request.

    Request body: {"model": ..., "messages": [{"role": "user", "content":
    "<prompt>\\ncorrect answer: <gt>\\nanswer: <output>\\nreply with an
    integer 0-100"}]}. The first integer in choices[0].message.content is the
    rating. Retries up to `retries` times; the test suite never calls this.
    """

    def __init__(self, retries: int = 3, timeout: float = 30.0):
        self.endpoint = os.environ.get("ADAPTERFUSE_JUDGE_ENDPOINT", "")
        self.key = os.environ.get("ADAPTERFUSE_JUDGE_KEY", "")
        self.model = os.environ.get("ADAPTERFUSE_JUDGE_MODEL", "")
        self.retries = retries
        self.timeout = timeout
        if not self.endpoint or not self.model:
            raise JudgeError(
                "remote judge needs ADAPTERFUSE_JUDGE_ENDPOINT and "
                "ADAPTERFUSE_JUDGE_MODEL set"
            )

    def rate(self, output: str, ground_truth: str) -> float:
        import requests

        prompt = (
            f"{JUDGE_PROMPT}\ncorrect answer: {ground_truth}\nanswer: {output}\n"
            "reply with an integer 0-100"
        )
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        headers = {"Authorization": f"Bearer {self.key}"} if self.key else {}
        last_error: Exception | None = None
        for _ in range(self.retries):
            try:
                response = requests.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
                response.raise_for_status()
                content = response.json()["choices"][0]["message"]["content"]
                return self._parse_rating(str(content))
            except JudgeParseError:
                raise
            except Exception as exc:  # network / schema errors are retried
                last_error = exc
        raise JudgeError(f"remote judge failed after {self.retries} attempts: {last_error}")

    @staticmethod
    def _parse_rating(content: str) -> float:
        m = _RATING_RE.search(content)
        if m is None:
            raise JudgeParseError(f"no 0-100 rating in judge reply: {content!r}")
        rating = int(m.group(1))
        if not 0 <= rating <= 100:
            raise JudgeParseError(f"judge rating {rating} outside 0..100")
        return float(rating)


def judge_score(pairs: Sequence[PredictionPair], judge: Judge) -> float:
    """Mean judge rating over pairs; failures carry the pair index."""
    if not pairs:
        raise EvaluationError("judge_score needs at least one pair")
    ratings = []
    for index, pair in enumerate(pairs):
        try:
            ratings.append(float(judge.rate(pair.output, pair.ground_truth)))
        except JudgeError as exc:
            raise JudgeError(f"pair {index}: {exc}") from exc
    return sum(ratings) / len(ratings)


def _require_range(name: str, value: float, low: float, high: float) -> float:
    if not low <= value <= high:
        raise ScoreRangeError(f"{name}={value} outside [{low}, {high}]")
    return value


def final_score(
    accuracy_value: float,
    chatgpt: float,
    match: float,
    bleu: Sequence[float],
    rouge: float,
    cider_value: float,
) -> float:
    """Weighted combination of all components:

    0.4*(ChatGPT/100) + 0.2*(match/100) + 0.2*accuracy
    + 0.2*((sum(BLEU_i)/4 + ROUGE_L + CIDEr/10) / 3)
    """
    if len(bleu) != 4:
        raise ScoreRangeError(f"expected 4 BLEU components, got {len(bleu)}")
    _require_range("accuracy", accuracy_value, 0.0, 1.0)
    _require_range("chatgpt", chatgpt, 0.0, 100.0)
    _require_range("match", match, 0.0, 100.0)
    for i, b in enumerate(bleu, start=1):
        _require_range(f"bleu_{i}", b, 0.0, 1.0)
    _require_range("rouge_l", rouge, 0.0, 1.0)
    _require_range("cider", cider_value, 0.0, 10.0)
    text_bundle = (sum(bleu) / 4.0 + rouge + cider_value / 10.0) / 3.0
    return (
        0.4 * (chatgpt / 100.0)
        + 0.2 * (match / 100.0)
        + 0.2 * accuracy_value
        + 0.2 * text_bundle
    )


@dataclass(frozen=True)
class MetricReport:
    """The nine component scores plus their weighted final score."""

    accuracy: float
    chatgpt: float
    match: float
    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider: float
    final_score: float

    def __post_init__(self):
        recomputed = final_score(
            self.accuracy, self.chatgpt, self.match, self.bleu, self.rouge_l, self.cider
        )
        if abs(recomputed - self.final_score) > 1e-9:
            raise ScoreRangeError(
                f"final_score {self.final_score} does not recompute from components "
                f"({recomputed})"
            )

    @classmethod
    def from_components(
        cls,
        accuracy_value: float,
        chatgpt: float,
        match: float,
        bleu: Sequence[float],
        rouge: float,
        cider_value: float,
    ) -> "MetricReport":
        return cls(
            accuracy=accuracy_value,
            chatgpt=chatgpt,
            match=match,
            bleu=tuple(bleu),
            rouge_l=rouge,
            cider=cider_value,
            final_score=final_score(accuracy_value, chatgpt, match, bleu, rouge, cider_value),
        )


def compute_report(pairs: Sequence[PredictionPair], judge: Judge | None = None) -> MetricReport:
    """Score a prediction set with every metric (stub judge by default)."""
    if not pairs:
        raise EvaluationError("compute_report needs at least one pair")
    judge = judge if judge is not None else StubJudge()
    outputs = [p.output for p in pairs]
    truths = [p.ground_truth for p in pairs]
    return MetricReport.from_components(
        accuracy_value=accuracy(pairs),
        chatgpt=judge_score(pairs, judge),
        match=match_score(pairs),
        bleu=tuple(corpus_bleu_n(outputs, truths, n) for n in (1, 2, 3, 4)),
        rouge=corpus_rouge_l(pairs),
        cider_value=cider(outputs, truths, truths),
    )
