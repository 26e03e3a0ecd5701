"""Caption evaluation: BLEU-1, METEOR-lite, ROUGE-L, CIDEr, aspect capture, n-gram diversity.

Every metric works on pre-tokenised sequences with one reference per
candidate.  METEOR-lite uses exact matches only (no stemming or synonyms).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

Tokens = Sequence[str]


@dataclass
class CorpusPair:
    candidate: list[str]
    reference: list[str]
    aspects: list[str]


@dataclass
class EvalReport:
    bleu1: float
    meteor_lite: float
    rouge_l: float
    cider: float
    aspect_capture: float
    unique_4grams: int
    unique_5grams: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self) -> str:
        rows = [(k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in self.to_dict().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _check(corpus) -> None:
    if not corpus:
        raise ValueError("empty corpus")


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)]


# ---------------------------------------------------------------- BLEU-1


def bleu1(corpus: Sequence[CorpusPair]) -> float:
    """Corpus-level clipped unigram precision times the brevity penalty."""
    _check(corpus)
    matched = total = ref_len = 0
    for pair in corpus:
        ref_counts = Counter(pair.reference)
        for tok, c in Counter(pair.candidate).items():
            matched += min(c, ref_counts[tok])
        total += len(pair.candidate)
        ref_len += len(pair.reference)
    if total == 0 or matched == 0:
        return 0.0
    bp = 1.0 if total > ref_len else math.exp(1.0 - ref_len / total)
    return bp * matched / total


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Tokens, reference: Tokens, beta: float = 1.2) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(corpus: Sequence[CorpusPair]) -> float:
    _check(corpus)
    return math.fsum(rouge_l_pair(p.candidate, p.reference) for p in corpus) / len(corpus)


# ---------------------------------------------------------------- CIDEr


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict:
    return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(math.fsum(x * x for x in u.values()))
    nv = math.sqrt(math.fsum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return math.fsum(w * v[g] for g, w in u.items() if g in v) / (nu * nv)


def cider_scores(corpus: Sequence[CorpusPair], max_n: int = 4) -> list[float]:
    """Per-pair CIDEr: mean TF-IDF cosine over n = 1..max_n, times 10.

    Document frequencies come from the reference side of the corpus.
    """
    _check(corpus)
    log_n = math.log(len(corpus))
    dfs = [Counter() for _ in range(max_n)]
    for pair in corpus:
        for n in range(1, max_n + 1):
            dfs[n - 1].update(set(ngrams(pair.reference, n)))
    out = []
    for pair in corpus:
        sims = []
        for n in range(1, max_n + 1):
            df = dfs[n - 1]
            vc = _tfidf(Counter(ngrams(pair.candidate, n)), df, log_n)
            vr = _tfidf(Counter(ngrams(pair.reference, n)), df, log_n)
            sims.append(_cosine(vc, vr))
        out.append(10.0 * math.fsum(sims) / max_n)
    return out


def cider(corpus: Sequence[CorpusPair]) -> float:
    scores = cider_scores(corpus)
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------- METEOR-lite


def _align(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """Greedy left-to-right exact alignment: each candidate token takes the
    earliest unused reference position holding the same token."""
    used = [False] * len(reference)
    pairs = []
    for i, tok in enumerate(candidate):
        for j, ref_tok in enumerate(reference):
            if not used[j] and ref_tok == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_lite_pair(candidate: Tokens, reference: Tokens) -> float:
    pairs = _align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, r = m / len(candidate), m / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1 - penalty)


def meteor_lite(corpus: Sequence[CorpusPair]) -> float:
    _check(corpus)
    return math.fsum(meteor_lite_pair(p.candidate, p.reference) for p in corpus) / len(corpus)


# ---------------------------------------------------------------- aspects and diversity


def aspect_capture(corpus: Sequence[CorpusPair]) -> float:
    """Mean fraction of each video's aspect tokens that appear in its candidate.

    Pairs without aspects are skipped; returns 0.0 if every pair is skipped.
    """
    ratios = []
    for pair in corpus:
        wanted = set(pair.aspects)
        if not wanted:
            continue
        ratios.append(len(wanted & set(pair.candidate)) / len(wanted))
    return math.fsum(ratios) / len(ratios) if ratios else 0.0


def unique_ngrams(candidates: Sequence[Tokens], n: int) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    seen = set()
    for sent in candidates:
        seen.update(ngrams(list(sent), n))
    return len(seen)


def evaluate_corpus(corpus: Sequence[CorpusPair]) -> EvalReport:
    _check(corpus)
    cands = [p.candidate for p in corpus]
    return EvalReport(
        bleu1=bleu1(corpus),
        meteor_lite=meteor_lite(corpus),
        rouge_l=rouge_l(corpus),
        cider=cider(corpus),
        aspect_capture=aspect_capture(corpus),
        unique_4grams=unique_ngrams(cands, 4),
        unique_5grams=unique_ngrams(cands, 5),
    )


# ---------------------------------------------------------------- corpus files


def read_corpus(path: str | Path) -> list[CorpusPair]:
    """JSON Lines with ``candidate``, ``reference`` and optional ``aspects`` token arrays."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(CorpusPair(list(obj["candidate"]), list(obj["reference"]),
                                      list(obj.get("aspects", []))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from None
    return out


def write_corpus(path: str | Path, corpus: Sequence[CorpusPair], video_ids: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, p in enumerate(corpus):
            rec = {"candidate": p.candidate, "reference": p.reference, "aspects": p.aspects}
            if video_ids is not None:
                rec["video_id"] = video_ids[k]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
