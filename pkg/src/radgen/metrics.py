"""Caption metrics: corpus BLEU, ROUGE-L, and CIDEr-D.

Implemented from scratch following the published definitions used by the
Microsoft COCO evaluation server:

* BLEU (Papineni et al., 2002): corpus-level clipped modified n-gram
  precision, geometric mean with uniform weights, multiplicative brevity
  penalty. No smoothing; a zero precision zeroes every affected order.
* ROUGE-L (Lin, 2004): mean per-sentence LCS F-measure with beta = 1.2.
* CIDEr-D (Vedantam et al., 2015): tf-idf n-gram cosine for n = 1..4 with
  count clipping, gaussian length penalty (sigma = 6), scaled by 10.

Candidates and references are tokenized with the same rules as vocabulary
construction so that training and evaluation agree.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from typing import Sequence

from .errors import EmptyCorpusError, ShapeError
from .vocab import tokenize

Sentence = str | Sequence[str]


def _tokens(sentence: Sentence) -> list[str]:
    if isinstance(sentence, str):
        return tokenize(sentence)
    return list(sentence)


def _ref_lists(references: Sequence) -> list[list[list[str]]]:
    """Normalize references to one list of tokenized variants per sample.

    Each entry is either a single reference string or a list of reference
    variants (strings or pre-tokenized lists). A bare token list is treated
    as a list of single-word variants, so pass pre-tokenized single
    references wrapped in a list.
    """
    out = []
    for ref in references:
        if isinstance(ref, str):
            out.append([_tokens(ref)])
        else:
            out.append([_tokens(v) if isinstance(v, str) else list(v) for v in ref])
    return out


def _check_corpora(candidates: Sequence, references: Sequence) -> None:
    if len(candidates) == 0 or len(references) == 0:
        raise EmptyCorpusError("metric needs at least one candidate/reference pair")
    if len(candidates) != len(references):
        raise ShapeError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sentence], references: Sequence, max_n: int = 4) -> list[float]:
    """Corpus-level BLEU-1..max_n.

    Returns a list of length ``max_n`` where entry ``k-1`` is BLEU-k (uniform
    weights 1/k over orders 1..k).
    """
    _check_corpora(candidates, references)
    cands = [_tokens(c) for c in candidates]
    refs = _ref_lists(references)

    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    eff_ref_len = 0
    for cand, ref_group in zip(cands, refs):
        cand_len += len(cand)
        # closest reference length; ties break to the shorter reference
        eff_ref_len += min(
            (abs(len(r) - len(cand)), len(r)) for r in ref_group
        )[1]
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand, n)
            if not cand_counts:
                continue
            max_ref = Counter()
            for r in ref_group:
                for gram, cnt in _ngrams(r, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            matched[n - 1] += sum(
                min(cnt, max_ref[gram]) for gram, cnt in cand_counts.items()
            )
            total[n - 1] += sum(cand_counts.values())

    if cand_len > eff_ref_len or cand_len == 0:
        bp = 1.0 if cand_len > 0 else 0.0
    else:
        bp = math.exp(1.0 - eff_ref_len / cand_len)

    precisions = [
        matched[n] / total[n] if total[n] > 0 else 0.0 for n in range(max_n)
    ]
    scores = []
    for k in range(1, max_n + 1):
        if any(precisions[n] == 0.0 for n in range(k)):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(precisions[n]) for n in range(k)) / k
        scores.append(bp * math.exp(log_mean))
    return scores


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidates: Sequence[Sentence], references: Sequence, beta: float = 1.2) -> float:
    """Mean per-sentence ROUGE-L F-measure (max over reference variants)."""
    _check_corpora(candidates, references)
    cands = [_tokens(c) for c in candidates]
    refs = _ref_lists(references)

    scores = []
    for cand, ref_group in zip(cands, refs):
        prec, rec = [], []
        for ref in ref_group:
            lcs = _lcs_length(cand, ref)
            prec.append(lcs / len(cand) if cand else 0.0)
            rec.append(lcs / len(ref) if ref else 0.0)
        p, r = max(prec), max(rec)
        if p > 0.0 and r > 0.0:
            scores.append(((1 + beta**2) * p * r) / (r + beta**2 * p))
        else:
            scores.append(0.0)
    return sum(scores) / len(scores)


def cider_d(
    candidates: Sequence[Sentence],
    references: Sequence,
    max_n: int = 4,
    sigma: float = 6.0,
) -> float:
    """Corpus CIDEr-D: mean over samples of the clipped tf-idf n-gram cosine."""
    _check_corpora(candidates, references)
    if len(candidates) < 2:
        raise EmptyCorpusError("CIDEr needs at least 2 samples for idf")
    cands = [_tokens(c) for c in candidates]
    refs = _ref_lists(references)

    # document frequency over reference sets (an n-gram counts once per image)
    doc_freq: dict[tuple, int] = defaultdict(int)
    for ref_group in refs:
        grams = set()
        for ref in ref_group:
            for n in range(1, max_n + 1):
                grams.update(_ngrams(ref, n).keys())
        for gram in grams:
            doc_freq[gram] += 1
    log_corpus = math.log(len(refs))

    def tfidf(tokens: list[str]):
        vecs, norms = [], []
        for n in range(1, max_n + 1):
            vec = {
                gram: cnt * (log_corpus - math.log(max(1.0, doc_freq[gram])))
                for gram, cnt in _ngrams(tokens, n).items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for cand, ref_group in zip(cands, refs):
        cand_vecs, cand_norms = tfidf(cand)
        per_n = [0.0] * max_n
        for ref in ref_group:
            ref_vecs, ref_norms = tfidf(ref)
            delta = float(len(cand) - len(ref))
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            for n in range(max_n):
                num = sum(
                    min(v, ref_vecs[n].get(gram, 0.0)) * ref_vecs[n].get(gram, 0.0)
                    for gram, v in cand_vecs[n].items()
                )
                if cand_norms[n] > 0 and ref_norms[n] > 0:
                    per_n[n] += penalty * num / (cand_norms[n] * ref_norms[n])
        scores.append(10.0 * sum(per_n) / max_n / len(ref_group))
    return sum(scores) / len(scores)


def metric_report(candidates: Sequence[Sentence], references: Sequence) -> dict[str, float]:
    """All supported metrics as a flat dict (JSON-friendly)."""
    b = bleu(candidates, references)
    return {
        "BLEU_1": b[0],
        "BLEU_2": b[1],
        "BLEU_3": b[2],
        "BLEU_4": b[3],
        "ROUGE_L": rouge_l(candidates, references),
        "CIDEr": cider_d(candidates, references),
    }
