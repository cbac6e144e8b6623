"""Corpus BLEU and ambiguous-word grounding accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

MAX_ORDER = 4


class MetricError(ValueError):
    pass


@dataclass
class BleuStats:
    matches: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            [a + b for a, b in zip(self.matches, other.matches)],
            [a + b for a, b in zip(self.totals, other.totals)],
            self.hyp_len + other.hyp_len,
            self.ref_len + other.ref_len,
        )

    def score(self, smooth: bool = False) -> float:
        if self.hyp_len == 0:
            return 0.0
        log_prec = 0.0
        for m, t in zip(self.matches, self.totals):
            if smooth:
                m, t = m + 1, t + 1
            if m == 0 or t == 0:
                return 0.0
            log_prec += math.log(m / t)
        bp = 1.0 if self.hyp_len > self.ref_len else math.exp(1.0 - self.ref_len / self.hyp_len)
        return bp * math.exp(log_prec / MAX_ORDER)


def _tokens(s) -> list[str]:
    toks = s.split() if isinstance(s, str) else list(s)
    return [t.lower() for t in toks]


def _ngrams(toks: Sequence[str], n: int) -> Counter:
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def sentence_stats(reference, hypothesis) -> BleuStats:
    ref, hyp = _tokens(reference), _tokens(hypothesis)
    st = BleuStats(hyp_len=len(hyp), ref_len=len(ref))
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        st.matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        st.totals[n - 1] = max(0, len(hyp) - n + 1)
    return st


def corpus_stats(references: Sequence, hypotheses: Sequence) -> BleuStats:
    if len(references) != len(hypotheses):
        raise MetricError(f"{len(references)} references but {len(hypotheses)} hypotheses")
    if not references:
        raise MetricError("BLEU of an empty corpus is undefined")
    total = BleuStats()
    for r, h in zip(references, hypotheses):
        total = total + sentence_stats(r, h)
    return total


def bleu(references: Sequence, hypotheses: Sequence, smooth: bool = False) -> float:
    """Corpus BLEU-4 with brevity penalty, in [0, 1] (lowercased whitespace tokens)."""
    return corpus_stats(references, hypotheses).score(smooth)


def format_bleu(score: float) -> str:
    return f"{100.0 * score:.2f}"


def grounding_accuracy(
    hypotheses: Sequence,
    references: Sequence,
    annotations: Sequence[Sequence[int]],
    lexicon: dict[str, list[str]] | None = None,
    window: int = 2,
) -> float:
    """Fraction of annotated ambiguous positions realised with the correct sense.

    The correct sense is the reference token at each annotated position.  A
    position counts as correct when the hypothesis has that token at the same
    index, or anywhere within ``±window`` tokens of it.
    """
    if not (len(hypotheses) == len(references) == len(annotations)):
        raise MetricError(
            f"count mismatch: {len(hypotheses)} hypotheses, {len(references)} references, "
            f"{len(annotations)} annotation lines"
        )
    senses = None
    if lexicon:
        senses = {s for forms in lexicon.values() for s in forms}
    hits = total = 0
    for hyp, ref, positions in zip(hypotheses, references, annotations):
        h = hyp.split() if isinstance(hyp, str) else list(hyp)
        r = ref.split() if isinstance(ref, str) else list(ref)
        for pos in positions:
            if not 0 <= pos < len(r):
                raise MetricError(f"annotated position {pos} outside reference of length {len(r)}")
            gold = r[pos]
            if senses is not None and gold not in senses:
                raise MetricError(f"reference token '{gold}' at position {pos} is not a known sense")
            total += 1
            if pos < len(h) and h[pos] == gold:
                hits += 1
            elif gold in h[max(0, pos - window) : pos + window + 1]:
                hits += 1
    if total == 0:
        raise MetricError("no annotated positions: grounding accuracy is undefined")
    return hits / total
