"""Byte-pair encoding over whitespace-tokenized text.

Merges are learned and applied on the bare characters of each word.  The
encoder then appends the ``</w>`` suffix to every word-final subword, so
decoding is a concatenation that closes a word after each marker.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOW = "</w>"


class BpeError(ValueError):
    pass


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)
    eow: str = EOW

    def __post_init__(self):
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise BpeError(f"{path}:{n}: expected two space-separated subwords")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def _split_word(word: str) -> tuple[str, ...]:
    return tuple(word)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def bpe_train(corpus: Iterable[Sequence[str] | str], merges: int) -> BpeModel:
    """Learn up to ``merges`` merge operations.

    Each round merges the most frequent adjacent pair (ties broken by the
    lexicographically smallest pair); training stops early once no pair
    occurs at least twice.
    """
    if merges < 0:
        raise BpeError("number of merges must be non-negative")
    words: Counter = Counter()
    for sent in corpus:
        toks = sent.split() if isinstance(sent, str) else sent
        words.update(t for t in toks if t)
    if not words:
        raise BpeError("cannot train BPE on an empty corpus")
    vocab = {_split_word(w): c for w, c in words.items()}
    learned: list[tuple[str, str]] = []
    for _ in range(merges):
        pairs: Counter = Counter()
        for sym, c in vocab.items():
            for i in range(len(sym) - 1):
                pairs[sym[i], sym[i + 1]] += c
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        learned.append(best)
        new_vocab: dict = {}
        for sym, c in vocab.items():
            key = _merge_word(sym, best)
            new_vocab[key] = new_vocab.get(key, 0) + c
        vocab = new_vocab
    return BpeModel(learned)


def encode_word(model: BpeModel, word: str) -> list[str]:
    symbols = _split_word(word)
    ranks = model.ranks
    while len(symbols) > 1:
        best = None
        best_rank = None
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = (symbols[i], symbols[i + 1]), r
        if best is None:
            break
        symbols = _merge_word(symbols, best)
    out = list(symbols)
    out[-1] += model.eow
    return out


def bpe_encode(model: BpeModel, sentence: Sequence[str] | str) -> list[str]:
    toks = sentence.split() if isinstance(sentence, str) else sentence
    out: list[str] = []
    for tok in toks:
        out.extend(encode_word(model, tok))
    return out


def bpe_decode(subwords: Sequence[str], eow: str = EOW) -> list[str]:
    words = []
    cur = ""
    for sw in subwords:
        if sw.endswith(eow):
            words.append(cur + sw[: -len(eow)])
            cur = ""
        else:
            cur += sw
    if cur:
        words.append(cur)
    return words
