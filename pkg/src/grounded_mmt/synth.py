"""Synthetic grounded-translation corpus.

Source sentences are random strings over a word list that translate
token-by-token.  A few "ambiguous" source words have two target
realizations; which one is correct is drawn at random per sentence and
written only into a reserved block of the sentence's feature vector, so
the text alone cannot disambiguate it.

Feature layout (before store normalization and noise)::

    [sense block: A × senses one-hot slots | scene block: bag-of-words projection]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureStore, ParallelCorpus


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_sentences: int = 2000
    n_words: int = 40
    n_ambiguous: int = 8
    senses: int = 2
    min_len: int = 4
    max_len: int = 8
    ambiguous_rate: float = 1.0
    feat_dim: int = 64
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_sentences < 1:
            raise SynthConfigError("n_sentences must be positive")
        if self.n_words < 1:
            raise SynthConfigError("need at least one plain word")
        if not 1 <= self.min_len <= self.max_len:
            raise SynthConfigError("need 1 <= min_len <= max_len")
        if self.senses < 2 and self.n_ambiguous > 0:
            raise SynthConfigError("ambiguous words need at least two senses")
        if self.n_ambiguous * self.senses > self.feat_dim:
            raise SynthConfigError(
                f"{self.n_ambiguous} ambiguous words × {self.senses} senses do not fit "
                f"in a {self.feat_dim}-dimensional feature vector"
            )
        if not 0.0 <= self.ambiguous_rate <= 1.0:
            raise SynthConfigError("ambiguous_rate must lie in [0, 1]")
        if self.noise < 0:
            raise SynthConfigError("noise must be non-negative")


@dataclass
class SynthData:
    corpus: ParallelCorpus
    features: FeatureStore
    annotations: list[list[int]]          # target positions of ambiguous words
    senses: list[list[int]]               # sense id at each annotated position
    lexicon: dict[str, list[str]] = field(default_factory=dict)

    def save(self, prefix) -> dict[str, Path]:
        prefix = Path(prefix)
        paths = {
            "src": prefix.with_suffix(".src"),
            "tgt": prefix.with_suffix(".tgt"),
            "feat": prefix.with_suffix(".feat"),
            "amb": prefix.with_suffix(".amb"),
            "lex": prefix.with_suffix(".lex"),
        }
        self.corpus.save(paths["src"], paths["tgt"])
        self.features.save(paths["feat"])
        write_annotations(paths["amb"], self.annotations)
        paths["lex"].write_text(
            "".join(f"{k}\t{' '.join(v)}\n" for k, v in sorted(self.lexicon.items())), encoding="utf-8"
        )
        return paths


def write_annotations(path, annotations) -> None:
    Path(path).write_text("".join(" ".join(map(str, a)) + "\n" for a in annotations), encoding="utf-8")


def read_annotations(path) -> list[list[int]]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [[int(t) for t in ln.split()] for ln in lines]


def read_lexicon(path) -> dict[str, list[str]]:
    lex = {}
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if ln.strip():
            k, v = ln.split("\t")
            lex[k] = v.split()
    return lex


def plain_word(i: int) -> str:
    return f"w{i}"


def ambiguous_word(a: int) -> str:
    return f"amb{a}"


def plain_translation(i: int) -> str:
    return f"W{i}"


def sense_translation(a: int, s: int) -> str:
    return f"AMB{a}.{s}"


def synth_generate(config: SynthConfig) -> SynthData:
    """Deterministically generate a corpus, its feature store and sense annotations."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    A, K = config.n_ambiguous, config.senses
    sense_dims = A * K if A else 0
    scene_dim = config.feat_dim - sense_dims
    # fixed nonnegative scene code per plain word; drawn first so it does not
    # depend on the corpus size
    scene_codes = rng.random((config.n_words, max(scene_dim, 0)))

    src, tgt, annotations, senses = [], [], [], []
    raw = np.zeros((config.n_sentences, config.feat_dim))
    for n in range(config.n_sentences):
        length = int(rng.integers(config.min_len, config.max_len + 1))
        words = rng.integers(0, config.n_words, size=length)
        s_toks = [plain_word(int(w)) for w in words]
        t_toks = [plain_translation(int(w)) for w in words]
        ann, sen = [], []
        if A and rng.random() < config.ambiguous_rate:
            a = int(rng.integers(0, A))
            s = int(rng.integers(0, K))
            pos = int(rng.integers(0, length))
            s_toks[pos] = ambiguous_word(a)
            t_toks[pos] = sense_translation(a, s)
            ann.append(pos)
            sen.append(s)
            raw[n, a * K + s] = 1.0
        if scene_dim > 0:
            plain = [int(w) for i, w in enumerate(words) if i not in ann]
            if plain:
                raw[n, sense_dims:] = scene_codes[plain].mean(axis=0)
        src.append(s_toks)
        tgt.append(t_toks)
        annotations.append(ann)
        senses.append(sen)
    if config.noise > 0:
        raw += rng.normal(0.0, config.noise, size=raw.shape)
    lexicon = {ambiguous_word(a): [sense_translation(a, s) for s in range(K)] for a in range(A)}
    return SynthData(ParallelCorpus(src, tgt), FeatureStore(raw), annotations, senses, lexicon)


def split(data: SynthData, n_train: int) -> tuple[SynthData, SynthData]:
    """First ``n_train`` sentences for training, the rest held out."""
    def part(idx):
        return SynthData(
            data.corpus.subset(idx),
            data.features.subset(idx),
            [data.annotations[i] for i in idx],
            [data.senses[i] for i in idx],
            data.lexicon,
        )

    n = len(data.corpus)
    return part(range(n_train)), part(range(n_train, n))
