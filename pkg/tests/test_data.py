import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grounded_mmt import bpe, data, synth
from grounded_mmt.vocab import BOS, EOS, PAD, UNK, Vocabulary


def _strip(subwords):
    return [s.replace(bpe.EOW, "") for s in subwords]


class TestBpe:
    def test_abab_single_merge(self):
        model = bpe.bpe_train(["abab"], 1)
        assert model.merges == [("a", "b")]

    def test_brute_force_pair_counts(self):
        # every adjacent pair of "abab": ab, ba, ab -> ab wins with 2
        counts = Counter(("abab"[i], "abab"[i + 1]) for i in range(3))
        assert counts.most_common(1)[0] == (("a", "b"), 2)

    def test_zero_merges(self):
        model = bpe.bpe_train(["hello world"], 0)
        assert model.merges == []
        assert bpe.bpe_encode(model, "hi") == ["h", "i" + bpe.EOW]

    def test_single_char_word(self):
        assert bpe.bpe_train(["a"], 5).merges == []

    def test_empty_corpus(self):
        with pytest.raises(bpe.BpeError):
            bpe.bpe_train([], 3)
        with pytest.raises(bpe.BpeError):
            bpe.bpe_train(["", "  "], 3)

    def test_apply_one_merge(self):
        out = bpe.bpe_encode(bpe.BpeModel([("a", "b")]), "abab")
        assert _strip(out) == ["ab", "ab"]
        assert out[-1].endswith(bpe.EOW)

    def test_stops_below_two_occurrences(self):
        model = bpe.bpe_train(["abc"], 10)
        assert model.merges == []

    def test_ties_are_lexicographic(self):
        # "xy" and "ab" both occur twice; ("a","b") sorts first
        model = bpe.bpe_train(["xy ab xy ab"], 1)
        assert model.merges == [("a", "b")]

    def test_merge_order_by_frequency(self):
        model = bpe.bpe_train(["low low low lower newest newest"], 3)
        assert model.merges[0] == ("l", "o")
        assert len(model.merges) <= 3

    def test_deterministic(self):
        corpus = ["the cat sat on the mat", "the dog sat"]
        assert bpe.bpe_train(corpus, 20).merges == bpe.bpe_train(corpus, 20).merges

    def test_save_load(self, tmp_path):
        model = bpe.bpe_train(["the cat sat on the mat"] * 2, 10)
        path = tmp_path / "codes"
        model.save(path)
        assert bpe.BpeModel.load(path).merges == model.merges

    def test_unknown_chars_pass_through(self):
        model = bpe.bpe_train(["abab"], 1)
        assert _strip(bpe.bpe_encode(model, "zé")) == ["z", "é"]

    def test_random_round_trip(self):
        rng = np.random.default_rng(3)
        alphabet = list("abcdefgh")
        train = [" ".join("".join(rng.choice(alphabet, size=rng.integers(1, 7))) for _ in range(6))
                 for _ in range(50)]
        model = bpe.bpe_train(train, 40)
        for _ in range(1000):
            words = ["".join(rng.choice(alphabet + ["x", "ü"], size=rng.integers(1, 9)))
                     for _ in range(rng.integers(1, 6))]
            assert bpe.bpe_decode(bpe.bpe_encode(model, words)) == words


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet=st.characters(blacklist_categories=("Zs", "Cc", "Zl", "Zp")),
                        min_size=1, max_size=8), min_size=1, max_size=6))
def test_bpe_round_trip_property(words):
    words = [w for w in words if w.split() == [w] and bpe.EOW not in w]
    if not words:
        return
    model = bpe.bpe_train([words, words], 15)
    assert bpe.bpe_decode(bpe.bpe_encode(model, words)) == words


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary.build([["b", "a", "b"]])
        assert v.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
        assert v.tokens[4] == "b"

    def test_unknown_maps_to_unk(self):
        v = Vocabulary.build([["a"]])
        assert v.encode(["a", "zzz"], add_eos=True) == [4, UNK, EOS]

    def test_bijection_and_decode(self):
        v = Vocabulary.build([["x", "y", "z"]])
        assert len(set(v.index.values())) == len(v)
        assert v.decode([v.index["x"], v.index["z"], EOS, v.index["y"]]) == ["x", "z"]

    def test_save_load(self, tmp_path):
        v = Vocabulary.build([["x", "y"], ["y"]])
        v.save(tmp_path / "v")
        assert Vocabulary.load(tmp_path / "v").tokens == v.tokens


def _write_raw(path, header, payload=b""):
    path.write_bytes(header + payload)


class TestFeatures:
    def test_small_store(self, tmp_path):
        p = tmp_path / "f.feat"
        data.save_features(p, np.arange(6, dtype=float).reshape(2, 3))
        store = data.load_features(p)
        assert (store.n, store.d) == (2, 3)
        np.testing.assert_allclose(store.features, np.arange(6).reshape(2, 3) / 5.0)

    def test_zero_row_preserved(self, tmp_path):
        p = tmp_path / "f.feat"
        data.save_features(p, np.array([[0.0, 0.0, 0.0], [1.0, 4.0, 2.0]]))
        store = data.load_features(p)
        assert not store.features[0].any()

    def test_empty_store_rejected(self, tmp_path):
        p = tmp_path / "f.feat"
        _write_raw(p, struct.pack("<4sBII", b"MMTF", 1, 0, 3))
        with pytest.raises(data.DataFormatError, match="n = 0"):
            data.load_features(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "f.feat"
        _write_raw(p, struct.pack("<4sBII", b"XXXX", 1, 1, 1), b"\0" * 4)
        with pytest.raises(data.DataFormatError, match="byte 0"):
            data.load_features(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "f.feat"
        _write_raw(p, struct.pack("<4sBII", b"MMTF", 1, 2, 3), b"\0" * 20)
        with pytest.raises(data.DataFormatError, match="byte 33"):
            data.load_features(p)

    def test_non_finite_offset(self, tmp_path):
        p = tmp_path / "f.feat"
        vals = np.array([1.0, np.nan, 2.0], dtype="<f4").tobytes()
        _write_raw(p, struct.pack("<4sBII", b"MMTF", 1, 1, 3), vals)
        with pytest.raises(data.DataFormatError, match="byte 17"):
            data.load_features(p)

    def test_alignment_error(self):
        store = data.FeatureStore(np.ones((2, 3)))
        with pytest.raises(data.AlignmentError):
            store.rows([2])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalization_range_and_idempotence(x):
    once = data.normalize_features(x)
    assert once.min() >= 0.0 and once.max() <= 1.0
    np.testing.assert_array_equal(data.normalize_features(once), once)


def _toy(n, rng):
    src = [list(rng.integers(4, 9, size=rng.integers(1, 6))) for _ in range(n)]
    tgt = [list(rng.integers(4, 9, size=rng.integers(1, 6))) + [EOS] for _ in range(n)]
    return src, tgt, data.FeatureStore(rng.random((n, 3)))


class TestBatching:
    def test_sizes(self, rng):
        src, tgt, feats = _toy(5, rng)
        sizes = sorted(len(b) for b in data.make_batches(src, tgt, feats, batch_size=2, shuffle_seed=0))
        assert sizes == [1, 2, 2]

    def test_same_seed_same_batches(self, rng):
        src, tgt, feats = _toy(20, rng)
        a = data.make_batches(src, tgt, feats, 4, shuffle_seed=9)
        b = data.make_batches(src, tgt, feats, 4, shuffle_seed=9)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.indices, y.indices)
            np.testing.assert_array_equal(x.src, y.src)

    def test_mask_definition(self):
        ids, mask = data.pad([[5, 6, 7], [5]])
        np.testing.assert_array_equal(mask, [[1, 1, 1], [1, 0, 0]])
        np.testing.assert_array_equal(ids[1], [5, PAD, PAD])

    def test_feature_alignment(self, rng):
        src, tgt, _ = _toy(5, rng)
        with pytest.raises(data.AlignmentError):
            data.make_batches(src, tgt, data.FeatureStore(np.ones((3, 2))), 2)

    def test_bucketing_limits_padding(self, rng):
        src, tgt, feats = _toy(64, rng)
        batches = data.make_batches(src, tgt, feats, 8, shuffle_seed=1)
        for b in batches:
            lens = b.src_mask.sum(axis=1)
            assert lens.max() - lens.min() <= 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 100))
    def test_each_index_once(self, n, bs, seed):
        rng = np.random.default_rng(seed)
        src, tgt, feats = _toy(n, rng)
        batches = data.make_batches(src, tgt, feats, bs, shuffle_seed=seed)
        idx = np.concatenate([b.indices for b in batches])
        assert sorted(idx.tolist()) == list(range(n))
        for b in batches:
            assert len(b) <= bs
            np.testing.assert_array_equal(b.src_mask, (b.src != PAD).astype(float))
            np.testing.assert_array_equal(b.feats, feats.rows(b.indices))


class TestCorpusIO:
    def test_line_count_mismatch(self, tmp_path):
        (tmp_path / "a").write_text("x y\n")
        (tmp_path / "b").write_text("x\ny\n")
        with pytest.raises(data.DataFormatError):
            data.ParallelCorpus.load(tmp_path / "a", tmp_path / "b")

    def test_round_trip(self, tmp_path):
        c = data.ParallelCorpus([["a", "b"], ["c"]], [["A"], ["C", "D"]])
        c.save(tmp_path / "s", tmp_path / "t")
        back = data.ParallelCorpus.load(tmp_path / "s", tmp_path / "t")
        assert back.src == c.src and back.tgt == c.tgt


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        cfg = synth.SynthConfig(n_sentences=50, seed=4)
        p1 = synth.synth_generate(cfg).save(tmp_path / "a")
        p2 = synth.synth_generate(cfg).save(tmp_path / "b")
        for key in p1:
            assert p1[key].read_bytes() == p2[key].read_bytes()

    def test_config_error(self):
        with pytest.raises(synth.SynthConfigError):
            synth.synth_generate(synth.SynthConfig(n_ambiguous=40, senses=2, feat_dim=64))

    def test_no_ambiguity_is_a_cipher(self):
        d = synth.synth_generate(synth.SynthConfig(n_sentences=200, n_ambiguous=0))
        mapping = {}
        for s, t in zip(d.corpus.src, d.corpus.tgt):
            assert len(s) == len(t)
            for a, b in zip(s, t):
                assert mapping.setdefault(a, b) == b
        assert all(not a for a in d.annotations)

    def test_annotations_point_at_senses(self):
        d = synth.synth_generate(synth.SynthConfig(n_sentences=100))
        for s, t, ann, sen in zip(d.corpus.src, d.corpus.tgt, d.annotations, d.senses):
            for pos, k in zip(ann, sen):
                assert t[pos] in d.lexicon[s[pos]]
                assert t[pos] == d.lexicon[s[pos]][k]

    def test_noise_free_linear_classifier(self):
        cfg = synth.SynthConfig(n_sentences=400, n_ambiguous=1, noise=0.0, seed=2)
        d = synth.synth_generate(cfg)
        rows = [i for i, a in enumerate(d.annotations) if a]
        X = d.features.rows(rows)
        y = np.array([d.senses[i][0] for i in rows])
        # least-squares linear classifier with bias
        Xb = np.hstack([X, np.ones((len(X), 1))])
        w, *_ = np.linalg.lstsq(Xb, 2.0 * y - 1.0, rcond=None)
        assert np.mean((Xb @ w > 0) == (y == 1)) == 1.0

    def test_sense_independent_of_source(self):
        d = synth.synth_generate(synth.SynthConfig(n_sentences=10_000, seed=11))
        # plug-in mutual information between the source sentence context
        # (ambiguous word id and its left neighbour) and the sense
        joint = Counter()
        for s, ann, sen in zip(d.corpus.src, d.annotations, d.senses):
            for pos, k in zip(ann, sen):
                ctx = (s[pos], s[pos - 1] if pos else "<s>")
                joint[ctx, k] += 1
        n = sum(joint.values())
        pc, pk = Counter(), Counter()
        for (c, k), m in joint.items():
            pc[c] += m
            pk[k] += m
        mi = sum(m / n * np.log(m * n / (pc[c] * pk[k])) for (c, k), m in joint.items())
        # the plug-in estimate is biased upwards by about (|C|-1)(|K|-1)/(2n)
        bias = (len(pc) - 1) * (len(pk) - 1) / (2 * n)
        assert mi - bias < 0.01

    def test_balanced_senses(self):
        d = synth.synth_generate(synth.SynthConfig(n_sentences=4000, seed=5))
        senses = [k for sen in d.senses for k in sen]
        assert abs(np.mean(senses) - 0.5) < 0.03

    def test_save_and_read_back(self, tmp_path):
        d = synth.synth_generate(synth.SynthConfig(n_sentences=20))
        paths = d.save(tmp_path / "toy")
        assert synth.read_annotations(paths["amb"]) == d.annotations
        assert synth.read_lexicon(paths["lex"]) == d.lexicon
        store = data.load_features(paths["feat"], normalize=False)
        np.testing.assert_allclose(store.features, d.features.features, atol=1e-7)
