import numpy as np
import pytest

from sparselstm.data import (
    PAD,
    UNK,
    DataError,
    LMBatchStream,
    build_vocab,
    holdout_mask,
    lm_batches,
    load_classification_tsv,
    parity_label,
    read_text,
    split_validation,
    synthetic_task,
    tokenize,
)


class TestVocab:
    def test_char_level(self):
        v = build_vocab("aab", "char")
        assert v.tokens == ["a", "b"]
        assert len(build_vocab("aab", "char", specials=(UNK,))) == 3

    def test_word_max_size_counts_specials(self):
        v = build_vocab("x x y", "word", max_size=3, specials=(PAD, UNK))
        assert v.tokens == [PAD, UNK, "x"]
        np.testing.assert_array_equal(v.encode("y x"), [v.unk_id, v.index["x"]])

    def test_deterministic_ids(self):
        corpus = ["b a c", "c b", "a d"]
        assert build_vocab(corpus).tokens == build_vocab(list(corpus)).tokens
        # frequency first, then lexicographic
        assert build_vocab(corpus).tokens[2:] == ["a", "b", "c", "d"]

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            build_vocab("", "char")
        with pytest.raises(DataError):
            build_vocab(["  ", "!!"], "word")

    def test_round_trip(self):
        text = "in the beginning god created the heaven"
        v = build_vocab(text)
        assert v.decode(v.encode(text)) == text
        c = build_vocab(text, "char")
        assert c.decode(c.encode(text)) == text

    def test_tokenize(self):
        assert tokenize("Hello, World!  It's") == ["hello", "world", "it", "s"]

    def test_dump(self, tmp_path):
        v = build_vocab("b a a")
        v.dump(tmp_path / "v.txt")
        assert (tmp_path / "v.txt").read_text().splitlines() == v.tokens


class TestLMBatches:
    def test_hand_layout(self):
        s = LMBatchStream(np.arange(10), 2, 2)
        np.testing.assert_array_equal(s.lanes(), [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]])
        batches = list(lm_batches(s))
        inp, tgt, carry = batches[0]
        np.testing.assert_array_equal(inp, [[0, 1], [5, 6]])
        np.testing.assert_array_equal(tgt, [[1, 2], [6, 7]])
        assert carry is False and all(b[2] for b in batches[1:])

    def test_accounting(self):
        for n, b, t in ((10, 2, 2), (101, 3, 7), (64, 4, 5)):
            s = LMBatchStream(np.arange(n), b, t)
            assert b * t * len(s) <= n - b
            assert sum(x.size for x, _, _ in s) == b * t * len(s)

    def test_epochs_identical(self):
        s = LMBatchStream(np.arange(50) % 7, 3, 4)
        first = [(a.copy(), b.copy()) for a, b, _ in s]
        second = [(a, b) for a, b, _ in s]
        for (a1, b1), (a2, b2) in zip(first, second):
            np.testing.assert_array_equal(a1, a2)
            np.testing.assert_array_equal(b1, b2)

    def test_lane_adjacency(self):
        ids = np.arange(103)
        s = LMBatchStream(ids, 4, 6)
        lane0 = np.concatenate([inp[0] for inp, _, _ in s])
        np.testing.assert_array_equal(lane0, ids[: lane0.size])
        lane2 = np.concatenate([inp[2] for inp, _, _ in s])
        np.testing.assert_array_equal(lane2, ids[2 * s.lane_len : 2 * s.lane_len + lane2.size])

    def test_too_short(self):
        with pytest.raises(DataError):
            LMBatchStream(np.arange(5), 2, 2)


class TestTSV:
    def _vocab(self):
        return build_vocab("hello world foo")

    def test_basic_line(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("1\thello world\n")
        ds = load_classification_tsv(p, self._vocab())
        v = self._vocab()
        np.testing.assert_array_equal(ds.sequences[0], [v.index["hello"], v.index["world"]])
        assert ds.labels[0] == 1

    def test_oov_is_unk(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("0\thello zebra\n")
        v = self._vocab()
        assert load_classification_tsv(p, v).sequences[0][1] == v.unk_id

    def test_bad_line_number(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("".join(f"{i % 2}\thello\n" for i in range(6)) + "no tab here\n")
        with pytest.raises(DataError, match=":7:"):
            load_classification_tsv(p, self._vocab())

    def test_bad_label(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("pos\thello\n")
        with pytest.raises(DataError, match="label"):
            load_classification_tsv(p, self._vocab())

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(DataError, match="nope.tsv"):
            load_classification_tsv(tmp_path / "nope.tsv", self._vocab())
        with pytest.raises(DataError, match="nope.txt"):
            read_text(tmp_path / "nope.txt")

    def test_padding(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("1\thello world foo\n0\tfoo\n")
        ids, lengths, labels = load_classification_tsv(p, self._vocab()).padded(pad_id=0)
        assert ids.shape == (2, 3) and list(lengths) == [3, 1] and list(labels) == [1, 0]
        assert ids[1, 1] == 0 and ids[1, 2] == 0


class TestHoldout:
    def test_fraction_and_determinism(self):
        m = holdout_mask(20_000, 0.15)
        assert abs(m.mean() - 0.15) < 0.01
        np.testing.assert_array_equal(m, holdout_mask(20_000, 0.15))

    def test_split_disjoint(self):
        ds = synthetic_task("parity", np.random.default_rng(0), n_train=400)["train"]
        tr, va = split_validation(ds, 0.15)
        assert len(tr) + len(va) == 400 and len(va) > 0


class TestSynthetic:
    def test_sparse_signal_rule_checker(self):
        d = synthetic_task("sparse_signal", np.random.default_rng(0), n_train=2000)
        for seq, y in zip(d["train"].sequences, d["train"].labels):
            s = list(seq)
            assert s.count(2) == 1 and s.count(5) == 1 and len(s) == 20
            assert y == (1 if s.index(2) < s.index(5) else 0)
            assert max(s) < 32

    def test_balance(self):
        for kind in ("sparse_signal", "parity"):
            labels = synthetic_task(kind, np.random.default_rng(1), n_train=2000)["train"].labels
            assert abs(labels.mean() - 0.5) < 0.05

    def test_parity(self):
        assert parity_label(np.zeros(12, dtype=int)) == 0
        d = synthetic_task("parity", np.random.default_rng(2), n_train=50)
        for seq, y in zip(d["train"].sequences, d["train"].labels):
            assert y == sum(seq) % 2

    def test_copy_memory(self):
        d = synthetic_task("copy_memory", np.random.default_rng(3), n_train=5000)
        ids = d["train"]
        assert d["vocab_size"] == 8 and ids.max() < 8
        agree = np.mean(ids[5:] == ids[:-5])
        assert 0.85 < agree < 0.95

    def test_deterministic(self):
        a = synthetic_task("sparse_signal", np.random.default_rng(4), n_train=30)["train"]
        b = synthetic_task("sparse_signal", np.random.default_rng(4), n_train=30)["train"]
        for x, y in zip(a.sequences, b.sequences):
            np.testing.assert_array_equal(x, y)

    def test_unknown(self):
        with pytest.raises(ValueError):
            synthetic_task("sorting", np.random.default_rng(0))
