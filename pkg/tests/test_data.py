import math

import numpy as np
import pytest

from cdl import data
from cdl.exceptions import ArgumentError, ParseError, ValidationError
from cdl.training import HyperParams


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadRatings:
    def test_direct_readback(self, tmp_path):
        path = write(tmp_path, "r.tsv", "0\t0\n1\t2\n")
        ratings = data.load_ratings(path)
        assert ratings.num_users == 2
        assert ratings.num_items == 3
        assert ratings.nnz == 2
        assert np.array_equal(ratings.pairs, [[0, 0], [1, 2]])

    def test_empty_file(self, tmp_path):
        ratings = data.load_ratings(write(tmp_path, "r.tsv", ""))
        assert (ratings.num_users, ratings.num_items, ratings.nnz) == (0, 0, 0)

    def test_malformed_line_reports_lineno(self, tmp_path):
        path = write(tmp_path, "r.tsv", "a b\n")
        with pytest.raises(ParseError, match=":1:"):
            data.load_ratings(path)

    def test_duplicate_pair_rejected(self, tmp_path):
        path = write(tmp_path, "r.tsv", "0\t1\n0\t1\n")
        with pytest.raises(ValidationError, match="duplicate"):
            data.load_ratings(path)

    def test_header_overrides_dims(self, tmp_path):
        path = write(tmp_path, "r.tsv", "# users=5 items=7\n0\t0\n")
        ratings = data.load_ratings(path)
        assert (ratings.num_users, ratings.num_items) == (5, 7)

    def test_save_round_trip(self, tmp_path):
        ratings = data.RatingsMatrix(4, 6, [[0, 1], [3, 5], [2, 0]])
        path = tmp_path / "out.tsv"
        data.save_ratings(ratings, path)
        back = data.load_ratings(path)
        assert back.num_users == 4 and back.num_items == 6
        assert np.array_equal(back.pairs, ratings.pairs)

    def test_row_and_column_access(self):
        ratings = data.RatingsMatrix(3, 4, [[0, 1], [0, 3], [2, 1]])
        assert list(ratings.items_of(0)) == [1, 3]
        assert list(ratings.items_of(1)) == []
        assert list(ratings.users_of(1)) == [0, 2]
        dense = ratings.to_dense()
        assert dense.sum() == 3 and dense[0, 3] == 1.0


class TestLoadContent:
    def test_maxnorm_divides_by_row_max(self, tmp_path):
        # row counts (3, 1, 0) -> (1.0, 1/3, 0.0)
        path = write(tmp_path, "c.tsv", "0\t0\t3\n0\t1\t1\n")
        content = data.load_content(path, mode=data.COUNT_MAXNORM, vocab_size=3)
        np.testing.assert_allclose(content.row(0), [1.0, 1.0 / 3.0, 0.0])

    def test_binary_presence_indicator(self, tmp_path):
        path = write(tmp_path, "c.tsv", "0\t0\t3\n0\t1\t1\n")
        content = data.load_content(path, mode=data.BINARY_PRESENCE, vocab_size=3)
        np.testing.assert_array_equal(content.row(0), [1.0, 1.0, 0.0])

    def test_all_zero_row_warns(self, tmp_path, caplog):
        path = write(tmp_path, "c.tsv", "1\t0\t2\n")
        with caplog.at_level("WARNING"):
            content = data.load_content(path, num_items=3)
        assert "all-zero" in caplog.text
        np.testing.assert_array_equal(content.row(0), [0.0])

    def test_word_id_out_of_vocab(self, tmp_path):
        path = write(tmp_path, "c.tsv", "0\t9\t1\n")
        with pytest.raises(ValidationError, match="word id 9"):
            data.load_content(path, vocab_size=5)

    def test_nonpositive_count(self, tmp_path):
        with pytest.raises(ValidationError, match="positive"):
            data.load_content(write(tmp_path, "a.tsv", "0\t0\t-2\n"))
        with pytest.raises(ValidationError, match="positive"):
            data.load_content(write(tmp_path, "b.tsv", "0\t0\t0\n"))

    def test_values_stay_in_unit_interval(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = [
            f"{i}\t{w}\t{rng.integers(1, 50)}"
            for i in range(20)
            for w in rng.choice(30, size=5, replace=False)
        ]
        path = write(tmp_path, "c.tsv", "\n".join(lines) + "\n")
        for mode in (data.BINARY_PRESENCE, data.COUNT_MAXNORM):
            content = data.load_content(path, mode=mode)
            assert content.matrix.data.min() >= 0.0
            assert content.matrix.data.max() <= 1.0


class TestCorrupt:
    def make_content(self, seed=0, shape=(40, 25), density=0.3):
        rng = np.random.default_rng(seed)
        dense = rng.random(shape) * (rng.random(shape) < density)
        return data.ContentMatrix(dense, data.RAW)

    def test_zero_noise_is_identity(self):
        content = self.make_content()
        out = data.corrupt(content, 0.0, seed=1)
        assert (out.matrix != content.matrix).nnz == 0

    def test_full_noise_zeroes_everything(self):
        out = data.corrupt(self.make_content(), 1.0, seed=1)
        assert out.matrix.nnz == 0

    def test_masked_fraction_concentrates(self):
        # binomial concentration: 1e5 nonzeros at level 0.3 -> within 0.01
        dense = np.ones((200, 500))
        content = data.ContentMatrix(dense, data.RAW)
        out = data.corrupt(content, 0.3, seed=5)
        masked = 1.0 - out.matrix.nnz / content.matrix.nnz
        assert abs(masked - 0.3) < 0.01

    def test_never_changes_zero_never_increases(self):
        content = self.make_content(seed=3)
        out = data.corrupt(content, 0.4, seed=9)
        before = content.toarray()
        after = out.toarray()
        assert np.all(after <= before)
        assert np.all(after[before == 0.0] == 0.0)
        # unmasked entries keep the clean value exactly
        kept = after != 0.0
        assert np.array_equal(after[kept], before[kept])

    def test_deterministic_per_seed(self):
        content = self.make_content(seed=4)
        a = data.corrupt(content, 0.5, seed=11)
        b = data.corrupt(content, 0.5, seed=11)
        assert (a.matrix != b.matrix).nnz == 0

    def test_bad_noise_level(self):
        with pytest.raises(ArgumentError):
            data.corrupt(self.make_content(), 1.5, seed=0)


class TestSplit:
    def make_ratings(self, seed=0, num_users=30, num_items=50, per_user=(1, 12)):
        rng = np.random.default_rng(seed)
        pairs = []
        for u in range(num_users):
            n = rng.integers(per_user[0], per_user[1])
            items = rng.choice(num_items, size=n, replace=False)
            pairs += [(u, int(j)) for j in items]
        return data.RatingsMatrix(num_users, num_items, pairs)

    def test_five_items_p1(self):
        ratings = data.RatingsMatrix(1, 5, [[0, j] for j in range(5)])
        train, test, eval_users = data.split(ratings, data.SplitSpec(P=1, seed=0))
        assert train.nnz == 1 and test.nnz == 4
        assert eval_users == {0}

    def test_too_few_items_all_in_train(self):
        ratings = data.RatingsMatrix(1, 5, [[0, 1], [0, 3]])
        train, test, eval_users = data.split(ratings, data.SplitSpec(P=10, seed=0))
        assert train.nnz == 2 and test.nnz == 0
        assert eval_users == set()

    def test_same_seed_same_split(self):
        ratings = self.make_ratings()
        a = data.split(ratings, data.SplitSpec(P=2, seed=7))
        b = data.split(ratings, data.SplitSpec(P=2, seed=7))
        assert np.array_equal(a[0].pairs, b[0].pairs)
        assert np.array_equal(a[1].pairs, b[1].pairs)
        assert a[2] == b[2]

    def test_union_and_disjointness(self):
        ratings = self.make_ratings(seed=2)
        train, test, _ = data.split(ratings, data.SplitSpec(P=3, seed=1))
        merged = {tuple(p) for p in train.pairs} | {tuple(p) for p in test.pairs}
        assert merged == {tuple(p) for p in ratings.pairs}
        assert train.nnz + test.nnz == ratings.nnz

    def test_exactly_p_train_items_per_eval_user(self):
        ratings = self.make_ratings(seed=5)
        P = 4
        train, test, eval_users = data.split(ratings, data.SplitSpec(P=P, seed=3))
        for u in eval_users:
            assert len(train.items_of(u)) == P
            assert len(test.items_of(u)) >= 1

    def test_manifest_round_trip(self, tmp_path):
        ratings = self.make_ratings(seed=8)
        spec = data.SplitSpec(P=2, seed=13)
        train, _, _ = data.split(ratings, spec)
        path = tmp_path / "split.txt"
        data.write_split_manifest(path, train, spec)
        back, meta = data.read_split_manifest(path)
        assert meta == {"seed": 13, "P": 2, "users": 30, "items": 50}
        assert np.array_equal(back.pairs, train.pairs)


class TestVocabulary:
    corpus = [
        (0, "apple", 3), (0, "pear", 1),
        (1, "apple", 2), (1, "fig", 4),
        (2, "pear", 1), (2, "fig", 1),
    ]

    def test_top_terms_by_tfidf(self):
        # tf * ln(3/df): apple 5*ln(1.5), pear 2*ln(1.5), fig 5*ln(1.5)
        vocab = data.build_vocabulary(self.corpus, size=2)
        assert [t for t, _, _ in vocab.terms] == ["apple", "fig"]

    def test_tie_broken_lexicographically(self):
        triples = [(0, "b", 1), (1, "a", 1), (2, "c", 1)]
        vocab = data.build_vocabulary(triples, size=2)
        assert [t for t, _, _ in vocab.terms] == ["a", "b"]

    def test_scores_match_formula(self):
        vocab = data.build_vocabulary(self.corpus, size=3)
        by_token = {t: (df, score) for t, df, score in vocab.terms}
        assert by_token["apple"] == (2, pytest.approx(5 * math.log(3 / 2)))
        assert by_token["pear"] == (2, pytest.approx(2 * math.log(3 / 2)))

    def test_save_load_round_trip(self, tmp_path):
        vocab = data.build_vocabulary(self.corpus, size=3)
        path = tmp_path / "vocab.tsv"
        vocab.save(path)
        back = data.Vocabulary.load(path)
        assert [t for t, _, _ in back.terms] == [t for t, _, _ in vocab.terms]
        assert back.word_id("apple") == vocab.word_id("apple")

    def test_apply_vocabulary_drops_oov(self):
        vocab = data.build_vocabulary(self.corpus, size=2)
        mapped = data.apply_vocabulary([(0, "apple", 2), (0, "pear", 9)], vocab)
        assert mapped == [(0, vocab.word_id("apple"), 2)]


def synth_hyper(**kw):
    base = dict(lambda_u=1.0, lambda_v=100.0, lambda_n=1e4, lambda_w=1.0,
                conf_a=1.0, conf_b=0.01, n_factors=4, noise_level=0.3,
                dropout_rate=0.0, learning_rate=0.01, momentum=0.9,
                epochs_per_block=1, max_sweeps=2, seed=0)
    base.update(kw)
    return HyperParams(**base)


class TestGenerateSynthetic:
    def test_infinite_lambda_v_pins_items_to_codes(self):
        hyper = synth_hyper(lambda_v=math.inf)
        _, content, _, V, net = data.generate_synthetic(10, 15, 8, 4, hyper, seed=1)
        from cdl import sdae
        # regenerate the seed input through the recorded generator stages
        rngs = np.random.SeedSequence(1).spawn(5)
        x_seed = (np.random.default_rng(rngs[1]).random((15, 8)) < 0.2).astype(float)
        codes = sdae.forward(net, x_seed).layer_outputs[net.middle]
        np.testing.assert_array_equal(V, codes)

    def test_fixed_seed_bitwise_identical(self):
        hyper = synth_hyper()
        a = data.generate_synthetic(10, 15, 8, 4, hyper, seed=9)
        b = data.generate_synthetic(10, 15, 8, 4, hyper, seed=9)
        assert np.array_equal(a[0].pairs, b[0].pairs)
        assert (a[1].matrix != b[1].matrix).nnz == 0
        np.testing.assert_array_equal(a[2], b[2])
        np.testing.assert_array_equal(a[3], b[3])
        for wa, wb in zip(a[4].weights, b[4].weights):
            np.testing.assert_array_equal(wa, wb)

    def test_user_factor_mean_within_3_sigma(self):
        hyper = synth_hyper()
        _, _, U, _, _ = data.generate_synthetic(50, 80, 8, 4, hyper, seed=2)
        n = U.size
        sigma = hyper.lambda_u ** -0.5 / math.sqrt(n)
        assert abs(U.mean()) < 3 * sigma

    def test_content_in_unit_interval(self):
        hyper = synth_hyper(lambda_n=10.0)
        _, content, _, _, _ = data.generate_synthetic(10, 20, 8, 4, hyper, seed=3)
        dense = content.toarray()
        assert dense.min() >= 0.0 and dense.max() <= 1.0
