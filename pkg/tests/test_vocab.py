"""Tokenizer and vocabulary persistence."""

import numpy as np
import pytest

from jointvl.errors import DataError
from jointvl.vocab import (CLS_ID, MASK_ID, PAD_ID, SEP_ID, UNK_ID, Vocabulary,
                           detokenize, split_tokens, tokenize)


class TestVocabulary:
    def test_reserved_ids_fixed(self):
        vocab = Vocabulary(["alpha", "beta"])
        assert (PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID) == (0, 1, 2, 3, 4)
        assert vocab.id_of("alpha") == 5
        assert vocab.id_of("beta") == 6
        assert vocab.id_of("gamma") == UNK_ID

    def test_build_first_seen_order_and_dedup(self):
        vocab = Vocabulary.build(["b a", "a c a"])
        assert vocab.id_of("b") == 5
        assert vocab.id_of("a") == 6
        assert vocab.id_of("c") == 7
        assert len(vocab) == 8

    def test_save_load_round_trip(self, tmp_path):
        vocab = Vocabulary.build(["one two three", "two four"])
        path = tmp_path / "vocab.tsv"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert len(loaded) == len(vocab)
        for token in ("one", "two", "three", "four"):
            assert loaded.id_of(token) == vocab.id_of(token)

    def test_load_rejects_gapped_ids(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("[pad]\t0\n[cls]\t1\n[sep]\t2\n[mask]\t3\n[unk]\t4\nx\t9\n")
        with pytest.raises(DataError):
            Vocabulary.load(path)

    def test_random_regular_id_never_reserved(self, rng):
        vocab = Vocabulary(["a", "b", "c"])
        draws = {vocab.random_regular_id(rng) for _ in range(200)}
        assert draws <= {5, 6, 7}
        assert len(draws) == 3


class TestTokenize:
    def test_lowercase_and_punctuation_split(self):
        assert split_tokens("There is, EDEMA!  x2.") == ["there", "is", "edema", "x2"]

    def test_empty_report_all_pad(self):
        vocab = Vocabulary(["a"])
        seq = tokenize("", vocab, 8)
        assert seq.true_length == 0
        assert np.all(seq.ids == PAD_ID)

    def test_truncation_to_max_len(self):
        vocab = Vocabulary.build(["w"])
        seq = tokenize(" ".join(["w"] * 300), vocab, 253)
        assert len(seq.ids) == 253 and seq.true_length == 253

    def test_padding_and_unk(self):
        vocab = Vocabulary(["known"])
        seq = tokenize("known mystery", vocab, 5)
        assert seq.ids.tolist() == [5, UNK_ID, PAD_ID, PAD_ID, PAD_ID]
        assert seq.true_length == 2

    def test_tokenize_detokenize_round_trip_in_vocab(self):
        text = "stable edema noted. no acute findings."
        vocab = Vocabulary.build([text])
        seq = tokenize(text, vocab, 16)
        rebuilt = detokenize(seq.ids, vocab)
        again = tokenize(rebuilt, vocab, 16)
        np.testing.assert_array_equal(seq.ids, again.ids)

    def test_detokenize_drops_reserved(self):
        vocab = Vocabulary(["word"])
        assert detokenize([CLS_ID, 5, SEP_ID, PAD_ID], vocab) == "word"
