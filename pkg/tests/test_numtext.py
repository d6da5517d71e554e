# tests/test_numtext.py

import numpy as np
import pytest
import torch

from app.config import load_config
from app.gait.parameters import NormalizationStats
from app.gait.sentences import make_sentence
from app.models.pipeline import build_text_encoder
from app.models.transformer import FrozenTextEncoder
from app.numtext.basis import build_num_basis, sinusoidal_encoding
from app.numtext.embedding import (
    ItemKind,
    detokenize,
    digit_similarity_map,
    embed_items,
    embed_sequence,
    similarity_map,
    tokenize,
    tokenize_text,
)
from app.numtext.vocab import (
    EOS_ID,
    NUM_FIRST_ID,
    NUM_LAST_ID,
    Vocabulary,
    default_vocabulary,
    number_to_token_id,
    split_words,
    token_id_to_value,
)
from app.processing.plots import value_grid
from app.utils.errors import (
    NumBasisError,
    NumTextError,
    OutOfVocabularyError,
    SequenceTooLongError,
    ValueOutOfRangeError,
)
from app.utils.models import GaitParameterSet, ParameterCombination

TEMPLATE = "the walking speed is [value]"


@pytest.fixture(scope="module")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="module")
def encoder(vocab):
    return FrozenTextEncoder(vocab, d=16, n_layers=2, n_heads=2, max_len=32, seed=0)


# --- vocabulary ---

@pytest.mark.parametrize("v_norm, tok", [(-2.5, 49408), (0.0, 49508), (2.5, 49608)])
def test_number_to_token_id(v_norm, tok):
    assert number_to_token_id(v_norm) == tok


def test_numeric_ids_are_a_bijection_over_buckets():
    ids = list(range(NUM_FIRST_ID, NUM_LAST_ID + 1))
    assert len(ids) == 201
    for tok in ids:
        value = max(-2.5, min(2.5, token_id_to_value(tok)))
        assert number_to_token_id(value) == tok


def test_number_outside_range():
    with pytest.raises(ValueOutOfRangeError):
        number_to_token_id(2.6)


def test_eos_is_not_numeric():
    with pytest.raises(NumTextError):
        token_id_to_value(EOS_ID)


def test_vocabulary_ids(vocab):
    assert vocab.eos_id == 49407
    assert vocab.token_id("<eos>") == EOS_ID
    assert vocab.max_id == NUM_LAST_ID
    word_ids = [vocab.token_id(w) for w in vocab.words()]
    assert len(set(word_ids)) == len(word_ids)
    assert max(word_ids) < EOS_ID
    assert vocab.size == len(vocab.dense_ids)
    assert [vocab.index(t) for t in vocab.dense_ids] == list(range(vocab.size))


def test_vocabulary_file_round_trip(vocab, tmp_path):
    path = vocab.save(str(tmp_path / "vocab.txt"))
    loaded = Vocabulary.load(path)
    assert loaded.dense_ids == vocab.dense_ids
    assert loaded.token_id("walking") == vocab.token_id("walking")


def test_split_words_peels_punctuation():
    assert split_words("Walking speed is 0.84 leg/sec, cadence is 92.9.") == [
        "walking", "speed", "is", "0.84", "leg/sec", ",", "cadence", "is", "92.9", ".",
    ]


# --- basis ---

def test_num_orthogonal_to_positional_encoding():
    basis = build_num_basis(64, 77, seed=0)
    assert basis.max_pe_overlap() < 1e-9
    assert abs(float(basis.num.norm()) - 1.0) < 1e-12
    assert abs(float(basis.is_ @ basis.num)) < 1e-9


def test_full_rank_positional_encoding_is_rejected():
    with pytest.raises(NumBasisError):
        build_num_basis(2, 4, reserved_dims=0)


def test_basis_is_deterministic():
    a, b = build_num_basis(32, 40, seed=5), build_num_basis(32, 40, seed=5)
    assert torch.equal(a.num, b.num) and torch.equal(a.is_, b.is_)


def test_reserved_dims_stay_zero():
    pe = sinusoidal_encoding(10, 8, reserved_dims=2)
    assert torch.equal(pe[:, 6:], torch.zeros(10, 2, dtype=pe.dtype))


# --- tokenization ---

def test_tokenize_fragment(vocab):
    seq = tokenize_text("Walking speed is 0.84 leg/sec", vocab, [0.3])
    assert [item.kind for item in seq.items] == [ItemKind.WORD, ItemKind.WORD, ItemKind.IS, ItemKind.NUM, ItemKind.WORD]
    assert seq.values == [0.3]
    assert seq.items[-1].token_id == vocab.token_id("leg/sec")


def test_text_without_numbers_has_no_num_items(vocab):
    seq = tokenize_text("walking speed", vocab)
    assert seq.values == []
    assert all(item.kind is ItemKind.WORD for item in seq.items)


def test_detokenize_restores_words(vocab):
    words = detokenize(tokenize_text("walking speed is 0.5 leg/sec", vocab), vocab)
    assert words == ["walking", "speed", "is", "0.5", "leg/sec"]


def test_out_of_vocabulary_word_is_named(vocab):
    with pytest.raises(OutOfVocabularyError) as info:
        tokenize_text("walking zebra is 0.5", vocab)
    assert "zebra" in str(info.value)


def test_unnormalized_literal_is_rejected(vocab):
    with pytest.raises(ValueOutOfRangeError):
        tokenize_text("walking speed is 3.5", vocab)


def test_more_numbers_than_supplied_values(vocab):
    with pytest.raises(NumTextError) as info:
        tokenize_text("walking speed is 0.5 leg/sec, number of steps per minute is 1.0", vocab, [0.3])
    assert "1 supplied" in str(info.value)


def test_tokenize_sentence_normalizes_each_value(vocab):
    combo = ParameterCombination(ids=(1, 2, 6, 27))
    row = GaitParameterSet(subject_id="s0", label=0, values={1: 0.84, 2: 92.9, 6: 0.655, 27: 0.444})
    ones = {pid: 1.0 for pid in combo.ids}
    stats = NormalizationStats(mean={1: 0.8, 2: 100.0, 6: 0.6, 27: 0.4}, sigma=ones, scale=ones)
    seq = tokenize(make_sentence(combo, row), vocab, stats)
    assert seq.values == pytest.approx([0.04, -2.5, 0.055, 0.044], abs=1e-12)
    assert sum(item.kind is ItemKind.IS for item in seq.items) == 4


# --- embedding ---

def test_numeric_item_embedding_is_linear_in_value(vocab, encoder):
    seq = tokenize_text(TEMPLATE, vocab, [1.7])
    rows = embed_items(seq, encoder)
    t = len(seq) - 1
    expected = 1.7 * encoder.basis.num + encoder.basis.pe[t]
    assert torch.allclose(rows[t], expected, atol=1e-15, rtol=0)


def test_zero_value_contributes_only_position(vocab, encoder):
    seq = tokenize_text(TEMPLATE, vocab, [0.0])
    rows = embed_items(seq, encoder)
    t = len(seq) - 1
    assert torch.equal(rows[t], encoder.basis.pe[t])


def test_identical_values_give_identical_features(vocab, encoder):
    a = embed_sequence(tokenize_text(TEMPLATE, vocab, [0.5]), encoder)
    b = embed_sequence(tokenize_text(TEMPLATE, vocab, [0.5]), encoder)
    assert torch.equal(a, b)


def test_nearby_values_give_nearby_features(vocab, encoder):
    for v in (-2.0, -0.3, 0.0, 1.1, 2.4):
        a = embed_sequence(tokenize_text(TEMPLATE, vocab, [v]), encoder)
        b = embed_sequence(tokenize_text(TEMPLATE, vocab, [v + 0.01]), encoder)
        cos = float(a @ b / (a.norm() * b.norm()))
        assert 1.0 - cos < 1e-3


def test_sequence_longer_than_encoder(vocab):
    short = FrozenTextEncoder(vocab, d=16, n_layers=1, n_heads=2, max_len=4, seed=0)
    with pytest.raises(SequenceTooLongError):
        embed_sequence(tokenize_text(TEMPLATE, vocab, [0.1]), short)


# --- similarity maps ---

def test_similarity_map_symmetric_with_unit_diagonal(vocab, encoder):
    grid = list(np.linspace(-2.5, 2.5, 21))
    m = similarity_map(TEMPLATE, grid, vocab, encoder)
    assert m.shape == (21, 21)
    assert np.allclose(np.diag(m), 1.0, atol=1e-12)
    assert np.allclose(m, m.T, atol=1e-12)


def test_similarity_map_needs_sorted_grid(vocab, encoder):
    with pytest.raises(ValueError):
        similarity_map(TEMPLATE, [0.5, 0.1], vocab, encoder)


def test_digit_baseline_map(vocab, encoder):
    m = digit_similarity_map(TEMPLATE, [-1.5, 0.0, 0.84, 2.5], vocab, encoder)
    assert m.shape == (4, 4)
    assert np.allclose(np.diag(m), 1.0, atol=1e-12)


def _max_adjacent_gap(m):
    return max(np.abs(np.diff(m, axis=0)).max(), np.abs(np.diff(m, axis=1)).max())


def _non_monotone_fraction(m):
    bad = total = 0
    for i, row in enumerate(m):
        # similarity should not rise while moving away from the diagonal
        right, left = np.diff(row[i:]), np.diff(row[: i + 1][::-1])
        bad += int((right > 1e-12).sum() + (left > 1e-12).sum())
        total += right.size + left.size
    return bad / total


@pytest.mark.slow
def test_similarity_map_is_smooth_at_full_scale():
    encoder = build_text_encoder(load_config())
    coarse = similarity_map(TEMPLATE, value_grid(201), encoder.vocab, encoder)
    fine = similarity_map(TEMPLATE, value_grid(401), encoder.vocab, encoder)
    assert np.allclose(coarse, coarse.T, atol=1e-12)
    assert _max_adjacent_gap(coarse) / _max_adjacent_gap(fine) >= 1.8
    assert _non_monotone_fraction(coarse) <= 0.02
