import pytest
from hypothesis import given, strategies as st

from radgen.vocab import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    Vocabulary,
    build_vocabulary,
    tokenize,
)


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("The heart, is NORMAL.") == ["the", "heart", "is", "normal"]
    assert tokenize("a-b c") == ["a", "b", "c"]
    assert tokenize("") == []


def test_build_keeps_only_tokens_above_threshold():
    corpus = ["the heart is normal", "the lungs are clear", "the heart is enlarged"]
    vocab = build_vocabulary(corpus, min_count=2)
    # "the" occurs 3 > 2; "heart"/"is" occur exactly 2 and are excluded
    assert vocab.id_to_token == [*SPECIAL_TOKENS, "the"]


def test_empty_corpus_yields_specials_only():
    vocab = build_vocabulary([], min_count=3)
    assert len(vocab) == 4
    assert vocab.id_to_token == list(SPECIAL_TOKENS)


def test_single_report_threshold():
    vocab = build_vocabulary(["a a a a"], min_count=3)
    assert vocab.id_to_token == [*SPECIAL_TOKENS, "a"]


def test_ids_by_descending_frequency_then_lexicographic():
    corpus = ["b b b c c c a a a a"]
    vocab = build_vocabulary(corpus, min_count=0)
    # a has count 4; b and c tie at 3 and break lexicographically
    assert vocab.id_to_token[4:] == ["a", "b", "c"]


def test_special_ids_are_lowest_four():
    assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)


def test_encode_wraps_with_bos_eos_and_maps_unknowns():
    vocab = build_vocabulary(["x x x x"], min_count=2)
    ids = vocab.encode("x y")
    assert ids[0] == BOS_ID and ids[-1] == EOS_ID
    assert ids[1] == vocab.token_to_id["x"]
    assert ids[2] == UNK_ID


def test_decode_strips_specials_and_stops_at_eos():
    vocab = build_vocabulary(["x x x x y y y y"], min_count=2)
    ids = vocab.encode("x y")
    assert vocab.decode(ids) == ["x", "y"]
    assert vocab.decode(ids + [vocab.token_to_id["x"]]) == ["x", "y"]


def test_save_load_round_trip(tmp_path):
    vocab = build_vocabulary(["alpha beta beta alpha alpha"], min_count=1)
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[:4] == list(SPECIAL_TOKENS)
    loaded = Vocabulary.load(path)
    assert loaded.id_to_token == vocab.id_to_token


def test_constructor_rejects_bad_specials():
    with pytest.raises(ValueError):
        Vocabulary(id_to_token=["<pad>", "<bos>", "<eos>", "oops"])


@given(
    st.lists(
        st.text(alphabet=st.sampled_from("abcdef"), min_size=1, max_size=4),
        min_size=1,
        max_size=30,
    )
)
def test_round_trip_identity_for_kept_tokens(words):
    vocab = build_vocabulary([" ".join(words)], min_count=0)
    for tok in set(words):
        assert vocab.id_to_token[vocab.token_to_id[tok]] == tok
