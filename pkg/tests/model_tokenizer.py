import pytest
from hypothesis import given
from hypothesis import strategies as st

from AAROS.core import BBox
from AAROS.tokenizer import (
    Vocab,
    category_token_positions,
    encode_response,
    parse_response,
    parse_text,
    response_words,
)

VOCAB = Vocab(["nodule", "cyst", "stone", "polyp"], 10)


def test_round_trip_of_canonical_response() -> None:
    response = parse_response(VOCAB, encode_response(VOCAB, 2, BBox(1, 2, 5, 6)))
    assert response.schema_valid
    assert response.parsed_category == 2
    assert response.parsed_bbox == BBox(1, 2, 5, 6)
    assert response.text == "abnormality detected bbox 1 2 5 6 category stone"


def test_empty_sequence_is_invalid() -> None:
    response = parse_response(VOCAB, [])
    assert not response.schema_valid
    assert response.parsed_category is None and response.parsed_bbox is None


def test_category_before_bbox_still_parses() -> None:
    tokens = VOCAB.encode(["category", "cyst", "abnormality", "detected", "bbox", "1", "2", "5", "6"])
    response = parse_response(VOCAB, tokens)
    assert response.schema_valid
    assert response.parsed_category == 1
    assert response.parsed_bbox == BBox(1, 2, 5, 6)


def test_truncated_bbox_is_not_parsed() -> None:
    response = parse_response(VOCAB, VOCAB.encode(["bbox", "1", "2", "category", "cyst"]))
    assert response.parsed_bbox is None
    assert response.parsed_category == 1
    assert not response.schema_valid


def test_inverted_bbox_is_not_parsed() -> None:
    response = parse_response(VOCAB, VOCAB.encode(["bbox", "5", "2", "1", "6", "category", "cyst"]))
    assert response.parsed_bbox is None


def test_parsing_stops_at_eos() -> None:
    tokens = [*VOCAB.encode(["bbox", "1", "2", "5", "6"]), VOCAB.eos_id, *VOCAB.encode(["category", "cyst"])]
    response = parse_response(VOCAB, tokens)
    assert response.parsed_category is None
    assert response.text == "bbox 1 2 5 6"


@given(st.lists(st.integers(min_value=-3, max_value=len(VOCAB) + 3), max_size=20))
def test_parser_is_total(tokens: list[int]) -> None:
    response = parse_response(VOCAB, tokens)
    if response.schema_valid:
        assert response.parsed_category is not None and response.parsed_bbox is not None


def test_ids_are_contiguous_and_round_trip() -> None:
    ids = VOCAB.encode(VOCAB.tokens)
    assert ids == list(range(len(VOCAB)))
    assert VOCAB.encode(VOCAB.decode(ids)) == ids


def test_unknown_word_is_rejected() -> None:
    with pytest.raises(ValueError):
        VOCAB.encode(["fracture"])


def test_vocab_serialises() -> None:
    assert Vocab.from_dict(VOCAB.to_dict()) == VOCAB


def test_colliding_category_name_is_rejected() -> None:
    with pytest.raises(ValueError):
        Vocab(["bbox", "cyst"], 10)


def test_parse_text_keeps_vocabulary_words() -> None:
    response = parse_text(VOCAB, "The Category is CYST, found in bbox 1 2 5 6.")
    assert response.parsed_category is None
    response = parse_text(VOCAB, "category cyst, bbox 1 2 5 6")
    assert response.schema_valid


def test_coordinates_are_clamped_to_vocabulary() -> None:
    assert response_words("cyst", BBox(0, 0, 12, 3), max_coordinate=10)[3:7] == ("0", "0", "10", "3")


def test_category_token_positions() -> None:
    tokens = encode_response(VOCAB, 3, BBox(0, 0, 2, 2))
    assert category_token_positions(VOCAB, tokens) == [8]
    assert category_token_positions(VOCAB, []) == []
