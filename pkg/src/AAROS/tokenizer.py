from __future__ import annotations

import re
from collections.abc import Iterable, Sequence
from typing import Any

from .core import BBox, Response

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
SPECIAL_TOKENS: tuple[str, ...] = (PAD, BOS, EOS, SEP)

DETECTION_PHRASE: tuple[str, ...] = ("abnormality", "detected")
BBOX_KEYWORD = "bbox"
CATEGORY_KEYWORD = "category"
HINT_KEYWORD = "hint"
SCHEMA_KEYWORDS: tuple[str, ...] = (*DETECTION_PHRASE, BBOX_KEYWORD, CATEGORY_KEYWORD, HINT_KEYWORD)

QUERY_WORDS: tuple[str, ...] = (
    "what",
    "is",
    "the",
    "abnormal",
    "finding",
    "in",
    "this",
    "image",
    "diagnose",
    "and",
    "locate",
    "please",
    "describe",
    "scan",
)

QUERY_TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("what", "is", "the", "abnormal", "finding", "in", "this", "image"),
    ("diagnose", "and", "locate", "the", "abnormality"),
    ("please", "describe", "this", "scan"),
)

_WORD_PATTERN = re.compile(r"[a-z0-9_]+")


class Vocab:
    """
    The token inventory: special tokens, schema keywords, category names, coordinate tokens 0..max_coordinate and
    query words, laid out as one contiguous id range in that order.
    """

    def __init__(
        self,
        category_names: Sequence[str],
        max_coordinate: int,
        query_words: Sequence[str] = QUERY_WORDS,
    ) -> None:
        """
        :param category_names: The abnormality category names, indexed by category id
        :param max_coordinate: The largest coordinate value that needs a token (max of grid width and height)
        :param query_words: Words that may appear in user queries
        """
        if max_coordinate < 1:
            raise ValueError("max_coordinate must be at least 1")
        self.category_names: tuple[str, ...] = tuple(name.lower() for name in category_names)
        self.max_coordinate: int = int(max_coordinate)
        self.query_words: tuple[str, ...] = tuple(query_words)

        tokens: list[str] = [*SPECIAL_TOKENS, *SCHEMA_KEYWORDS, *self.category_names]
        tokens += [str(value) for value in range(self.max_coordinate + 1)]
        tokens += [word for word in self.query_words if word not in tokens]
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary tokens collide; category names must differ from keywords and coordinates")

        self.tokens: tuple[str, ...] = tuple(tokens)
        self.index: dict[str, int] = {token: idx for idx, token in enumerate(self.tokens)}
        self.pad_id: int = self.index[PAD]
        self.bos_id: int = self.index[BOS]
        self.eos_id: int = self.index[EOS]
        self.sep_id: int = self.index[SEP]
        self.category_ids: dict[int, int] = {
            self.index[name]: category for category, name in enumerate(self.category_names)
        }
        self.coordinate_ids: dict[int, int] = {
            self.index[str(value)]: value for value in range(self.max_coordinate + 1)
        }

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        ids: list[int] = []
        for word in words:
            try:
                ids.append(self.index[word])
            except KeyError:
                raise ValueError(f"Token '{word}' is not part of the vocabulary") from None
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[idx] for idx in ids if 0 <= idx < len(self.tokens)]

    def tokenize_text(self, text: str) -> list[int]:
        """
        Lower-case free text and keep the words the vocabulary knows; everything else is dropped.
        """
        return [self.index[word] for word in _WORD_PATTERN.findall(text.lower()) if word in self.index]

    def text_of(self, ids: Iterable[int]) -> str:
        """
        Space-joined text of a token sequence, without special tokens and ending at the first EOS.
        """
        words: list[str] = []
        for idx in ids:
            if idx == self.eos_id:
                break
            if 0 <= idx < len(self.tokens) and self.tokens[idx] not in SPECIAL_TOKENS:
                words.append(self.tokens[idx])
        return " ".join(words)

    def coordinate_word(self, value: float) -> str:
        return str(min(self.max_coordinate, max(0, int(round(value)))))

    def to_dict(self) -> dict[str, Any]:
        return {
            "category_names": list(self.category_names),
            "max_coordinate": self.max_coordinate,
            "query_words": list(self.query_words),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Vocab:
        return cls(data["category_names"], data["max_coordinate"], data["query_words"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocab):
            return NotImplemented
        return self.tokens == other.tokens

    def __str__(self) -> str:
        return f"Vocab of {len(self.tokens)} tokens with {len(self.category_names)} categories and coordinates 0..{self.max_coordinate}"


def bbox_words(bbox: BBox, max_coordinate: int | None = None) -> tuple[str, ...]:
    values = bbox.quantized()
    if max_coordinate is not None:
        values = tuple(min(max_coordinate, max(0, value)) for value in values)
    return tuple(str(value) for value in values)


def response_words(category_name: str, bbox: BBox, max_coordinate: int | None = None) -> tuple[str, ...]:
    """
    The canonical diagnosis: detection phrase, then the bbox, then the category.
    """
    return (
        *DETECTION_PHRASE,
        BBOX_KEYWORD,
        *bbox_words(bbox, max_coordinate),
        CATEGORY_KEYWORD,
        category_name.lower(),
    )


def hint_words(bbox: BBox, max_coordinate: int | None = None) -> tuple[str, ...]:
    """
    Query suffix that injects a localization hint: `hint bbox x1 y1 x2 y2`.
    """
    return (HINT_KEYWORD, BBOX_KEYWORD, *bbox_words(bbox, max_coordinate))


def encode_response(vocab: Vocab, category: int, bbox: BBox) -> list[int]:
    """
    Token ids of the canonical response for (category, bbox), terminated by EOS.
    """
    words = response_words(vocab.category_names[category], bbox, vocab.max_coordinate)
    return [*vocab.encode(words), vocab.eos_id]


def parse_response(vocab: Vocab, tokens: Sequence[int]) -> Response:
    """
    Total parser for the response schema. The segments may appear in any order; the first `bbox` keyword followed
    by four coordinates and the first `category` keyword followed by a category name are extracted. Anything
    malformed yields schema_valid=False, never an exception.

    :param vocab: The vocabulary the ids belong to
    :param tokens: Generated or reference token ids; reading stops at the first EOS
    """
    ids: list[int] = []
    for idx in tokens:
        idx = int(idx)
        if idx == vocab.eos_id:
            break
        ids.append(idx)

    bbox_id = vocab.index[BBOX_KEYWORD]
    category_id = vocab.index[CATEGORY_KEYWORD]
    parsed_bbox: BBox | None = None
    parsed_category: int | None = None

    for position, idx in enumerate(ids):
        if parsed_bbox is None and idx == bbox_id:
            window = ids[position + 1 : position + 5]
            if len(window) == 4 and all(value in vocab.coordinate_ids for value in window):
                x1, y1, x2, y2 = (float(vocab.coordinate_ids[value]) for value in window)
                if x1 <= x2 and y1 <= y2:
                    parsed_bbox = BBox(x1, y1, x2, y2)
        elif parsed_category is None and idx == category_id:
            if position + 1 < len(ids) and ids[position + 1] in vocab.category_ids:
                parsed_category = vocab.category_ids[ids[position + 1]]

    return Response(
        tokens=tuple(int(idx) for idx in tokens),
        parsed_category=parsed_category,
        parsed_bbox=parsed_bbox,
        schema_valid=parsed_bbox is not None and parsed_category is not None,
        text=vocab.text_of(ids),
    )


def parse_text(vocab: Vocab, text: str) -> Response:
    """
    Parse free text (for instance a backend reply) by keeping its vocabulary words.
    """
    return parse_response(vocab, vocab.tokenize_text(text))


def category_token_positions(vocab: Vocab, tokens: Sequence[int]) -> list[int]:
    """
    Positions in a response that hold a predicted category-name token, up to the first EOS.
    """
    positions: list[int] = []
    for position, idx in enumerate(tokens):
        if idx == vocab.eos_id:
            break
        if idx in vocab.category_ids:
            positions.append(position)
    return positions
