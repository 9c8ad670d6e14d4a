from __future__ import annotations

import importlib.resources
import re
from functools import cached_property
from pathlib import Path

from loguru import logger
from pydantic import BaseModel, Field, field_validator

from cot_repe.exceptions import CorruptFile, IoFailure, TokenOutOfRange

__all__ = ["BOS", "EOS", "GLUE", "UNK", "Tokenizer"]

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
# Prefix of a digit-level piece that attaches to the previous token without a space
GLUE = "##"

# Glue pieces, words (with an optional apostrophe suffix), numerals with comma groups and a
# decimal part, then any other single non-space character.
_TOKEN_PATTERN = re.compile(r"##[\d,.]|[A-Za-z]+(?:'[A-Za-z]+)?|\d+(?:,\d{3})*(?:\.\d+)?|\S")
# Numerals kept as one atom
_ATOM = re.compile(r"0|[1-9]\d{0,2}")


class Tokenizer(BaseModel):
    """
    Word-level tokenizer over a fixed lexicon.

    Text is split into words, numerals and single punctuation characters; any other word not in
    the lexicon maps to `<unk>`. Numerals 0-999 are single atoms. Longer numerals, comma-grouped or
    decimal ones fall back to digit level: the leading digit is an atom and every following
    character is a `##` glue piece, so "1,234" becomes `1 ##, ##2 ##3 ##4`. Decoding joins tokens
    with single spaces and attaches glue pieces to the token before them, so numerals regenerate
    exactly.

    Attributes:
        vocabulary (list[str]): Ordered token strings; the position of a token is its id.

    """

    vocabulary: list[str] = Field(
        default=...,
        description="Ordered token strings; the position of a token is its id.",
    )

    @field_validator("vocabulary")
    @classmethod
    def validate_vocabulary(cls, value: list[str]) -> list[str]:
        missing = [token for token in (BOS, EOS, UNK) if token not in value]
        if missing:
            raise ValueError(f"Lexicon is missing special tokens: {missing}")
        if len(set(value)) != len(value):
            raise ValueError("Lexicon holds duplicate tokens.")
        return value

    @cached_property
    def token_ids(self) -> dict[str, int]:
        return {token: idx for idx, token in enumerate(self.vocabulary)}

    @property
    def size(self) -> int:
        return len(self.vocabulary)

    @property
    def bos_id(self) -> int:
        return self.token_ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_ids[EOS]

    @property
    def unk_id(self) -> int:
        return self.token_ids[UNK]

    @classmethod
    def from_lexicon(cls, path: str | Path) -> Tokenizer:
        """
        Loads a tokenizer from a UTF-8 lexicon file holding one token per line.

        Args:
            path (str | Path): The lexicon file; line number (from zero) is the token id.

        Returns:
            Tokenizer: The loaded tokenizer.

        """
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"Could not read lexicon '{path}': {exc}") from exc
        try:
            return cls(vocabulary=text.splitlines())
        except ValueError as exc:
            raise CorruptFile(f"Invalid lexicon '{path}': {exc}") from exc

    @classmethod
    def bundled(cls) -> Tokenizer:
        """Loads the lexicon shipped with the package."""
        lexicon = importlib.resources.files("cot_repe").joinpath("data", "lexicon.txt")
        return cls(vocabulary=lexicon.read_text(encoding="utf-8").splitlines())

    @staticmethod
    def split(text: str) -> list[str]:
        """Splits text into token strings without looking anything up."""
        tokens = []
        for token in _TOKEN_PATTERN.findall(text):
            if token[0].isdigit() and not _ATOM.fullmatch(token):
                tokens.extend([token[0], *(GLUE + char for char in token[1:])])
            else:
                tokens.append(token)
        return tokens

    @staticmethod
    def join(tokens: list[str]) -> str:
        """Joins token strings with single spaces, attaching glue pieces to the token before them."""
        text = ""
        for token in tokens:
            if token.startswith(GLUE) and len(token) > len(GLUE):
                text += token[len(GLUE) :]
            else:
                text = f"{text} {token}" if text else token
        return text

    def encode(self, text: str, add_bos: bool = False) -> list[int]:
        """
        Encodes text into token ids.

        Args:
            text (str): The text to encode.
            add_bos (bool): Whether to prepend the `<bos>` id.

        Returns:
            list[int]: The token ids.

        """
        tokens = self.split(text)
        ids = [self.token_ids.get(token, self.unk_id) for token in tokens]

        unknown = sorted({token for token in tokens if token not in self.token_ids})
        if unknown:
            logger.debug(f"Mapped {len(unknown)} out-of-lexicon word(s) to {UNK}: {unknown[:5]}")

        return [self.bos_id, *ids] if add_bos else ids

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        """Looks up already-split token strings."""
        return [self.token_ids.get(token, self.unk_id) for token in tokens]

    def decode(self, ids: list[int], skip_special: bool = True) -> str:
        """
        Decodes token ids into text, see `join`.

        Args:
            ids (list[int]): The token ids.
            skip_special (bool): Whether to drop `<bos>` and `<eos>`.

        Returns:
            str: The decoded text.

        Raises:
            TokenOutOfRange: If an id is outside the vocabulary.

        """
        return self.join(self.convert_ids(ids, skip_special=skip_special))

    def convert_ids(self, ids: list[int], skip_special: bool = True) -> list[str]:
        """Maps token ids back to token strings."""
        tokens = []
        for idx in ids:
            if not 0 <= idx < self.size:
                raise TokenOutOfRange(f"Token id {idx} is outside a vocabulary of {self.size}")
            token = self.vocabulary[idx]
            if skip_special and token in (BOS, EOS):
                continue
            tokens.append(token)
        return tokens
