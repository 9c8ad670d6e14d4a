import re
from enum import StrEnum


class StrEnumCaseInsensitive(StrEnum):
    """
    A case-, space-, hyphen-, and underscore-insensitive string enumeration.

    Subclasses may declare `__aliases__`, a mapping of alternate spellings (e.g., short CLI
    flags) to member values.

    """

    @staticmethod
    def _process_value(value: str) -> str:
        return re.sub(r"–|-|_|\s", "", value.lower())  # noqa: RUF001

    @classmethod
    def _missing_(cls, value: object):
        if not isinstance(value, str):
            return None
        lower_value = cls._process_value(value)
        aliases = getattr(cls, "__aliases__", {})
        for alias, target in aliases.items():
            if cls._process_value(alias) == lower_value:
                return cls(target)
        for member in cls:
            if cls._process_value(member.value) == lower_value:
                return member
        return None


class StimulusKind(StrEnumCaseInsensitive):
    """Enumerator for the two forms of chain-of-thought stimuli."""

    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"

    __aliases__ = {"zero": "zero_shot", "few": "few_shot"}


class Polarity(StrEnumCaseInsensitive):
    """Enumerator for the polarity of a rendered prompt."""

    POSITIVE = "+"
    NEGATIVE = "-"
    NONE = "."

    __aliases__ = {"positive": "+", "negative": "-", "none": "."}


class SelectionStrategy(StrEnumCaseInsensitive):
    """Enumerator for strategies used to select the source queries of a stimulus set."""

    RANDOM = "random"
    LOW_PERPLEXITY = "low_perplexity"
    HIGH_PERPLEXITY = "high_perplexity"

    __aliases__ = {"low-ppl": "low_perplexity", "high-ppl": "high_perplexity"}


class FinalNorm(StrEnumCaseInsensitive):
    """Enumerator for the normalization applied before the unembedding."""

    STANDARD = "standard"
    IDENTITY = "identity"


class HookSignMode(StrEnumCaseInsensitive):
    """Enumerator for how an injection hook resolves the sign of its scale."""

    FOLLOW_PROJECTION = "follow_projection"
    FIXED = "fixed"


class SteeringSign(StrEnumCaseInsensitive):
    """
    Enumerator for the sign rule of a steering policy.

    Attributes:
        FOLLOW_PROJECTION: The sign of each layer's scale follows the prompt's projection onto that layer's reading vector.
        POSITIVE: Every layer is steered with +|alpha|.
        NEGATIVE: Every layer is steered with -|alpha|.

    """

    FOLLOW_PROJECTION = "proj"
    POSITIVE = "pos"
    NEGATIVE = "neg"

    __aliases__ = {"follow_projection": "proj", "positive": "pos", "negative": "neg"}


class OrientationRule(StrEnumCaseInsensitive):
    """Enumerator for the read-time sign orientation of reading vectors."""

    MEAN_PROJECTION = "mean_projection"
    PAIR_ALIGNMENT = "pair_alignment"


class TaskKind(StrEnumCaseInsensitive):
    """Enumerator for answer formats, each with its own extraction rule."""

    YES_NO = "yes_no"
    MULTIPLE_CHOICE = "multiple_choice"
    NUMBER = "number"
    LETTERS = "letters"


class Mark(StrEnumCaseInsensitive):
    """Enumerator for the per-token verdict of a salience report."""

    OK = "ok"
    REASONING_ERROR = "reasoning_error"


class ReportFormat(StrEnumCaseInsensitive):
    """Enumerator for salience report renderings."""

    PLAIN = "plain"
    ANSI = "ansi"
    HTML = "html"

    __aliases__ = {"tsv": "plain", "txt": "ansi"}


class ConditionFamily(StrEnumCaseInsensitive):
    """Enumerator for benchmark condition families."""

    BASE = "base"
    COT_ZERO = "cot_z"
    ROT_ZERO = "rot_z"
    COT_FEW = "cot_f"
    ROT_FEW = "rot_f"
