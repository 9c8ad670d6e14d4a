from pathlib import Path

from parsimonious.grammar import Grammar as ParsimoniousGrammar

_BASE_RULES = r"""
# Keywords
last_keyword = ~r"last"i

# Numbers
count = digit+
index = digit+
digit = ~r"[0-9]"

# Delimiters
colon = ":"
comma = ","
dash = "-"
lparen = "("
rparen = ")"
ws = ~r"\s*"
"""


class Grammar(ParsimoniousGrammar):
    """Subclass of `parsimonious.Grammar` which takes a file path to a PEG grammar file
    as its input and appends the shared number and delimiter rules."""

    def __init__(self, rules: Path) -> None:
        with open(rules) as f:
            rules_content = f.read()
            rules_content += _BASE_RULES

        super().__init__(rules_content)
