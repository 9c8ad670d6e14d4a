from __future__ import annotations

import html
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from cot_repe.enum import Mark, ReportFormat
from cot_repe.exceptions import EmptyResponse, IoFailure, LayerMismatch, LengthMismatch
from cot_repe.linalg import dot
from cot_repe.reading import ReadingVectorSet

__all__ = [
    "PrefixScores",
    "SalienceReport",
    "TokenVerdict",
    "localize",
    "render_report",
    "score_prefixes",
    "write_reports",
]

_ANSI_GREEN = "\x1b[32m"
_ANSI_RED = "\x1b[1;31m"
_ANSI_RESET = "\x1b[0m"

_REPORT_SUFFIXES = {ReportFormat.PLAIN: ".tsv", ReportFormat.ANSI: ".txt", ReportFormat.HTML: ".html"}

_HTML_STYLE = """body { font-family: sans-serif; line-height: 1.8; padding: 20px; }
.prompt { color: #555555; white-space: pre-wrap; }
.tok { padding: 2px; border-radius: 3px; }
.ok { background-color: #d6ffd6; }
.reasoning_error { background-color: #ff9c9c; font-weight: bold; }"""


class PrefixSource(Protocol):
    """Anything that yields the activations of every response prefix: a live `ModelRunner` or a `DumpSource`."""

    @property
    def layers(self) -> list[int]: ...

    def prefix_activations(self, prompt: str, response_tokens: list[str], layers: Sequence[int]) -> np.ndarray: ...


class PrefixScores(BaseModel):
    """
    Threshold-shifted projections of every prefix T ⊕ y_{<=i}, i = 0..m.

    Attributes:
        layers (list[int]): Scored layers, in column order.
        delta (float): Threshold subtracted from every projection.
        layer_scores (np.ndarray): (m + 1, len(layers)) scores h_k(T_i) . R_k - delta; row 0 is the prompt alone.
        mean_scores (np.ndarray): (m + 1,) mean over layers of each row.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    layers: list[int]
    delta: float
    layer_scores: np.ndarray
    mean_scores: np.ndarray

    @property
    def response_length(self) -> int:
        return self.mean_scores.size - 1


class TokenVerdict(BaseModel):
    """One response token with its mean score and mark."""

    token: str
    score: float
    mark: Mark


class SalienceReport(BaseModel):
    """
    Token-level verdicts of one response.

    Attributes:
        prompt (str): The prompt the response was scored against.
        baseline (float): Mean score of the prompt alone.
        tokens (list[TokenVerdict]): Response tokens in order.
        delta (float): Threshold used for scoring.
        layers (list[int]): Scored layers.

    """

    prompt: str = Field(default=..., description="The prompt the response was scored against.")
    baseline: float = Field(default=..., description="Mean score of the prompt alone.")
    tokens: list[TokenVerdict] = Field(default_factory=list, description="Response tokens in order.")
    delta: float = Field(default=..., description="Threshold used for scoring.")
    layers: list[int] = Field(default_factory=list, description="Scored layers.")

    @property
    def marked(self) -> list[int]:
        """1-based positions of tokens marked as reasoning errors."""
        return [i for i, verdict in enumerate(self.tokens, start=1) if verdict.mark == Mark.REASONING_ERROR]


def score_prefixes(
    source: PrefixSource,
    prompt: str,
    response_tokens: Sequence[str],
    readers: ReadingVectorSet,
    delta: float,
) -> PrefixScores:
    """
    Scores every response prefix from one pass over prompt and response.

    Args:
        source (PrefixSource): Live model runner, or a dump holding prefix records.
        prompt (str): The prompt T.
        response_tokens (Sequence[str]): Response tokens y_1..y_m.
        readers (ReadingVectorSet): Reading vectors; their layers are the scored layers.
        delta (float): Threshold subtracted from every projection.

    Returns:
        PrefixScores: Per-layer and mean scores for i = 0..m.

    Raises:
        EmptyResponse: If the response holds no tokens.
        LayerMismatch: If the readers cover layers the source does not provide.

    """
    if not response_tokens:
        raise EmptyResponse

    layers = readers.layers
    missing = sorted(set(layers) - set(source.layers))
    if missing:
        raise LayerMismatch(f"Readers cover layers {missing} the model does not have")

    activations = source.prefix_activations(prompt, list(response_tokens), layers)
    if activations.shape[2] != readers.hidden_dim:
        raise LayerMismatch(f"Activations have width {activations.shape[2]}, readers {readers.hidden_dim}")

    layer_scores = np.array(
        [[dot(row[j], readers.vectors[k]) - delta for j, k in enumerate(layers)] for row in activations]
    )
    mean_scores = np.array([math.fsum(row) / len(layers) for row in layer_scores.tolist()])
    return PrefixScores(layers=layers, delta=delta, layer_scores=layer_scores, mean_scores=mean_scores)


def localize(scores: PrefixScores, response_tokens: Sequence[str], prompt: str = "") -> SalienceReport:
    """
    Marks each token whose prefix score crosses from non-negative to negative.

    Token i is marked iff scores(T_i) < 0 and scores(T_{i-1}) >= 0, with the prompt-only score as
    the predecessor of the first token. Each maximal run of negative scores therefore yields at
    most one mark, at its first token.

    Raises:
        LengthMismatch: If the scores do not cover exactly one prompt row plus one row per token.

    """
    if scores.response_length != len(response_tokens):
        raise LengthMismatch(f"{scores.mean_scores.size} score rows for {len(response_tokens)} tokens")

    means = scores.mean_scores.tolist()
    verdicts = []
    for i, token in enumerate(response_tokens, start=1):
        crossed = means[i] < 0 <= means[i - 1]
        verdicts.append(TokenVerdict(token=token, score=means[i], mark=Mark.REASONING_ERROR if crossed else Mark.OK))

    report = SalienceReport(prompt=prompt, baseline=means[0], tokens=verdicts, delta=scores.delta, layers=scores.layers)
    if report.marked:
        logger.info(f"Marked {len(report.marked)} token(s) as reasoning errors at positions {report.marked}")
    return report


def _render_plain(report: SalienceReport) -> str:
    lines = ["token\tscore\tmark"]
    lines += [f"{verdict.token}\t{verdict.score:.6f}\t{verdict.mark}" for verdict in report.tokens]
    return "\n".join(lines) + "\n"


def _render_ansi(report: SalienceReport) -> str:
    pieces = []
    for verdict in report.tokens:
        color = _ANSI_RED if verdict.mark == Mark.REASONING_ERROR else _ANSI_GREEN
        pieces.append(f"{color}{verdict.token}{_ANSI_RESET}({verdict.score:+.2f})")
    header = f"delta={report.delta:g} layers={','.join(map(str, report.layers))} baseline={report.baseline:+.2f}"
    return header + "\n" + " ".join(pieces) + "\n"


def _render_html(report: SalienceReport) -> str:
    spans = [
        f'<span class="tok {verdict.mark}" title="{verdict.score:+.4f}">{html.escape(verdict.token)}</span>'
        for verdict in report.tokens
    ]
    layers = ", ".join(map(str, report.layers))
    return "\n".join([
        "<!DOCTYPE html>",
        "<html>",
        '<head><meta charset="utf-8"><title>Reasoning error localization</title>',
        f"<style>\n{_HTML_STYLE}\n</style></head>",
        "<body>",
        f'<p class="meta">delta = {report.delta:g}; layers = {layers}; baseline = {report.baseline:+.4f}</p>',
        f'<div class="prompt">{html.escape(report.prompt)}</div>',
        '<div class="response">',
        *spans,
        "</div>",
        "</body>",
        "</html>",
        "",
    ])


def render_report(report: SalienceReport, report_format: ReportFormat) -> str:
    """
    Renders a salience report.

    Args:
        report (SalienceReport): The report.
        report_format (ReportFormat): `plain` (TSV with a header row), `ansi` (green tokens, marked
            tokens in bold red, each followed by its score) or `html` (static page with one span per
            token, marked spans in red, scores as tooltips).

    Returns:
        str: The rendered text; a pure function of the report.

    """
    renderers = {ReportFormat.PLAIN: _render_plain, ReportFormat.ANSI: _render_ansi, ReportFormat.HTML: _render_html}
    return renderers[ReportFormat(report_format)](report)


def write_reports(report: SalienceReport, stem: str | Path, formats: Sequence[ReportFormat]) -> list[Path]:
    """Writes one file per format next to `stem` (`.tsv`, `.txt`, `.html`) and returns the paths."""
    stem = Path(stem)
    paths = []
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        for report_format in formats:
            path = stem.with_suffix(_REPORT_SUFFIXES[ReportFormat(report_format)])
            path.write_text(render_report(report, report_format), encoding="utf-8")
            paths.append(path)
    except OSError as exc:
        raise IoFailure(f"Could not write reports under '{stem.parent}': {exc}") from exc
    return paths
