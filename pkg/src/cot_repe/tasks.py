from __future__ import annotations

import importlib.resources
import re
from functools import cache
from pathlib import Path

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from cot_repe.config import derive_seed
from cot_repe.enum import TaskKind
from cot_repe.exceptions import IoFailure, TaskFileInvalid

__all__ = [
    "BUNDLED_TASKS",
    "Demonstration",
    "Task",
    "TaskItem",
    "bundled_demonstrations",
    "generate_task",
    "infer_task_kind",
    "load_task",
    "write_task",
]

# Bundled task name -> (answer format, exemplar fixture used for its few-shot demonstrations)
BUNDLED_TASKS: dict[str, tuple[TaskKind, str]] = {
    "coin-parity": (TaskKind.YES_NO, "coin_flip"),
    "letter-pick": (TaskKind.LETTERS, "letter_concat"),
    "add-small": (TaskKind.NUMBER, "arithmetic"),
}

_NUMBER = re.compile(r"-?\d[\d,]*(?:\.\d+)?")


class Demonstration(BaseModel):
    """A worked chain-of-thought exemplar."""

    q: str = Field(default=..., min_length=1, description="Exemplar question.")
    a: str = Field(default=..., min_length=1, description="Exemplar rationale ending in the answer.")


class TaskItem(BaseModel):
    """
    One query of a task file.

    Attributes:
        id (str): Unique query id.
        question (str): The question text.
        answer (str): Gold answer.
        demonstrations (list[Demonstration] | None): Per-item few-shot exemplars, overriding the task's own.

    """

    id: str = Field(default=..., min_length=1, description="Unique query id.")
    question: str = Field(default=..., min_length=1, description="The question text.")
    answer: str = Field(default=..., description="Gold answer.")
    demonstrations: list[Demonstration] | None = Field(default=None, description="Per-item few-shot exemplars.")


class Task(BaseModel):
    """
    A named list of queries sharing one answer format.

    Attributes:
        name (str): Task name (bundled name, or the file stem).
        kind (TaskKind): Answer format.
        items (list[TaskItem]): Queries, in file order.
        demonstrations (list[Demonstration]): Default few-shot exemplars for the task.

    """

    name: str = Field(default=..., description="Task name (bundled name, or the file stem).")
    kind: TaskKind = Field(default=..., description="Answer format.")
    items: list[TaskItem] = Field(default_factory=list, description="Queries, in file order.")
    demonstrations: list[Demonstration] = Field(default_factory=list, description="Default few-shot exemplars.")

    def __len__(self) -> int:
        return len(self.items)

    def head(self, limit: int | None) -> Task:
        """Returns a copy of the task holding only its first `limit` items."""
        if limit is None or limit >= len(self.items):
            return self
        return self.model_copy(update={"items": self.items[:limit]})


@cache
def _vocabulary() -> dict:
    return yaml.safe_load(importlib.resources.files("cot_repe").joinpath("data", "tasks", "vocab.yaml").read_text())


@cache
def bundled_demonstrations(fixture: str) -> tuple[Demonstration, ...]:
    """
    Loads a bundled exemplar fixture (e.g. `coin_flip`, `csqa`) in its published order.

    Raises:
        TaskFileInvalid: If no fixture of that name is bundled.

    """
    resource = importlib.resources.files("cot_repe").joinpath("data", "demonstrations", f"{fixture}.yaml")
    if not resource.is_file():
        raise TaskFileInvalid(f"No bundled demonstrations named '{fixture}'")
    return tuple(Demonstration.model_validate(record) for record in yaml.safe_load(resource.read_text()))


def _coin_parity(rng: np.random.Generator, idx: int) -> TaskItem:
    vocab = _vocabulary()
    template = vocab["questions"]["coin-parity"]
    names = rng.choice(vocab["names"], size=2, replace=False)
    flips = rng.integers(0, 2, size=2)

    sentences = [template["opening"]]
    for name, flipped in zip(names, flips, strict=True):
        sentences.append(template["flip" if flipped else "no_flip"].format(name=name))
    sentences.append(template["closing"])

    answer = "yes" if int(flips.sum()) % 2 == 0 else "no"
    return TaskItem(id=f"coin-parity-{idx:04d}", question=" ".join(sentences), answer=answer)


def _letter_pick(rng: np.random.Generator, idx: int) -> TaskItem:
    vocab = _vocabulary()
    position = int(rng.integers(0, len(vocab["ordinals"])))
    pool = [name for name in vocab["names"] if len(name) > position]
    words = list(rng.choice(pool, size=int(rng.integers(2, 4)), replace=False))

    question = vocab["questions"]["letter-pick"].format(ordinal=vocab["ordinals"][position], words=" ".join(words))
    answer = "".join(word[position] for word in words)
    return TaskItem(id=f"letter-pick-{idx:04d}", question=question, answer=answer)


def _add_small(rng: np.random.Generator, idx: int) -> TaskItem:
    vocab = _vocabulary()
    name = str(rng.choice(vocab["names"]))
    noun = str(rng.choice(vocab["objects"]))
    a, b = (int(value) for value in rng.integers(1, 50, size=2))

    question = vocab["questions"]["add-small"].format(name=name, noun=noun, a=a, b=b)
    return TaskItem(id=f"add-small-{idx:04d}", question=question, answer=str(a + b))


_GENERATORS = {"coin-parity": _coin_parity, "letter-pick": _letter_pick, "add-small": _add_small}


def generate_task(name: str, seed: int, size: int) -> Task:
    """
    Generates a bundled toy task.

    Args:
        name (str): One of `coin-parity`, `letter-pick`, `add-small`.
        seed (int): Root seed; the task draws from `derive_seed(seed, "task:<name>")`.
        size (int): Number of items.

    Returns:
        Task: The generated task, with the matching exemplar fixture as its demonstrations.

    """
    if name not in _GENERATORS:
        raise TaskFileInvalid(f"Unknown bundled task '{name}'; expected one of {sorted(_GENERATORS)}")

    rng = np.random.default_rng(derive_seed(seed, f"task:{name}"))
    kind, fixture = BUNDLED_TASKS[name]
    items = [_GENERATORS[name](rng, idx) for idx in range(size)]
    return Task(name=name, kind=kind, items=items, demonstrations=list(bundled_demonstrations(fixture)))


def infer_task_kind(items: list[TaskItem]) -> TaskKind:
    """
    Infers the answer format from gold answers.

    Yes/no answers give `yes_no`; single letters a-e give `multiple_choice`; numerals give
    `number`; anything else gives `letters`.

    """
    answers = [item.answer.strip().lower() for item in items]
    if answers and all(answer in ("yes", "no") for answer in answers):
        return TaskKind.YES_NO
    if answers and all(re.fullmatch(r"\(?[a-e]\)?", answer) for answer in answers):
        return TaskKind.MULTIPLE_CHOICE
    if answers and all(_NUMBER.fullmatch(answer) for answer in answers):
        return TaskKind.NUMBER
    return TaskKind.LETTERS


def _read_task_file(path: Path, kind: TaskKind | None) -> Task:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"Could not read task file '{path}': {exc}") from exc

    items: list[TaskItem] = []
    seen: set[str] = set()
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            item = TaskItem.model_validate_json(line)
        except ValidationError as exc:
            raise TaskFileInvalid(f"[{path.name}:{line_number}] {exc.errors()[0]['msg']}") from exc
        if item.id in seen:
            raise TaskFileInvalid(f"[{path.name}:{line_number}] Duplicate query id '{item.id}'")
        seen.add(item.id)
        items.append(item)

    if not items:
        raise TaskFileInvalid(f"Task file '{path}' holds no records")

    kind = kind or infer_task_kind(items)
    return Task(name=path.stem, kind=kind, items=items)


def load_task(source: str | Path, seed: int = 0, size: int = 256, kind: TaskKind | None = None) -> Task:
    """
    Loads a JSON-lines task file, or generates a bundled toy task by name.

    Args:
        source (str | Path): Path to a task file, or a bundled name (`coin-parity`, `letter-pick`, `add-small`).
        seed (int): Root seed for bundled tasks.
        size (int): Number of items for bundled tasks.
        kind (TaskKind | None): Answer format; inferred from the answers of a file when omitted.

    Returns:
        Task: The loaded task.

    Raises:
        TaskFileInvalid: On malformed records or duplicate ids.
        IoFailure: If the file cannot be read.

    """
    if str(source) in _GENERATORS and not Path(source).exists():
        task = generate_task(str(source), seed, size)
        if kind is not None:
            task = task.model_copy(update={"kind": kind})
    else:
        task = _read_task_file(Path(source), kind)

    logger.info(f"Loaded task '{task.name}' ({task.kind}) with {len(task)} item(s)")
    return task


def write_task(task: Task, path: str | Path) -> None:
    """Writes a task as JSON lines, one record per item."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for item in task.items:
                f.write(item.model_dump_json(exclude_none=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"Could not write task file '{path}': {exc}") from exc
    logger.info(f"Wrote {len(task)} item(s) of '{task.name}' to '{path}'")
