from __future__ import annotations

from collections.abc import Mapping, Sequence

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from cot_repe.config import RunConfig
from cot_repe.control import SteeredGeneration, SteeringPolicy, steered_generate
from cot_repe.enum import StimulusKind
from cot_repe.evaluation import BenchmarkResult, ToyTextGenerator, parse_condition, run_benchmark
from cot_repe.localization import PrefixSource, SalienceReport, localize, score_prefixes
from cot_repe.populations import ActivationSource, LayerSelection, PopulationSet, capture_population, resolve_layers
from cot_repe.reading import ReadingVectorSet, extract_reading_vectors
from cot_repe.runner import ModelRunner, open_runner
from cot_repe.stimuli import StimulusSet, build_stimulus_set, bundled_stimuli, get_template, select_queries
from cot_repe.tasks import Task, load_task

__all__ = ["Pipeline"]


class Pipeline(BaseModel):
    """
    One configured run of the toolkit: a model, a task, and the settings that connect them.

    Attributes:
        config (RunConfig): Run settings.
        runner (ModelRunner): Model and tokenizer.
        task (Task): Task the stimuli and benchmark draw from.

    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: RunConfig = Field(default=..., description="Run settings.")
    runner: ModelRunner = Field(default=..., description="Model and tokenizer.")
    task: Task = Field(default=..., description="Task the stimuli and benchmark draw from.")

    @classmethod
    def from_config(cls, config: RunConfig) -> Pipeline:
        """Opens the configured model and loads the configured task."""
        runner = open_runner(config)
        task = load_task(config.task, seed=config.seed, size=config.task_size, kind=config.task_kind)
        return cls(config=config, runner=runner, task=task)

    @property
    def layers(self) -> LayerSelection:
        return resolve_layers(self.config.layers, self.runner.model.depth)

    def _template_for(self, kind: StimulusKind) -> str:
        if self.config.template is not None and get_template(self.config.template).kind == kind:
            return self.config.template
        return kind.value

    def stimulus_set(self, kind: StimulusKind | None = None, stimulus_index: int | None = None) -> StimulusSet:
        """
        Renders the contrastive corpus for the configured N, M and selection strategy.

        The M stimuli start at `stimulus_index` and wrap around the bundled variants, so readers fit
        with M = 1 see exactly the chosen instruction or demonstration order.

        """
        kind = StimulusKind(kind or self.config.stimuli)
        index = self.config.stimulus_index if stimulus_index is None else stimulus_index

        stimuli = bundled_stimuli(kind, self.task, self.config.seed)
        index %= len(stimuli)
        stimuli = stimuli[index:] + stimuli[:index]

        queries = select_queries(
            self.task,
            self.config.n_samples,
            self.config.select,
            seed=self.config.seed_for("selection"),
            perplexity=self.runner.perplexity_of,
        )
        return build_stimulus_set(queries, stimuli, self.config.m, self._template_for(kind))

    def population(
        self,
        kind: StimulusKind | None = None,
        stimulus_index: int | None = None,
        source: ActivationSource | None = None,
    ) -> PopulationSet:
        """Captures the neural populations of the configured layers from the runner, or from a dump."""
        return capture_population(
            source or self.runner,
            self.stimulus_set(kind, stimulus_index),
            self.layers,
            workers=self.config.workers,
        )

    def read(
        self,
        kind: StimulusKind | None = None,
        stimulus_index: int | None = None,
        source: ActivationSource | None = None,
    ) -> ReadingVectorSet:
        """Fits reading vectors on the configured stimulus variant."""
        kind = StimulusKind(kind or self.config.stimuli)
        index = self.config.stimulus_index if stimulus_index is None else stimulus_index
        label = f"{'Z' if kind == StimulusKind.ZERO_SHOT else 'F'}{index + 1}"
        return extract_reading_vectors(
            self.population(kind, index, source),
            center=self.config.center,
            orientation=self.config.orientation,
            workers=self.config.workers,
            stimulus_label=label,
        )

    def policy(self, readers: ReadingVectorSet, alpha: float | None = None) -> SteeringPolicy:
        """Steering policy with the task's alpha and the configured sign rule."""
        alpha = self.config.alpha_for(self.task.name) if alpha is None else alpha
        return SteeringPolicy(readers=readers, alpha=alpha, sign=self.config.sign)

    def localize(
        self,
        readers: ReadingVectorSet,
        prompt: str,
        response: str | Sequence[str] | None = None,
        source: PrefixSource | None = None,
    ) -> SalienceReport:
        """
        Scores a response token by token and marks reasoning errors.

        When the response is omitted, the model first generates one without steering. Prefix
        activations come from the runner unless a dump source is given.

        """
        if response is None:
            result = self.runner.generate(prompt, self.config.max_new_tokens)
            tokens = self.runner.tokenizer.convert_ids(result.tokens)
            logger.info(f"Generated a {len(tokens)}-token response to localize")
        elif isinstance(response, str):
            tokens = self.runner.tokenizer.split(response)
        else:
            tokens = list(response)

        scores = score_prefixes(source or self.runner, prompt, tokens, readers, self.config.delta)
        return localize(scores, tokens, prompt=prompt)

    def steer(self, readers: ReadingVectorSet, prompt: str, alpha: float | None = None) -> SteeredGeneration:
        return steered_generate(self.runner, prompt, self.policy(readers, alpha), self.config.max_new_tokens)

    def evaluate(
        self,
        conditions: Sequence[str] | None = None,
        readers: Mapping[str, ReadingVectorSet] | None = None,
    ) -> BenchmarkResult:
        """
        Runs the benchmark.

        Each steered condition uses the readers given for it, or readers fit on that condition's
        own instruction or demonstration order.

        """
        parsed = [parse_condition(name) for name in (conditions or self.config.conditions)]
        readers = dict(readers or {})
        policies = {}
        for condition in parsed:
            if not condition.steered:
                continue
            if condition.name not in readers:
                logger.info(f"[{condition.name}] Fitting reading vectors on {condition.stimulus_kind} variant {condition.variant}")
                readers[condition.name] = self.read(condition.stimulus_kind, condition.variant - 1)
            policies[condition.name] = self.policy(readers[condition.name])

        return run_benchmark(
            self.task.head(self.config.eval_limit),
            ToyTextGenerator(self.runner),
            parsed,
            policies=policies,
            kind=self.task.kind,
            max_new_tokens=self.config.max_new_tokens,
            answer_max_tokens=self.config.answer_max_tokens,
            seed=self.config.seed,
            workers=self.config.workers,
        )
