"""Offline rejection-sampling fine-tuning.

Sample completions from the current model, keep the ones an exact
verifier accepts, retrain on the survivors. With the plain cross-entropy
objective this is the classic RFT baseline; with the token-scaled
dynamic loss it is the offline-reward variant.

Per-prompt sampling streams are derived from (seed, prompt index, draw
index), so the retained set does not depend on batching or evaluation
order. A sampled completion that never emits EOS counts as unverified:
response token lists must terminate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import EOS_ID, Model, sample_batch
from .seeding import derive_seed
from .tasks import Demonstration, vocabulary_for
from .training import RunConfig, train_run


@dataclass
class RftConfig:
    n_responses_per_prompt: int = 4
    temperature: float = 1.0
    max_new_tokens: int = 48
    prompt_count: int = 0  # 0 means all prompts
    dedupe: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_responses_per_prompt < 1:
            raise ValueError("n_responses_per_prompt must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_responses_per_prompt": self.n_responses_per_prompt,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "prompt_count": self.prompt_count,
            "dedupe": self.dedupe,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RftConfig":
        return cls(**d)


@dataclass
class FilterStats:
    n_prompts: int
    n_samples: int
    n_verified: int
    n_retained: int
    keep_rate: float
    per_prompt_kept: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_prompts": self.n_prompts,
            "n_samples": self.n_samples,
            "n_verified": self.n_verified,
            "n_retained": self.n_retained,
            "keep_rate": self.keep_rate,
            "per_prompt_kept": self.per_prompt_kept,
        }


def sample_and_filter(model: Model, prompts, verify_fn,
                      config: RftConfig) -> tuple:
    """Draw n completions per prompt and keep the verified ones.

    ``prompts`` are Demonstration-like items providing prompt text, task
    tag and difficulty (their reference responses are ignored). Returns
    (retained Demonstrations, FilterStats); keep_rate counts verified
    completions before deduplication.
    """
    if not prompts:
        raise ValueError("prompts must be non-empty")
    if config.prompt_count:
        prompts = prompts[: config.prompt_count]
    n = config.n_responses_per_prompt
    flat_prompts = []
    flat_seeds = []
    for i, item in enumerate(prompts):
        ids = item.prompt_ids
        for j in range(n):
            flat_prompts.append(ids)
            flat_seeds.append(derive_seed(config.seed, "rft", i, j))
    completions = sample_batch(
        model, flat_prompts, config.max_new_tokens, config.temperature, flat_seeds
    )

    retained = []
    seen = set()
    per_prompt = [0] * len(prompts)
    n_verified = 0
    for idx, completion in enumerate(completions):
        i = idx // n
        item = prompts[i]
        if EOS_ID not in completion:
            continue  # unterminated: never a valid response
        if not verify_fn(item.task, item.prompt_ids, completion):
            continue
        n_verified += 1
        per_prompt[i] += 1
        text = vocabulary_for(item.task).detokenize(
            completion[: completion.index(EOS_ID)]
        )
        key = (item.prompt, text)
        if config.dedupe and key in seen:
            continue
        seen.add(key)
        retained.append(Demonstration(
            prompt=item.prompt, response=text,
            task=item.task, difficulty=item.difficulty,
        ))
    stats = FilterStats(
        n_prompts=len(prompts),
        n_samples=len(completions),
        n_verified=n_verified,
        n_retained=len(retained),
        keep_rate=n_verified / len(completions),
        per_prompt_kept=per_prompt,
    )
    return retained, stats


def rft_train(base_model: Model, filtered_data, loss_spec,
              run_config: RunConfig, eval_hooks=()) -> Model:
    """Continue training the base model on verified self-samples."""
    if not filtered_data:
        raise ValueError(
            "filtered dataset is empty; raise n_responses_per_prompt, "
            "sample more prompts, or warm the model further before sampling"
        )
    cfg_dict = run_config.to_dict()
    cfg_dict["loss"] = loss_spec.to_dict()
    config = RunConfig.from_dict(cfg_dict)
    model, _ = train_run(config, filtered_data, eval_hooks=eval_hooks,
                         initial_model=base_model)
    return model
