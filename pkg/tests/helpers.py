"""Shared builders for the test suite: word soup, tasks, and scripted episodes.

The episode generator drives the whole mask/metrics test surface, so it
deliberately covers the awkward cases: omitted IS blocks, empty inner text,
turn-limit and invalid endings, both context modes, and both tag presets.
"""

from __future__ import annotations

import random

from memroll import (
    CompositeTask,
    PAPER_BODY,
    RolloutConfig,
    ScriptedEnv,
    ScriptedPolicy,
    Task,
    TagPreset,
    TrajectoryRecord,
    run_rollout,
)
from memroll.compose import composite_from_tasks

WORDS = (
    "amber basalt cedar delta ember fjord garnet harbor iris juniper "
    "kelp lotus marble nectar onyx prairie quartz reef saffron tundra "
    "umber violet willow xenon yarrow zephyr copper dune ewer flint"
).split()


def word_soup(rng: random.Random, n_words: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n_words))


def make_tasks(rng: random.Random, n: int, env_kind: str = "retrieval_qa") -> list[Task]:
    tasks = []
    for i in range(n):
        subject = word_soup(rng, rng.randint(2, 5))
        tasks.append(
            Task(
                id=f"t{i}-{rng.randrange(10**6)}",
                question=f"What pairs with {subject}?",
                gold_answers=[[rng.choice(WORDS)]],
                env_kind=env_kind,
            )
        )
    return tasks


def make_composite(rng: random.Random, n: int = 1, preset: TagPreset = PAPER_BODY) -> CompositeTask:
    return composite_from_tasks(make_tasks(rng, n), preset)


def query_turn(rng: random.Random, preset: TagPreset, *, omit_is: bool = False) -> str:
    is_block = "" if omit_is else (
        f"{preset.is_open}{word_soup(rng, rng.randint(0, 12))}{preset.is_close}"
    )
    return f"{is_block}{preset.query_open}{word_soup(rng, rng.randint(1, 6))}{preset.query_close}"


def answer_turn(rng: random.Random, preset: TagPreset, answer: str | None = None) -> str:
    text = answer if answer is not None else word_soup(rng, rng.randint(1, 4))
    return (
        f"{preset.is_open}{word_soup(rng, rng.randint(0, 10))}{preset.is_close}"
        f"{preset.answer_open}{text}{preset.answer_close}"
    )


def scripted_episode(
    rng: random.Random,
    *,
    mode: str = "consolidate",
    turns: int = 3,
    ending: str = "answer",  # answer | turn_limit | invalid
    preset_name: str = "paper_body",
    hint: bool = True,
    objective_count: int = 1,
) -> TrajectoryRecord:
    """Run one fully scripted episode and return its record.

    turns counts the turns that actually execute. For ending="answer" the last
    scripted turn answers; for "turn_limit" every turn queries and max_turns ==
    turns; for "invalid" the final turn is malformed.
    """
    config = RolloutConfig(
        max_turns=turns if ending == "turn_limit" else max(turns, rng.randint(turns, turns + 3)),
        mode=mode,
        tag_preset=preset_name,
        hint_enabled=hint,
    )
    preset = config.preset
    task = make_composite(rng, objective_count, preset)

    script = [query_turn(rng, preset, omit_is=rng.random() < 0.25) for _ in range(turns - 1)]
    if ending == "answer":
        script.append(answer_turn(rng, preset))
    elif ending == "turn_limit":
        script.append(query_turn(rng, preset))
    elif ending == "invalid":
        script.append(f"{preset.is_open}{word_soup(rng, 4)}{preset.is_close} stray text, no action")
    else:
        raise ValueError(f"unknown ending {ending!r}")

    env = ScriptedEnv([word_soup(rng, rng.randint(3, 20)) for _ in range(max(turns, 1))])
    record = run_rollout(task, ScriptedPolicy(script), env, config)
    assert len(record.turns) == turns, (ending, len(record.turns), turns)
    return record


def scrub_times(data):
    """Drop wall-clock measurements so runs can be compared for determinism."""
    if isinstance(data, dict):
        return {
            k: scrub_times(v)
            for k, v in data.items()
            if k not in ("wall_time_s", "latency_s")
        }
    if isinstance(data, list):
        return [scrub_times(v) for v in data]
    return data


def random_episode(rng: random.Random) -> TrajectoryRecord:
    """An episode with everything randomized; the acceptance workhorse."""
    ending = rng.choice(["answer", "answer", "answer", "turn_limit", "invalid"])
    return scripted_episode(
        rng,
        mode=rng.choice(["consolidate", "full_append"]),
        turns=rng.randint(1, 20),
        ending=ending,
        preset_name=rng.choice(["paper_body", "prompt_style"]),
        hint=rng.random() < 0.9,
        objective_count=rng.choice([1, 1, 2, 3]),
    )
