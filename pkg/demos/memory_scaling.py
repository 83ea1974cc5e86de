"""
Why consolidation keeps memory constant
=======================================

The same scripted episode run two ways: consolidate carries a single
reasoning block across turns, full_append keeps the whole transcript. Peak
token usage (largest context + generation the policy ever saw) stays flat in
one and grows linearly in the other.
"""

import random

from memroll import (
    Corpus,
    Doc,
    RetrievalEnv,
    RolloutConfig,
    ScriptedPolicy,
    Task,
    peak_tokens,
    run_rollout,
)
from memroll.compose import composite_from_tasks

rng = random.Random(0)
words = "amber basalt cedar delta ember fjord garnet harbor iris juniper".split()


def soup(n):
    return " ".join(rng.choice(words) for _ in range(n))


# Fixed-size segments, so any growth in peak usage comes from the context
# policy and not from the policy writing longer summaries.
reasoning = soup(40)
corpus = Corpus([Doc(f"d{i}", "notes", soup(40)) for i in range(8)])
turn = f"<IS>{reasoning}</IS><query>{soup(5)}</query>"

print(f"{'objectives':>10} {'turns':>6} {'consolidate':>12} {'full_append':>12}")
for n in (1, 2, 4, 8, 16):
    tasks = [Task(f"q{n}-{i}", f"What pairs with {soup(3)}?", ["x"]) for i in range(n)]
    budget = 3 * n  # three turns of searching per question
    row = []
    for mode in ("consolidate", "full_append"):
        config = RolloutConfig(max_turns=budget, mode=mode)
        record = run_rollout(
            composite_from_tasks(tasks, config.preset),
            ScriptedPolicy([turn] * budget),
            RetrievalEnv(corpus, k=3),
            config,
        )
        row.append(peak_tokens(record))
    print(f"{n:>10} {budget:>6} {row[0]:>12} {row[1]:>12}")

print()
print("consolidate grows only with the question list; full_append grows with")
print("every turn that ever happened.")
