"""
Multi-objective QA over a local corpus
======================================

One composite prompt carrying two questions, answered over several turns
against a TF-IDF corpus. The policy is scripted so the walkthrough is fully
deterministic; swap in an HttpPolicy pointed at a completions endpoint to run
a real model.
"""

from memroll import (
    Corpus,
    Doc,
    PAPER_BODY,
    RetrievalEnv,
    RolloutConfig,
    ScriptedPolicy,
    Task,
    run_rollout,
    score_trajectory,
)
from memroll.compose import composite_from_tasks

# A toy knowledge base. Titles count toward retrieval scoring.
corpus = Corpus(
    [
        Doc("d1", "Rivers", "The Danube flows through Vienna and Budapest."),
        Doc("d2", "Capitals", "Vienna is the capital of Austria."),
        Doc("d3", "Capitals", "Budapest is the capital of Hungary."),
        Doc("d4", "Cheese", "Emmental cheese has large holes and a mild taste."),
    ]
)

# Two single-objective tasks become one prompt asking both questions at once.
# The answer format is "first; second".
tasks = [
    Task("q-austria", "What is the capital of Austria?", ["Vienna"]),
    Task("q-hungary", "What is the capital of Hungary?", ["Budapest"]),
]
composite = composite_from_tasks(tasks, PAPER_BODY)
print("prompt the policy sees:")
print(composite.rendered_prompt)
print()

# Each turn either issues a <query> (answered by the environment) or commits
# to an <answer>. The reasoning block before the action is the only state the
# consolidate mode carries across turns.
script = [
    "<IS>Two capitals to find. Austria first.</IS><query>capital of Austria</query>",
    "<IS>Austria is Vienna. Hungary still open.</IS><query>capital of Hungary</query>",
    "<IS>Vienna and Budapest confirmed.</IS><answer>Vienna; Budapest</answer>",
]

config = RolloutConfig(max_turns=6, mode="consolidate")
record = run_rollout(
    composite, ScriptedPolicy(script), RetrievalEnv(corpus, k=2), config
)

for turn in record.turns:
    print(f"--- turn {turn.index} ---")
    print("context the policy saw:")
    print(turn.context_snapshot)
    print("policy emitted:", turn.generation.text)
    if turn.info is not None:
        print("environment replied:", turn.info)
    print()

print("terminated:", record.terminated)
print("final answer:", record.final_answer)

# Accuracy and efficiency in one report: per-question exact match and F1,
# plus the peak context+generation size that the memory curves plot.
report = score_trajectory(record)
print(f"exact match {report.em} of {report.objective_count}, F1 {report.f1:.3f}")
print("peak tokens:", report.peak_tokens)
