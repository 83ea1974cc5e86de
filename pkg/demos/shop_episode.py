"""
A shopping episode, action by action
====================================

The built-in web-shop simulator speaks a two-verb grammar: search[keywords]
and click[target]. Requirements are parsed out of the instruction text, and
buying scores the chosen product against them. This walkthrough drives the
simulator directly; ShopEnv wraps the same thing behind the rollout loop.
"""

from memroll import Product, ShopGoal, ShopSim

catalog = [
    Product("B001", "Red Wireless Optical Mouse", ("red", "wireless", "mouse", "small"), 18.99),
    Product("B002", "Blue Ergonomic Mouse", ("blue", "wireless", "mouse", "large"), 34.50),
    Product("B003", "Red Wired Gaming Mouse", ("red", "wired", "mouse", "large"), 22.00),
    Product("B004", "Mechanical Keyboard", ("black", "keyboard", "full"), 59.99),
]

instruction = "i need a red wireless mouse lower than $25"
goal = ShopGoal.from_text(instruction, catalog)
print("instruction:", instruction)
print("parsed requirements:", goal.attributes, "| price cap:", goal.price_cap)
print("requirements to satisfy:", goal.total_requirements)
print()

# The simulator is functional: step() maps (state, action) to a new state and
# an observation, so episodes are trivially replayable.
sim = ShopSim(catalog, goal)
state = sim.initial_state()
actions = [
    "search[wireless mouse]",
    "click[B001]",
    "click[features]",  # product page panel
    "click[Buy Now]",
]
obs = None
for action in actions:
    state, obs = sim.step(state, action)
    print(f"> {action}")
    print(obs.text)
    print()

# 4 requirements (red, wireless, mouse, under $25), all matched by B001.
print("episode done:", state.done, "| reward:", obs.reward)
