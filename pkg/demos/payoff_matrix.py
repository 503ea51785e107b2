"""Walkthrough: reading a payoff matrix.

Builds small attacker-by-defender matrices by hand, lists their pure Nash
equilibria and the minimum-regret cell, then plays a tiny real matrix on a
4-class toy problem.

    python3 demos/payoff_matrix.py
"""

import numpy as np

from multibackdoor import game, nn

# %% hand-made matrices of mean attacker payoff (rows: attacker, cols: defender)
for name, grid in {
    "saddle": [[0.5, 0.2], [0.4, 0.1]],
    "matching pennies": [[1.0, 0.0], [0.0, 1.0]],
    "flat": [[0.3, 0.3], [0.3, 0.3]],
}.items():
    m = game.PayoffMatrix.from_attacker_means(grid)
    cell, regret = game.min_regret_cell(m)
    print(f"{name:>17}: pure NE {game.find_pure_nash(m)}, min-regret {cell} (regret {regret:.2f})")

ev = game.expected_strategy_values([[0.5, 0.2], [0.4, 0.1]])
print("attacker strategy values", [game.format_pair(p) for p in ev["attacker"]])
print("defender strategy values", [game.format_pair(p) for p in ev["defender"]])

# %% a real 2x2 matrix on a toy problem (a few seconds)
base = game.GameConfig(
    dataset=game.DatasetSpec(num_classes=4, dims=(8, 8, 3), n=800, noise=10),
    n_attackers=3, n_max=5, v_d=0.3,
    model=game.ModelConfig(channels=(8, 8)),
    schedule=nn.TrainSchedule(lr=0.01, batch_size=32, max_epochs=6),
)
attacker = [{"strategy.algorithm": "badnet-square"}, {"strategy.algorithm": "random"}]
defender = [{"defense.kind": "none"}, {"defense.kind": "cutmix"}]
m = game.build_payoff_matrix(attacker, defender, base, replications=1)
print(np.round(m.attacker_means(), 3))
print("pure NE", game.find_pure_nash(m), "min-regret", game.min_regret_cell(m))
