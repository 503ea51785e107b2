"""Walkthrough: more attackers, weaker backdoors.

Plays the desk-scale game for a growing number of independent attackers and
prints the mean attack success rate (ASR) next to clean accuracy. One
replication per N keeps it to a couple of minutes on one CPU; the e1 preset
runs three.

    python3 demos/backfiring.py
"""

import numpy as np

from multibackdoor import experiments, game

cfg = experiments.validate_config(experiments.PRESETS["e1"]).game_config()

# %% one game, inspected closely
one = game.play_game(game.apply_overrides(cfg, {"n_attackers": 1}), seed=3407, keep_allocation=True)
rec = one.attackers[0]
print(f"N=1: rho={rec.rho:.4f}, {rec.budget} poisoned rows of {len(one.pool)}, target {rec.target_label}")
print(f"     ASR {rec.metrics.acc_poison_triggered:.3f}, clean {rec.metrics.acc_clean_untriggered:.3f}")

# %% the sweep
print(f"{'N':>3} {'ASR mean':>9} {'ASR std':>8} {'clean':>6} {'max target share':>17}")
for n in (1, 5, 15, 50):
    res = game.play_game(game.apply_overrides(cfg, {"n_attackers": n}), seed=3407)
    clean = np.mean([a.metrics.acc_clean_untriggered for a in res.attackers])
    # ASR floor once the triggers stop working: the most common target label
    share = np.bincount([a.target_label for a in res.attackers]).max() / n
    print(f"{n:>3} {res.cell.attacker_mean:>9.3f} {res.cell.attacker_std:>8.3f} {clean:>6.3f} {share:>17.2f}")
