"""Walkthrough: lottery tickets of models trained with different numbers of
attackers, and how far apart their layers are.

    python3 demos/lottery_tickets.py
"""

import itertools

import numpy as np

from multibackdoor import game, nn, subnet

base = game.GameConfig(
    dataset=game.DatasetSpec(num_classes=4, dims=(8, 8, 3), n=800, noise=10),
    v_d=0.3, n_max=5,
    model=game.ModelConfig(channels=(8, 16)),
    schedule=nn.TrainSchedule(lr=0.01, batch_size=32, max_epochs=6, patience=3),
)

# %% one shared initialisation, one poisoned pool and one ticket per N
spec = base.model.build(base.dataset.dims, base.dataset.num_classes)
init = nn.build_model(spec, seed=0, dtype=np.float32)
tickets = {}
for n in (1, 3, 5):
    played = game.play_game(game.apply_overrides(base, {"n_attackers": n}), seed=0, keep_allocation=True)
    tickets[n] = subnet.imp_prune(spec, init, played.pool, played.allocation.defender_val, target=0.1,
                                  rounds=3, schedule=base.schedule)
    print(f"N={n}: ASR {played.cell.attacker_mean:.3f}, ticket keeps {tickets[n].remaining_fraction:.3f} of weights")

# %% per-layer cosine distances, zeros included
for mode in ("full", "mask", "ticket"):
    for na, nb in itertools.combinations(tickets, 2):
        d = subnet.layer_cosine_distance(tickets[na], tickets[nb], mode)
        print(f"{mode:>6} N={na} vs N={nb}: " + " ".join(f"{k}={v:.3f}" for k, v in d.items()))

# %% sufficient-condition check: half the pixels and a 2:1 poisoned majority
print([subnet.lemma3_check(*args) for args in ((0.5, 201, 100), (0.49, 1000, 1), (0.9, 200, 100))])
