# %% [markdown]
# Reading off LoRA ranks and spotting an outsider
#
# The difference of two merges sharing a base is ``B_i A_i - B_j A_j``, whose
# rank is the sum of the two LoRA ranks. Observing every pair pins down the
# individual ranks once there are three or more models.

# %%
from detuner import SyntheticSpec, detect_foreign_models, estimate_ranks, pairwise_ranks
from detuner.synth import generate_layer

group = generate_layer(SyntheticSpec(d=256, k=256, n=6, ranks=(8, 32, 32, 32, 64, 100), seed=1), 0)
b = pairwise_ranks(group)
print("rank(W0 - W1) =", b[0, 1], " rank(W4 - W5) =", b[4, 5])

# %%
est = estimate_ranks(group)
print(est.status, est.ranks)

# %% [markdown]
# With only odd pairwise ranks among three models the minimum-sum answer is
# not unique, and the estimator says so instead of picking one.

# %%
odd = estimate_ranks(group.subset([0, 1, 2]), pairwise={(0, 1): 3, (0, 2): 3, (1, 2): 3})
print(odd.status, odd.optimal_solutions)

# %% [markdown]
# A model fine-tuned from a different base differs from every other model by
# a full-rank matrix, which isolates it.

# %%
mixed = generate_layer(SyntheticSpec(d=64, k=64, n=6, ranks=(4,), foreign_count=1, seed=2), 0)
print("pairwise ranks with model 5:", [v for (i, j), v in pairwise_ranks(mixed).items() if j == 5])
print("flagged:", detect_foreign_models(mixed))
