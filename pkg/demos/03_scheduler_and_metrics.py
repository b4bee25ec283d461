# %% [markdown]
# Rank scheduling, convergence tables and the loss as a proxy
#
# The scheduler starts every model at rank 1 and doubles the truncation rank
# whenever the loss stops improving, jumping to the full rank halfway through.

# %%
from detuner import RecoveryConfig, SchedulerConfig, SyntheticSpec, recover_layer
from detuner.metrics import convergence_histogram, layer_errors, loss_error_correlation
from detuner.synth import generate

layers = generate(SyntheticSpec(d=64, k=64, n=5, ranks=(16,), m_layers=6, seed=3))
truth = [g.ground_truth for g in layers]

runs = {}
for name, sched in (("scheduled", SchedulerConfig()), ("full rank", None)):
    cfg = RecoveryConfig(steps=200, ranks=[16] * 5, scheduler=sched, svd_method="gram")
    runs[name] = [recover_layer(g, cfg) for g in layers]

# %%
t = runs["scheduled"][0]
changes = [i + 1 for i in range(1, t.steps_run) if t.active_ranks[i] != t.active_ranks[i - 1]]
print("rank changes at iterations", changes, "->", t.active_ranks[-1][0])

# %% [markdown]
# Per-layer errors summarised as the share of layers at or below each log10
# threshold.

# %%
grid = list(range(-16, -3, 2))
for name, traces in runs.items():
    errs = layer_errors([tr.final_w_star for tr in traces], truth)
    table = convergence_histogram(errs, thresholds=grid)
    print(f"{name:10s}", "  ".join(f"{th:+.0f}:{pct:3.0f}%" for th, pct in table))

# %% [markdown]
# The loss needs no ground truth, yet follows the true error closely.

# %%
print("pearson(log10 loss, log10 error):", round(loss_error_correlation(runs["scheduled"][0]), 4))
