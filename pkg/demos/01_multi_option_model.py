"""Walk to a hallway while picking up the key, under both termination rules.

Run: python3 demos/01_multi_option_model.py
"""
import numpy as np

from concurrent_options import MultiOption, RngStream, build_rooms_domain, monte_carlo_model, multi_option_model

rooms = build_rooms_domain()
start = rooms.start
walk, pickup = rooms.option("hallway_0"), rooms.option("pickup_key")
print(f"{rooms.mdp.n_states} states; start ordinal {start}")

# The navigation option controls (position, doors); the key option controls the key.
# They are coherent, so they can run side by side as one multi-option.
for rule in ("t1", "t2"):
    mo = MultiOption((walk, pickup), rule)
    model = multi_option_model(rooms.mdp, mo, starts=[start])
    table = model.duration_table(start)           # row k-1 holds P(s, ., k)
    by_k = table.sum(axis=1)
    mean_k = float((np.arange(1, len(by_k) + 1) * by_k).sum())
    print(f"\n{mo.name} [{rule}]")
    print(f"  expected duration {mean_k:.3f} steps, discounted reward {model.reward[start]:.4f}")
    print("  P(duration = k):", {k + 1: round(float(p), 4) for k, p in enumerate(by_k) if p > 1e-4})

    # the same quantities estimated by running the multi-option step by step
    mc = monte_carlo_model(rooms.mdp, mo, start, 20_000, RngStream(1, 0))
    emp = mc.durations()
    print("  sampled         :", {k: round(c / mc.n, 4) for k, c in sorted(emp.items()) if c / mc.n > 1e-4})
    print(f"  sampled return {mc.mean_return:.4f} +- {mc.stderr_return:.4f}")

# Under t1 the pair stops as soon as the key is in hand (6 steps) or the walk ends.
# Under t2 the walk keeps going with the key frozen in the held state.
