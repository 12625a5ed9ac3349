"""Optimal values in the locked-door rooms task for the three action sets.

Run: python3 demos/02_plan_rooms.py   (about a minute)
"""
import math

from concurrent_options import SmdpTask, build_models, build_rooms_domain, greedy_policy, svi
from concurrent_options.planning import bellman_residual

rooms = build_rooms_domain()
gamma = rooms.mdp.discount


def steps_equivalent(v):
    # a run of n steps at reward -1 is worth -(1 - gamma**n) / (1 - gamma)
    return math.log(1 + (1 - gamma) * v) / math.log(gamma)


for framework, rule in (("sequential", "t2"), ("concurrent", "t1"), ("concurrent", "t2")):
    task = SmdpTask(rooms.mdp, rooms.actions(framework, rule), rooms.start)
    models = build_models(task)
    v, q = svi(models, tol=1e-10)
    best = models.names[greedy_policy(q)[rooms.start]]
    label = framework if framework == "sequential" else f"concurrent/{rule}"
    print(f"{label:16s} actions {len(task.actions):2d}  V*(start) {v[rooms.start]:8.4f}"
          f"  ~{steps_equivalent(v[rooms.start]):5.2f} steps  first choice {best}"
          f"  residual {bellman_residual(models, v):.1e}")

# Running the key pickup alongside navigation saves roughly four primitive steps.
