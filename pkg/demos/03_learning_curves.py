"""SMDP Q-learning on the rooms task; writes one learning-curve CSV per framework.

Run: python3 demos/03_learning_curves.py [episodes] [trials]
Defaults are small (2000 episodes, 3 trials) so the demo takes under a minute.
"""
import sys

import numpy as np

from concurrent_options import LearnerConfig, SmdpTask, build_rooms_domain, run_training
from concurrent_options.learning import write_learning_csv

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
trials = int(sys.argv[2]) if len(sys.argv) > 2 else 3
rooms = build_rooms_domain()

for label, framework in (("sequential", "sequential"), ("t1", "concurrent"), ("t2", "concurrent")):
    rule = "t1" if label == "t1" else "t2"
    task = SmdpTask(rooms.mdp, rooms.actions(framework, rule), rooms.start)
    result = run_training(task, LearnerConfig(rule=label, episodes=episodes, trials=trials))
    curve = result.curve
    with open(f"curve_{label}.csv", "w", newline="\n") as fh:
        write_learning_csv(curve, fh)
    tail = min(1000, episodes)
    print(f"{label:10s} running median at episode 100: {curve.mean_running_median[min(99, episodes - 1)]:6.2f}"
          f"  final: {curve.mean_running_median[-1]:6.2f}"
          f"  median of last {tail}: {np.median(curve.final_median(tail)):5.1f}")

# Columns: trial, episode, steps, running_median. Plot steps or running_median per framework.
