"""LFPO and the group-normalized policy-gradient baseline on shared rollouts.

Both learners see identical prompts and, at the first iteration, identical
completions; only the update rule differs.  The merged stream is written to a
JSONL file for plotting with any external tool.
"""

import json
import sys
import tempfile
from pathlib import Path

from lfpo.cli import run_compare
from lfpo.config import TrainConfig

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 15
config = TrainConfig().replace(trainer__total_iterations=iterations, trainer__eval_every=5,
                               trainer__eval_prompts=100)
out = Path(tempfile.mkdtemp()) / "compare.jsonl"
reached = run_compare(config, ["lfpo", "pg-baseline"], [0, 1], out, target=0.05)

for line in out.read_text().splitlines():
    row = json.loads(line)
    if row["eval_exact_reward"] is not None:
        print(f"{row['algorithm']:<12} seed {row['seed']}  trajectories {row['trajectories']:>5}"
              f"  eval {row['eval_exact_reward']:.3f}  steps {row['mean_decode_steps']:.2f}")
print("\nfirst iteration reaching 0.05:", reached)
print("merged stream:", out)
