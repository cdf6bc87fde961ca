"""A short LFPO run on the Copy task, then greedy evaluation.

Pass an iteration count to run longer (the default is quick).  The rows
printed are the same ones written to metrics.jsonl by ``lfpo train``.
"""

import sys

import numpy as np

from lfpo import TrainConfig, evaluate, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 20
config = TrainConfig().replace(trainer__total_iterations=iterations, trainer__eval_every=5,
                               trainer__eval_prompts=100, lfpo__lambda_anchor=0.5)


def show(row):
    line = f"iter {row.iteration:>4}  trajectories {row.trajectories:>6}  reward {row.mean_reward:.3f}  loss {row.loss:.4f}"
    if row.eval_exact_reward is not None:
        line += f"  eval {row.eval_exact_reward:.3f}  steps {row.mean_decode_steps:.2f}"
    print(line)


result = train(config, on_row=show)
score, steps = evaluate(config.task, result.params, config.model_config, config.decode, 200,
                        np.random.default_rng(123), return_steps=True)
print(f"\nfresh prompts: exact {score:.3f}, mean decode steps {steps:.2f}")
