"""Follow single test images through the evolution loop.

For each episode we print the true-class probability at every iteration and
which classes the filter kept. Correct episodes usually become more
confident as the prompts are refined.
"""

import numpy as np

from promptforge import Model, confidence_gain_fraction, generate_task, load_config, train, trace_episode
from promptforge.metrics import evaluate_splits

cfg, tcfg = load_config("reference.cfg")
task = generate_task(cfg.seed, cfg.K, tcfg.base_fraction, tcfg.shots, tcfg.noise, cfg, tcfg.test_shots)
model, _ = train(task, cfg, tcfg)

classes = task.classes.subset(task.base_ids)
for e in range(0, len(task.test_base), 17):
    img, label = task.test_base.images[e], int(task.test_base.labels[e])
    trace = trace_episode(model, img, classes)
    p = trace.probabilities()[:, label]
    kept = [s.filtered.indices.tolist() for s in trace.states]
    pred = int(np.argmax(trace.final.probs.values))
    print(f"episode {e:3d} class {label}: p(true) " + " -> ".join(f"{v:.3f}" for v in p)
          + f"  filter {kept}  {'correct' if pred == label else 'wrong'}")

base, novel = evaluate_splits(model, task)
print(f"\nconfidence non-decreasing from n=1 to n=2 on "
      f"{100 * confidence_gain_fraction(base, novel):.1f}% of correct test episodes")
