"""Show one sampled episode per transfer mode and check it against its pattern."""
import numpy as np

from metalign.data import SyntheticSpec, generate_synthetic_corpus
from metalign.tasks import RETRIEVAL_ROSTER, TransferMode, sample_meta_task, task_violations

corpus = generate_synthetic_corpus(SyntheticSpec()).retrieval.split("train")

for mode in TransferMode:
    # mixt cycles shapes by task index; use the phase position as the index
    for i, phase in enumerate(("meta-train", "meta-valid", "meta-test")):
        task = sample_meta_task(corpus, mode, phase, k=3, q=2, rng=np.random.default_rng(0),
                                index=i)
        sets = "  ->  ".join(f"{name}:{ts.arrangement.label}" for name, ts in task.sets().items())
        ok = "ok" if not task_violations(task, 3, 2, RETRIEVAL_ROSTER) else "VIOLATION"
        print(f"{mode.value:14s} {phase:10s} [{task.mode.value}] {sets}  {ok}")
        if mode not in (TransferMode.TRANS, TransferMode.MIXT):
            break   # the shape does not depend on the phase

print()
task = sample_meta_task(corpus, "mono-bi", k=3, q=2, rng=np.random.default_rng(1))
for name, ts in task.sets().items():
    for key, lq, lr in ts.items:
        print(f"{name:8s} {key}  question in {lq}, answer in {lr}")
