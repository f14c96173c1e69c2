"""Synthetic corpus -> MAML meta-training -> test-split mAP@20.

Run from anywhere: ``python3 demos/quickstart.py``. Takes a few seconds.
"""
from metalign.config import resolve_config
from metalign.pipeline import load_corpus_from_config, run_training

config = resolve_config({
    "corpus": {"synthetic": {"seed": 7}},
    "meta": {"mode": "mono-bi", "counts": [400, 80, 40]},
    "train": {"max_meta_batches": 120},
})
corpus = load_corpus_from_config(config)
print("corpus:", len(corpus), "records in", ", ".join(corpus.languages))

out = run_training(config, corpus)
r = out.result
print(f"{len(r.history)} meta-batches, early stop: {r.stopped_early}")
print(f"dev criterion {r.initial_criterion:.4f} -> {r.best_criterion:.4f}")
for rep in out.reports.values():
    print(rep.to_table())
