# # Training with and without the ties graph
#
# A reduced model (32 feature maps) keeps this to a few seconds per epoch.
# The full-size defaults live in `TrainConfig()`.

# %%
from dataclasses import replace

import numpy as np

from tieforge import numcore as nc
from tieforge.corpus import SynthSpec, generate_synthetic
from tieforge.encoder import bag_attention, encode_sentence
from tieforge.evalkit import ties_recovery_report
from tieforge.tiesgraph import TiesGraph
from tieforge.trainer import TrainConfig, predict_bag, relation_matrix, train

train_bags, test_bags, vocab, rels, ties = generate_synthetic(SynthSpec(num_bags=600, seed=3))
graph = TiesGraph.from_bags(train_bags, len(rels))
cfg = TrainConfig(feature_maps=32, epochs=5, seed=3)

# %%
runs = {}
for name, c in [("graph", cfg), ("no graph", replace(cfg, graph_enabled=False))]:
    params, trace = train(train_bags, c, graph, len(vocab))
    runs[name] = (params, c)
    H = relation_matrix(params, graph, c).values
    rep = ties_recovery_report(H, ties, U=graph.U)
    print(f"{name:9s} final loss {trace[-1][1]:.3f}  implication cos {rep.implication_cosine:.2f}"
          f"  exclusion cos {rep.exclusion_cosine:.2f}  margin {rep.margin:.2f}")

# %% [markdown]
# Attention weights over one multi-sentence bag, queried with its gold relation.

# %%
params, c = runs["graph"]
bag = next(b for b in test_bags if len(b.sentences) > 2 and b.labels != {0})
r = min(bag.labels)
H = relation_matrix(params, graph, c)
reps = [encode_sentence(s, params.tables, params.pcnn) for s in bag.sentences]
_, alpha = bag_attention(reps, nc.row(H, r))
for s, a in zip(bag.sentences, alpha):
    print(f"{a:.2f}", " ".join(vocab.itos[t] for t in s.token_ids))

probs = predict_bag(bag, params, graph, c)
print("gold", sorted(rels.names[x] for x in bag.labels), "top", rels.names[int(np.argmax(probs))])
