# # Held-out evaluation
#
# Precision/recall over every non-NA (bag, relation) prediction, then a 2-D
# projection of the learned relation embeddings.

# %%
from tieforge.corpus import SynthSpec, generate_synthetic
from tieforge.evalkit import collect_predictions, p_at_n, pr_curve, project_embeddings
from tieforge.tiesgraph import TiesGraph
from tieforge.trainer import TrainConfig, relation_matrix, train

train_bags, test_bags, vocab, rels, ties = generate_synthetic(SynthSpec(num_bags=600, seed=4))
graph = TiesGraph.from_bags(train_bags, len(rels))
cfg = TrainConfig(feature_maps=32, epochs=5, seed=4)
params, _ = train(train_bags, cfg, graph, len(vocab))

# %%
records = collect_predictions(test_bags, params, graph, cfg)
curve = pr_curve(records)
print(len(records), "records, AUC", round(curve.auc, 3))
for n in (10, 50, 100):
    print(f"P@{n} = {p_at_n(records, n):.2f}")
for p, r in curve.points[:: max(1, len(curve.points) // 8)]:
    print(f"  precision {p:.2f} recall {r:.2f}")

# %% [markdown]
# Relations tied by planted implications should land near each other.

# %%
coords = project_embeddings(relation_matrix(params, graph, cfg).values)
for name, (x, y) in zip(rels.names, coords):
    print(f"{name:6s} {x:7.2f} {y:7.2f}")
