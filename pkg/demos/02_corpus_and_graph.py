# # Planted relation ties and the graph built from them
#
# The synthetic generator plants implication rules (r1 usually brings r2 along)
# and exclusions (r1 never shows up with r6). The co-occurrence statistics of
# the training labels should reveal both.

# %%
import numpy as np

from tieforge.corpus import NA, SynthSpec, generate_synthetic
from tieforge.tiesgraph import TiesGraph

spec = SynthSpec(seed=7)
train, test, vocab, rels, ties = generate_synthetic(spec)
print(len(train), "training bags,", len(test), "test bags,", len(vocab), "tokens")
print("NA bags:", sum(b.labels == {NA} for b in train + test))

# %% [markdown]
# A bag is every sentence mentioning one entity pair.

# %%
bag = next(b for b in train if len(b.labels) > 1)
print(bag.bag_id.replace("\t", " / "), "labels", sorted(rels.names[r] for r in bag.labels))
for s in bag.sentences:
    print("  ", " ".join(vocab.itos[t] for t in s.token_ids))

# %% [markdown]
# Counts, transition probabilities and the exclusion mask.

# %%
g = TiesGraph.from_bags(train, len(rels), theta=0.18)
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("P_hat (rows: given relation)\n", g.P_hat)
print("edges", g.edge_count(), "kept after threshold", g.filtered_edge_count())

# %%
for i, j, p in ties.implications[:4]:
    print(f"planted {rels.names[i]} -> {rels.names[j]} p={p}: P_hat={g.P_hat[i, j]:.2f}")
for i, j in ties.exclusions[:4]:
    print(f"planted {rels.names[i]} x {rels.names[j]}: U={g.U[i, j]}")
