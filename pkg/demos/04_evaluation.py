"""Full-ranking evaluation with a sparsity breakdown.

Ranks every unobserved item for each test user and reports HR@20 and
NDCG@20, overall and per group of users bucketed by training size.
"""

import numpy as np

from a2gcn.data import InteractionTable, PreparedData, split
from a2gcn.evaluation import evaluate, hr_at_n, ndcg_at_n, rank_items
from a2gcn.training import TrainConfig, fit

# the metrics on a hand-made ranking
ranking = [4, 9, 1, 7, 3]
print("HR@3 for test {1, 3}:", hr_at_n(ranking, {1, 3}, 3))
print("NDCG@3 for test {1, 3}:", round(ndcg_at_n(ranking, {1, 3}, 3), 4))

# ties go to the lower item index
u = np.ones((1, 1))
items = np.array([[0.2], [0.5], [0.5], [0.1]])
print("ranking with a tie:", rank_items(u, items, 0).items.tolist())

# users with very different activity levels, items with a popularity skew
rng = np.random.default_rng(1)
popularity = 1.0 / np.arange(1, 121)
pairs = []
for u in range(150):
    n = int(rng.integers(3, 30))
    for v in rng.choice(120, size=n, replace=False, p=popularity / popularity.sum()):
        pairs.append((f"u{u}", f"i{v}"))
data = PreparedData(split(InteractionTable.from_pairs(pairs), seed=1))

res = fit(TrainConfig(variant="GCN_b", learning_rate=0.01, max_epochs=20, seed=1), data)
report = evaluate(res.checkpoint, data, thresholds=[5, 10, 15])
print(f"all {report.n_users} users: HR@20 {report.hr:.4f}  NDCG@20 {report.ndcg:.4f}")
labels = {1: "< 5", 2: "5-9", 3: "10-14", 4: ">= 15"}
for g, (hr, ndcg, n_users) in report.groups.items():
    print(f"  train size {labels[g]:>5s}: {n_users:3d} users  HR@20 {hr:.4f}  NDCG@20 {ndcg:.4f}")
