"""Comparing the model with its ablated variants.

Trains every variant on one shared split and prints HR@20 / NDCG@20, the
same table the ``a2gcn ablate`` command writes.
"""

from a2gcn.evaluation import evaluate
from a2gcn.model import ABLATION_ORDER
from a2gcn.synthetic import planted_preferences
from a2gcn.training import TrainConfig, fit

data = planted_preferences(seed=0)
print(f"{'variant':10s}  HR@20   NDCG@20")
for name in ABLATION_ORDER:
    cfg = TrainConfig(variant=name, learning_rate=0.01, l2_lambda=1e-2, max_epochs=60, patience_epochs=15, seed=0)
    rep = evaluate(fit(cfg, data).checkpoint, data)
    print(f"{name:10s}  {rep.hr:.4f}  {rep.ndcg:.4f}")
