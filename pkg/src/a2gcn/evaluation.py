"""Full-ranking top-n evaluation: HR@n and NDCG@n over all unobserved items."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import InteractionTable, group_users_by_sparsity
from .graph import build_graph
from .model import embed, variant_by_name


@dataclass(frozen=True, eq=False)
class RankedList:
    user: int
    items: np.ndarray
    excluded: frozenset[int] = frozenset()


def rank_items(user_emb: np.ndarray, item_emb: np.ndarray, u: int, exclude: Iterable[int] = ()) -> RankedList:
    """All non-excluded items by descending score; ties go to the lower index."""
    excluded = frozenset(int(v) for v in exclude)
    candidates = np.array([v for v in range(item_emb.shape[0]) if v not in excluded], dtype=np.int64)
    if candidates.size == 0:
        raise ValueError(f"user {u}: every item is excluded")
    scores = item_emb[candidates] @ user_emb[u]
    order = np.argsort(-scores, kind="stable")
    return RankedList(u, candidates[order], excluded)


def _top(ranked: RankedList | Sequence[int], n: int) -> list[int]:
    items = ranked.items if isinstance(ranked, RankedList) else ranked
    return [int(v) for v in items[:n]]


def hr_at_n(ranked: RankedList | Sequence[int], test_items: Iterable[int], n: int = 20,
            binary: bool = False) -> float:
    """Share of the test items found in the top ``n`` (any-hit 0/1 with ``binary``)."""
    test = set(int(v) for v in test_items)
    if not test:
        raise ValueError("test_items is empty")
    hits = len(test.intersection(_top(ranked, n)))
    if binary:
        return float(hits > 0)
    return hits / len(test)


def ndcg_at_n(ranked: RankedList | Sequence[int], test_items: Iterable[int], n: int = 20) -> float:
    """Binary-relevance NDCG with ``1 / log2(p + 1)`` discount at 1-indexed rank ``p``."""
    test = set(int(v) for v in test_items)
    if not test:
        raise ValueError("test_items is empty")
    dcg = sum(1.0 / math.log2(p + 2) for p, v in enumerate(_top(ranked, n)) if v in test)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(n, len(test))))
    return dcg / idcg


@dataclass
class MetricReport:
    n: int
    hr: float
    ndcg: float
    n_users: int
    skipped: int = 0
    groups: dict[int, tuple[float, float, int]] = field(default_factory=dict)
    per_user: dict[int, tuple[float, float]] = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        return json.dumps({
            "n": self.n, f"hr@{self.n}": self.hr, f"ndcg@{self.n}": self.ndcg,
            "users": self.n_users, "skipped": self.skipped,
            "groups": {str(g): {f"hr@{self.n}": h, f"ndcg@{self.n}": d, "users": c}
                       for g, (h, d, c) in sorted(self.groups.items())},
        }, indent=2)

    def write(self, out_dir: str | Path, per_user: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n")
        with (out / "report.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "users", f"hr@{self.n}", f"ndcg@{self.n}"])
            w.writerow(["all", self.n_users, repr(self.hr), repr(self.ndcg)])
            for g, (h, d, c) in sorted(self.groups.items()):
                w.writerow([g, c, repr(h), repr(d)])
        if per_user:
            with (out / "per_user.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["user", f"hr@{self.n}", f"ndcg@{self.n}"])
                for u, (h, d) in sorted(self.per_user.items()):
                    w.writerow([u, repr(h), repr(d)])


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("A2GCN_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_embeddings(user_emb: np.ndarray, item_emb: np.ndarray, test: InteractionTable,
                        exclude: Sequence[InteractionTable] = (), n: int = 20,
                        groups: dict[int, set[int]] | None = None, binary_hr: bool = False,
                        chunk: int = 1024) -> MetricReport:
    """Rank every item for each test user and average the per-user metrics.

    Items in any ``exclude`` table are removed from that user's candidates.
    Users without test items are not evaluated; users present only in the
    test table count as ``skipped`` when they have no embedding.
    """
    n_users, n_items = user_emb.shape[0], item_emb.shape[0]
    test_sets: dict[int, list[int]] = {}
    for u, v in zip(test.users.tolist(), test.items.tolist()):
        test_sets.setdefault(u, []).append(v)
    users = sorted(u for u in test_sets if u < n_users)
    skipped = len(test_sets) - len(users)

    ex_rows = np.concatenate([t.users for t in exclude]) if exclude else np.zeros(0, np.int64)
    ex_cols = np.concatenate([t.items for t in exclude]) if exclude else np.zeros(0, np.int64)
    top_k = min(n, n_items)

    def run(batch: list[int]) -> list[tuple[int, float, float]]:
        idx = np.array(batch, dtype=np.int64)
        scores = user_emb[idx] @ item_emb.T
        pos = {u: i for i, u in enumerate(batch)}
        sel = np.isin(ex_rows, idx)
        rows = np.array([pos[u] for u in ex_rows[sel].tolist()], dtype=np.int64)
        scores[rows, ex_cols[sel]] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :top_k]
        out = []
        for i, u in enumerate(batch):
            finite = top[i][np.isfinite(scores[i, top[i]])]
            out.append((u, hr_at_n(finite, test_sets[u], n, binary_hr), ndcg_at_n(finite, test_sets[u], n)))
        return out

    batches = [users[i:i + chunk] for i in range(0, len(users), chunk)]
    threads = _eval_threads()
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = [r for part in pool.map(run, batches) for r in part]
    else:
        results = [r for b in batches for r in run(b)]

    per_user = {u: (h, d) for u, h, d in results}
    if per_user:
        hr = float(np.mean([h for h, _ in per_user.values()]))
        ndcg = float(np.mean([d for _, d in per_user.values()]))
    else:
        hr = ndcg = 0.0
    report = MetricReport(n, hr, ndcg, len(per_user), skipped, per_user=per_user)
    if groups:
        for g, members in sorted(groups.items()):
            vals = [per_user[u] for u in sorted(members) if u in per_user]
            if vals:
                report.groups[g] = (float(np.mean([h for h, _ in vals])),
                                    float(np.mean([d for _, d in vals])), len(vals))
            else:
                report.groups[g] = (0.0, 0.0, 0)
    return report


class DimensionError(ValueError):
    pass


def evaluate(checkpoint, data, n: int = 20, thresholds: Sequence[int] | None = None,
             binary_hr: bool = False, attributes=None) -> MetricReport:
    """Test-set report for a checkpoint on a prepared dataset.

    Training and validation items are excluded from each user's candidates.
    ``thresholds`` adds a breakdown by training-interaction count.
    """
    split_ = data.split
    if (checkpoint.n_users, checkpoint.n_items) != (split_.train.n_users, split_.train.n_items):
        raise DimensionError(
            f"checkpoint has {checkpoint.n_users} users / {checkpoint.n_items} items, "
            f"data has {split_.train.n_users} / {split_.train.n_items}")
    variant = variant_by_name(checkpoint.config.get("variant", "A2-GCN"))
    slope = checkpoint.config.get("leaky_slope", 0.2)
    if variant.use_attributes:
        attrs = attributes if attributes is not None else data.attributes
        if attrs.n_attrs != checkpoint.n_attrs:
            raise DimensionError(f"checkpoint has {checkpoint.n_attrs} attributes, data has {attrs.n_attrs}")
        graph = build_graph(split_.train, attrs)
    else:
        graph = build_graph(split_.train, None)
    users, items = embed(checkpoint.params, graph, variant, slope)
    groups = group_users_by_sparsity(split_.train, thresholds) if thresholds else None
    return evaluate_embeddings(users, items, split_.test, [split_.train, split_.validation], n, groups, binary_hr)
