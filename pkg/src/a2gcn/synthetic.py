"""Planted-preference data where item attributes carry the user signal."""

from __future__ import annotations

import numpy as np

from .data import AttributeTable, InteractionTable, PreparedData, Split


def planted_preferences(n_users: int = 200, n_items: int = 100, n_labels: int = 10,
                        labels_per_item: int = 3, n_train: int = 10, n_val: int = 1, n_test: int = 2,
                        popularity_skew: float = 0.0, test_popularity_skew: float | None = None,
                        cold_fraction: float = 0.0, noise_fraction: float = 0.0, seed: int = 0) -> PreparedData:
    """Each user is assigned one label and only interacts with items carrying it.

    Items get ``labels_per_item`` distinct labels; every label is guaranteed
    at least ``n_train + n_val + n_test`` items.  Within a user's pool, items
    are drawn with Zipf-like weights ``rank ** -popularity_skew`` so that
    some preferred items are rarely seen in training.
    """
    need = n_train + n_val + n_test
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        item_labels = [rng.choice(n_labels, size=labels_per_item, replace=False) for _ in range(n_items)]
        pools = [[v for v in range(n_items) if lab in item_labels[v]] for lab in range(n_labels)]
        if min(len(p) for p in pools) >= need:
            break
    else:
        raise ValueError("cannot give every label enough items; raise labels_per_item or n_items")

    popularity = rng.permutation(n_items) + 1.0
    train_w = popularity ** -popularity_skew
    test_w = popularity ** -(popularity_skew if test_popularity_skew is None else test_popularity_skew)
    cold = rng.random(n_items) < cold_fraction
    train_w[cold] = 0.0
    user_label = rng.integers(0, n_labels, size=n_users)
    rows: dict[str, list[tuple[int, int]]] = {"train": [], "validation": [], "test": []}
    for u in range(n_users):
        pool = np.array(pools[user_label[u]])
        p = train_w[pool] / train_w[pool].sum()
        seen = rng.choice(pool, size=n_train + n_val, replace=False, p=p)
        rest = np.setdiff1d(pool, seen)
        p = test_w[rest] / test_w[rest].sum()
        unseen = rng.choice(rest, size=n_test, replace=False, p=p)
        n_noise = int(round(noise_fraction * n_train))
        if n_noise:
            outside = np.setdiff1d(np.arange(n_items), pool)
            seen[:n_noise] = rng.choice(outside, size=n_noise, replace=False)
        rows["train"] += [(u, int(v)) for v in seen[:n_train]]
        rows["validation"] += [(u, int(v)) for v in seen[n_train:]]
        rows["test"] += [(u, int(v)) for v in unseen]

    user_ids = tuple(f"u{u}" for u in range(n_users))
    item_ids = tuple(f"i{v}" for v in range(n_items))

    def table(pairs):
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        return InteractionTable(arr[:, 0], arr[:, 1], user_ids, item_ids)

    attrs = AttributeTable(
        {item_ids[v]: tuple(f"label{a}" for a in sorted(item_labels[v].tolist())) for v in range(n_items)},
        tuple(f"label{a}" for a in range(n_labels)),
    )
    split_ = Split(table(rows["train"]), table(rows["validation"]), table(rows["test"]), seed)
    return PreparedData(split_, attrs)
