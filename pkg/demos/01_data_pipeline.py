"""Raw interactions to a prepared split.

Builds a small review log in a temp directory, applies 5-core filtering,
splits 80/20 per user with a validation slice, and writes the prepared
files that the training commands read.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from a2gcn.data import (group_users_by_sparsity, kcore_filter, load_attributes, load_interactions, load_prepared,
                        split, write_prepared)

rng = np.random.default_rng(0)
work = Path(tempfile.mkdtemp())

# a JSON-lines review log in the usual reviewerID / asin layout
with (work / "reviews.json").open("w") as fh:
    for u in range(60):
        for v in rng.choice(50, size=int(rng.integers(2, 15)), replace=False):
            fh.write(json.dumps({"reviewerID": f"R{u}", "asin": f"B{v:03d}", "unixReviewTime": 1_400_000_000}) + "\n")
(work / "meta.json").write_text(json.dumps({f"B{v:03d}": [f"cat{v % 6}", f"brand{v % 4}"] for v in range(50)}))

raw = load_interactions(work / "reviews.json")
core = kcore_filter(raw, 5)
print(f"raw: {raw.n_users} users, {raw.n_items} items, {len(raw)} interactions")
print(f"5-core: {core.n_users} users, {core.n_items} items, {len(core)} interactions")

s = split(core, train_ratio=0.8, val_fraction_of_train=0.1, seed=0)
print(f"train {len(s.train)}  validation {len(s.validation)}  test {len(s.test)}")

attrs = load_attributes(work / "meta.json")
print(f"{attrs.n_attrs} attribute labels, coverage {attrs.coverage(core.item_ids):.0%}")

write_prepared(work / "prepared", s, attrs)
back = load_prepared(work / "prepared")
assert back.split.test.pairs() == s.test.pairs()
print("prepared files:", sorted(p.name for p in (work / "prepared").iterdir()))

groups = group_users_by_sparsity(s.train, [5, 10, 15])
print("users per sparsity group:", {g: len(m) for g, m in groups.items()})
