"""Interaction/attribute ingestion, k-core filtering, splitting, and the
inputs for the attribute-removal and sparsity-group experiments."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for unreadable or inconsistent input data."""


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class InteractionTable:
    """Deduplicated user-item pairs over dense integer ids.

    ``user_ids[u]`` / ``item_ids[v]`` give the raw identifier of dense index
    ``u`` / ``v``.  Tables produced by :func:`split` share their parent's id
    maps, so ``n_users`` may exceed the number of users with records.
    """

    users: np.ndarray
    items: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "users", np.asarray(self.users, dtype=np.int64))
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        if self.users.shape != self.items.shape:
            raise DataError("users and items arrays differ in length")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[object, object]]) -> "InteractionTable":
        """Index raw (user, item) pairs in first-seen order, dropping duplicates."""
        umap: dict[str, int] = {}
        imap: dict[str, int] = {}
        seen: set[tuple[int, int]] = set()
        us, vs = [], []
        for user, item in pairs:
            u = umap.setdefault(str(user), len(umap))
            v = imap.setdefault(str(item), len(imap))
            if (u, v) in seen:
                continue
            seen.add((u, v))
            us.append(u)
            vs.append(v)
        return cls(np.array(us, dtype=np.int64), np.array(vs, dtype=np.int64), tuple(umap), tuple(imap))

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def user_degree(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def item_degree(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def items_by_user(self) -> list[np.ndarray]:
        """Sorted item indices per user."""
        order = np.lexsort((self.items, self.users))
        bounds = np.cumsum(np.bincount(self.users, minlength=self.n_users))[:-1]
        return np.split(self.items[order], bounds)

    def subset(self, mask: np.ndarray) -> "InteractionTable":
        """Rows selected by ``mask`` (bool or index array), same id maps."""
        ts = None if self.timestamps is None else self.timestamps[mask]
        return InteractionTable(self.users[mask], self.items[mask], self.user_ids, self.item_ids, ts)


@dataclass(frozen=True, eq=False)
class AttributeTable:
    """Item attribute labels keyed by raw item id.

    Items missing from ``item_labels`` have no attributes.  ``labels`` is the
    vocabulary; its order fixes the dense attribute indices.
    """

    item_labels: dict[str, tuple[str, ...]]
    labels: tuple[str, ...]

    @classmethod
    def from_mapping(cls, mapping: dict[str, Iterable[str]]) -> "AttributeTable":
        vocab: dict[str, None] = {}
        cleaned: dict[str, tuple[str, ...]] = {}
        for item, labs in mapping.items():
            uniq = tuple(dict.fromkeys(str(x) for x in labs))
            cleaned[str(item)] = uniq
            vocab.update(dict.fromkeys(uniq))
        return cls(cleaned, tuple(vocab))

    @property
    def n_attrs(self) -> int:
        return len(self.labels)

    @property
    def n_associations(self) -> int:
        return sum(len(v) for v in self.item_labels.values())

    def align(self, item_ids: Sequence[str]) -> list[np.ndarray]:
        """Sorted attribute indices for each dense item index."""
        index = {lab: a for a, lab in enumerate(self.labels)}
        empty = ()
        return [np.array(sorted(index[lab] for lab in self.item_labels.get(iid, empty)), dtype=np.int64)
                for iid in item_ids]

    def coverage(self, item_ids: Sequence[str]) -> float:
        """Fraction of the given items that carry at least one attribute."""
        if not item_ids:
            return 0.0
        return sum(bool(self.item_labels.get(i)) for i in item_ids) / len(item_ids)


@dataclass(frozen=True, eq=False)
class Split:
    train: InteractionTable
    validation: InteractionTable
    test: InteractionTable
    seed: int


# -- loading ----------------------------------------------------------------

_USER_KEYS = ("reviewerID", "user", "user_id", "userId")
_ITEM_KEYS = ("asin", "item", "item_id", "itemId")
_TIME_KEYS = ("unixReviewTime", "timestamp", "time")
_HEADER_NAMES = {"user", "user_id", "userid", "reviewerid"}


def _parse_ts(raw: str | int | float | None, where: str) -> int | None:
    if raw is None or raw == "":
        return None
    try:
        return int(float(raw))
    except (TypeError, ValueError):
        raise DataError(f"{where}: bad timestamp {raw!r}") from None


def load_interactions(path: str | Path, format: str | None = None) -> InteractionTable:
    """Read user-item records from CSV or Amazon-style JSON lines.

    CSV columns are ``user,item[,rating,timestamp]`` with an optional header.
    Ratings are discarded (interactions are implicit feedback).
    """
    path = Path(path)
    if format is None:
        format = "json-lines" if path.suffix in (".json", ".jsonl") else "csv"
    if format not in ("csv", "json-lines"):
        raise DataError(f"unknown interaction format {format!r}")

    records: list[tuple[str, str, int | None]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        if format == "csv":
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if lineno == 1 and row[0].strip().lower() in _HEADER_NAMES:
                    continue
                if len(row) < 2 or not row[0].strip() or not row[1].strip():
                    raise DataError(f"{path}:{lineno}: expected at least user,item columns")
                ts = _parse_ts(row[3].strip(), f"{path}:{lineno}") if len(row) > 3 else None
                records.append((row[0].strip(), row[1].strip(), ts))
        else:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict):
                    raise DataError(f"{path}:{lineno}: expected a JSON object")
                user = next((obj[k] for k in _USER_KEYS if k in obj), None)
                item = next((obj[k] for k in _ITEM_KEYS if k in obj), None)
                if user is None or item is None:
                    raise DataError(f"{path}:{lineno}: missing user or item field")
                ts = next((obj[k] for k in _TIME_KEYS if k in obj), None)
                records.append((str(user), str(item), _parse_ts(ts, f"{path}:{lineno}")))
    if not records:
        raise DataError(f"{path}: no interaction records")

    table = InteractionTable.from_pairs((u, i) for u, i, _ in records)
    if all(r[2] is not None for r in records):
        first: dict[tuple[str, str], int] = {}
        for u, i, ts in records:
            first.setdefault((u, i), ts)
        ts_arr = np.array([first[(table.user_ids[u], table.item_ids[v])]
                           for u, v in zip(table.users.tolist(), table.items.tolist())], dtype=np.int64)
        table = InteractionTable(table.users, table.items, table.user_ids, table.item_ids, ts_arr)
    return table


def load_attributes(path: str | Path) -> AttributeTable:
    """Read item attribute labels.

    Accepted layouts: a JSON object ``{item: [label, ...]}``; JSON lines
    with ``asin`` plus ``categories`` (nested lists are flattened) or
    ``labels``; CSV rows ``item,label`` (one association per row).
    """
    path = Path(path)
    mapping: dict[str, list[str]] = {}
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"{path}: expected an object mapping item -> label list")
        for item, labs in obj.items():
            if not isinstance(labs, list) or not all(isinstance(x, str) for x in labs):
                raise DataError(f"{path}: item {item!r}: labels must be a list of strings")
            mapping[str(item)] = labs
    elif path.suffix == ".jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            item = next((obj[k] for k in _ITEM_KEYS if k in obj), None) if isinstance(obj, dict) else None
            if item is None:
                raise DataError(f"{path}:{lineno}: missing item field")
            labs = obj.get("labels", obj.get("categories", []))
            mapping.setdefault(str(item), []).extend(_flatten_labels(labs, f"{path}:{lineno}"))
    else:
        for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row[:2]] == ["item", "label"]:
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise DataError(f"{path}:{lineno}: expected item,label")
            mapping.setdefault(row[0].strip(), []).append(row[1].strip())
    return AttributeTable.from_mapping(mapping)


def _flatten_labels(labs, where: str) -> list[str]:
    if isinstance(labs, str):
        return [labs]
    if not isinstance(labs, list):
        raise DataError(f"{where}: labels must be a list")
    out: list[str] = []
    for x in labs:
        out.extend(_flatten_labels(x, where))
    return out


# -- filtering and splitting ------------------------------------------------


def kcore_filter(table: InteractionTable, k: int) -> InteractionTable:
    """Largest subtable where every user and item has at least ``k`` records.

    Survivors are re-indexed densely, keeping their relative order.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    keep = np.ones(len(table), dtype=bool)
    while True:
        ud = np.bincount(table.users[keep], minlength=table.n_users)
        vd = np.bincount(table.items[keep], minlength=table.n_items)
        drop = keep & ((ud[table.users] < k) | (vd[table.items] < k))
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise DataError(f"{k}-core empty")

    users, items = table.users[keep], table.items[keep]
    live_u = np.unique(users)
    live_v = np.unique(items)
    remap_u = np.full(table.n_users, -1, dtype=np.int64)
    remap_u[live_u] = np.arange(live_u.size)
    remap_v = np.full(table.n_items, -1, dtype=np.int64)
    remap_v[live_v] = np.arange(live_v.size)
    ts = None if table.timestamps is None else table.timestamps[keep]
    return InteractionTable(
        remap_u[users], remap_v[items],
        tuple(table.user_ids[u] for u in live_u.tolist()),
        tuple(table.item_ids[v] for v in live_v.tolist()),
        ts,
    )


def split(table: InteractionTable, train_ratio: float = 0.8, val_fraction_of_train: float = 0.1,
          seed: int = 0) -> Split:
    """Per-user random train/test partition, then a validation slice of train.

    Each user keeps ``max(1, round((1 - train_ratio) * n))`` interactions for
    test.  ``round(val_fraction_of_train * |train|)`` training interactions
    are then moved to validation, never taking a user's last training record.
    """
    rng = np.random.default_rng(seed)
    order = np.lexsort((table.items, table.users))
    deg = table.user_degree()
    short = np.flatnonzero((deg > 0) & (deg < 2))
    if short.size:
        raise DataError(f"user {table.user_ids[short[0]]!r} has fewer than 2 interactions; cannot split")

    starts = np.concatenate([[0], np.cumsum(deg)])
    is_test = np.zeros(len(table), dtype=bool)
    for u in range(table.n_users):
        n = int(deg[u])
        if n == 0:
            continue
        rows = order[starts[u]:starts[u + 1]]
        n_test = max(1, round_half_up((1.0 - train_ratio) * n))
        n_test = min(n_test, n - 1)
        is_test[rows[rng.permutation(n)[:n_test]]] = True

    train_rows = np.flatnonzero(~is_test)
    n_val = round_half_up(val_fraction_of_train * train_rows.size)
    remaining = np.bincount(table.users[train_rows], minlength=table.n_users)
    is_val = np.zeros(len(table), dtype=bool)
    taken = 0
    for r in train_rows[rng.permutation(train_rows.size)]:
        if taken == n_val:
            break
        u = table.users[r]
        if remaining[u] > 1:
            remaining[u] -= 1
            is_val[r] = True
            taken += 1

    is_train = ~is_test & ~is_val
    return Split(table.subset(is_train), table.subset(is_val), table.subset(is_test), seed)


def remove_attributes(attrs: AttributeTable, ratio: float, seed: int) -> AttributeTable:
    """Drop ``round(ratio * total)`` item-attribute associations uniformly at random.

    The label vocabulary is kept intact, so attribute indices stay stable.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    assoc = [(item, lab) for item, labs in attrs.item_labels.items() for lab in labs]
    n_remove = round_half_up(ratio * len(assoc))
    if n_remove == 0:
        return attrs
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(len(assoc), size=n_remove, replace=False).tolist())
    kept: dict[str, list[str]] = {item: [] for item in attrs.item_labels}
    for i, (item, lab) in enumerate(assoc):
        if i not in dropped:
            kept[item].append(lab)
    return AttributeTable({k: tuple(v) for k, v in kept.items()}, attrs.labels)


def group_users_by_sparsity(train: InteractionTable, thresholds: Sequence[int]) -> dict[int, set[int]]:
    """Bucket training users by interaction count.

    With thresholds ``[5, 10, 15]`` the groups are ``1: [0, 5)``,
    ``2: [5, 10)``, ``3: [10, 15)``, ``4: [15, inf)``.
    """
    if len(thresholds) == 0:
        raise ValueError("thresholds must be non-empty")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {list(thresholds)}")
    deg = train.user_degree()
    groups: dict[int, set[int]] = {g: set() for g in range(1, len(thresholds) + 2)}
    for u in np.flatnonzero(deg > 0).tolist():
        g = int(np.searchsorted(thresholds, deg[u], side="right")) + 1
        groups[g].add(u)
    return groups


# -- prepared-dataset files ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreparedData:
    split: Split
    attributes: AttributeTable = field(default_factory=lambda: AttributeTable({}, ()))

    @property
    def n_users(self) -> int:
        return self.split.train.n_users

    @property
    def n_items(self) -> int:
        return self.split.train.n_items

    def item_attrs(self, attributes: AttributeTable | None = None) -> list[np.ndarray]:
        return (attributes or self.attributes).align(self.split.train.item_ids)


def _write_pairs(path: Path, table: InteractionTable) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item"])
        w.writerows(zip(table.users.tolist(), table.items.tolist()))


def _read_pairs(path: Path, user_ids, item_ids) -> InteractionTable:
    us, vs = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1 and row[:2] == ["user", "item"]:
                continue
            try:
                u, v = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: expected integer user,item") from None
            if not (0 <= u < len(user_ids) and 0 <= v < len(item_ids)):
                raise DataError(f"{path}:{lineno}: index out of range")
            us.append(u)
            vs.append(v)
    return InteractionTable(np.array(us, dtype=np.int64), np.array(vs, dtype=np.int64), user_ids, item_ids)


def write_prepared(out_dir: str | Path, split_: Split, attributes: AttributeTable) -> None:
    """Write split CSVs, id maps, and the attribute table of the kept items."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in (("train", split_.train), ("validation", split_.validation), ("test", split_.test)):
        _write_pairs(out / f"{name}.csv", table)
    tr = split_.train
    (out / "user_ids.json").write_text(json.dumps({uid: u for u, uid in enumerate(tr.user_ids)}, indent=1))
    (out / "item_ids.json").write_text(json.dumps({iid: v for v, iid in enumerate(tr.item_ids)}, indent=1))
    items = {iid: list(attributes.item_labels[iid]) for iid in tr.item_ids if attributes.item_labels.get(iid)}
    (out / "attributes.json").write_text(json.dumps({"labels": list(attributes.labels), "items": items}, indent=1))
    (out / "split.json").write_text(json.dumps({"seed": split_.seed}))


def load_prepared(data_dir: str | Path) -> PreparedData:
    d = Path(data_dir)
    try:
        umap = json.loads((d / "user_ids.json").read_text())
        imap = json.loads((d / "item_ids.json").read_text())
        meta = json.loads((d / "split.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"prepared data missing file: {exc.filename}") from None
    user_ids = tuple(sorted(umap, key=umap.__getitem__))
    item_ids = tuple(sorted(imap, key=imap.__getitem__))
    tables = [_read_pairs(d / f"{name}.csv", user_ids, item_ids) for name in ("train", "validation", "test")]
    attr_path = d / "attributes.json"
    if attr_path.exists():
        obj = json.loads(attr_path.read_text())
        attrs = AttributeTable({k: tuple(v) for k, v in obj["items"].items()}, tuple(obj["labels"]))
    else:
        attrs = AttributeTable({}, ())
    return PreparedData(Split(*tables, seed=int(meta["seed"])), attrs)
