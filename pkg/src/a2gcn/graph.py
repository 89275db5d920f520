"""The user/item/attribute tripartite graph and its attention-weighted Laplacian.

Node order in every stacked matrix is users, then items, then attributes:
user ``u`` is row ``u``, item ``v`` is row ``n_users + v`` and attribute
``a`` is row ``n_users + n_items + a``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import AttributeTable, InteractionTable


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TripartiteGraph:
    """Undirected graph with user-item and item-attribute edges only.

    Edges are stored once each, sorted: ``ui_users``/``ui_items`` by
    (user, item) and ``ia_items``/``ia_attrs`` by (item, attribute).
    Self-connections are implicit.
    """

    n_users: int
    n_items: int
    n_attrs: int
    ui_users: np.ndarray
    ui_items: np.ndarray
    ia_items: np.ndarray
    ia_attrs: np.ndarray

    @classmethod
    def from_edges(cls, n_users: int, n_items: int, n_attrs: int,
                   user_item: Sequence[tuple[int, int]] = (),
                   item_attr: Sequence[tuple[int, int]] = ()) -> "TripartiteGraph":
        ui = np.array(sorted(set(map(tuple, user_item))), dtype=np.int64).reshape(-1, 2)
        ia = np.array(sorted(set(map(tuple, item_attr))), dtype=np.int64).reshape(-1, 2)
        for name, arr, hi in (("user", ui[:, 0], n_users), ("item", ui[:, 1], n_items),
                              ("item", ia[:, 0], n_items), ("attribute", ia[:, 1], n_attrs)):
            if arr.size and (arr.min() < 0 or arr.max() >= hi):
                raise GraphError(f"{name} index out of range [0, {hi})")
        return cls(n_users, n_items, n_attrs, ui[:, 0], ui[:, 1], ia[:, 0], ia[:, 1])

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items + self.n_attrs

    @property
    def n_ui_edges(self) -> int:
        return int(self.ui_users.size)

    @property
    def n_ia_edges(self) -> int:
        return int(self.ia_items.size)

    def _group(self, keys: np.ndarray, vals: np.ndarray, n: int) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(n)]
        for k, v in zip(keys.tolist(), vals.tolist()):
            out[k].append(v)
        return [sorted(x) for x in out]

    @property
    def user_neighbors(self) -> list[list[int]]:
        """Items adjacent to each user."""
        return self._group(self.ui_users, self.ui_items, self.n_users)

    @property
    def item_user_neighbors(self) -> list[list[int]]:
        return self._group(self.ui_items, self.ui_users, self.n_items)

    @property
    def item_attr_neighbors(self) -> list[list[int]]:
        return self._group(self.ia_items, self.ia_attrs, self.n_items)

    def full_view(self) -> "MessageView":
        return MessageView(
            np.arange(self.n_ui_edges), np.arange(self.n_ui_edges), np.arange(self.n_ia_edges))

    def write_edge_list(self, path: str | Path) -> None:
        """Debug dump, one ``type_src id_src type_dst id_dst`` line per edge."""
        with Path(path).open("w") as fh:
            for u, v in zip(self.ui_users.tolist(), self.ui_items.tolist()):
                fh.write(f"user {u} item {v}\n")
            for v, a in zip(self.ia_items.tolist(), self.ia_attrs.tolist()):
                fh.write(f"item {v} attr {a}\n")


@dataclass(frozen=True, eq=False)
class MessageView:
    """Which directed messages flow in one forward pass.

    Each array holds indices into the graph's edge arrays:
    ``to_item`` selects user->item messages, ``to_user`` item->user
    messages, ``attr_to_item`` attribute->item messages.  The optional
    ``*_scale`` arrays (same length) multiply each surviving message;
    ``None`` means 1.
    """

    to_item: np.ndarray
    to_user: np.ndarray
    attr_to_item: np.ndarray
    to_item_scale: np.ndarray | None = None
    to_user_scale: np.ndarray | None = None
    attr_to_item_scale: np.ndarray | None = None


def build_graph(train: InteractionTable, attrs: AttributeTable | Sequence[Sequence[int]] | None = None,
                n_attrs: int | None = None) -> TripartiteGraph:
    """Graph over the training interactions and item attribute associations.

    ``attrs`` is either an :class:`AttributeTable` (aligned through the
    table's item ids) or per-item attribute index lists, in which case
    ``n_attrs`` is required.
    """
    if attrs is None:
        item_attrs: Sequence[Sequence[int]] = [()] * train.n_items
        n_attrs = n_attrs or 0
    elif isinstance(attrs, AttributeTable):
        item_attrs = attrs.align(train.item_ids)
        n_attrs = attrs.n_attrs
    else:
        item_attrs = attrs
        if n_attrs is None:
            raise GraphError("n_attrs is required with index-list attributes")
        if len(item_attrs) != train.n_items:
            raise GraphError(f"{len(item_attrs)} attribute lists for {train.n_items} items")

    if len(train) and (train.users.max() >= train.n_users or train.items.max() >= train.n_items):
        raise GraphError("interaction index out of range")
    ui = np.unique(np.stack([train.users, train.items], axis=1), axis=0).reshape(-1, 2)
    ia_pairs = [(v, int(a)) for v, labs in enumerate(item_attrs) for a in labs]
    ia = np.array(sorted(set(ia_pairs)), dtype=np.int64).reshape(-1, 2)
    if ia.size and (ia[:, 1].min() < 0 or ia[:, 1].max() >= n_attrs):
        raise GraphError(f"attribute index out of range [0, {n_attrs})")
    return TripartiteGraph(train.n_users, train.n_items, n_attrs, ui[:, 0], ui[:, 1], ia[:, 0], ia[:, 1])


@dataclass(frozen=True, eq=False)
class EdgeWeights:
    """Coefficient ``gamma[k]`` on the message from ``src[k]`` to ``dst[k]``."""

    src: np.ndarray
    dst: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """Normalized attention coefficients of one forward pass.

    For each item: ``item_users`` (user->item), ``item_attrs``
    (attribute->item) and ``item_self``; for each user: ``user_items``
    (item->user) and ``user_self``.
    """

    item_users: EdgeWeights
    item_attrs: EdgeWeights
    item_self: np.ndarray
    user_items: EdgeWeights
    user_self: np.ndarray

    def item_sums(self) -> np.ndarray:
        n = self.item_self.shape[0]
        return (self.item_self
                + np.bincount(self.item_users.dst, self.item_users.gamma, minlength=n)
                + np.bincount(self.item_attrs.dst, self.item_attrs.gamma, minlength=n))

    def user_sums(self) -> np.ndarray:
        n = self.user_self.shape[0]
        return self.user_self + np.bincount(self.user_items.dst, self.user_items.gamma, minlength=n)


@dataclass(frozen=True, eq=False)
class AttentionLaplacian:
    """Square CSR matrix with attention weights in the user/item block rows.

    Off-diagonal blocks: users receive from items, items receive from users
    and attributes.  The diagonal carries the self-connection weights; the
    attribute block-row is empty.
    """

    matrix: sp.csr_matrix
    n_users: int
    n_items: int
    n_attrs: int

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    @property
    def off_diagonal(self) -> sp.csr_matrix:
        m = self.matrix - sp.diags(self.diagonal)
        m = sp.csr_matrix(m)
        m.eliminate_zeros()
        return m


def assemble_laplacian(graph: TripartiteGraph, weights: AttentionWeights) -> AttentionLaplacian:
    nu, nv, na = graph.n_users, graph.n_items, graph.n_attrs
    _require_cover(weights.user_items, graph.ui_items, graph.ui_users, "item->user")
    _require_cover(weights.item_users, graph.ui_users, graph.ui_items, "user->item")
    _require_cover(weights.item_attrs, graph.ia_attrs, graph.ia_items, "attribute->item")
    if weights.user_self.shape != (nu,) or weights.item_self.shape != (nv,):
        raise GraphError("self-connection weights do not match node counts")

    rows = np.concatenate([
        weights.user_items.dst,
        nu + weights.item_users.dst,
        nu + weights.item_attrs.dst,
        np.arange(nu),
        nu + np.arange(nv),
    ])
    cols = np.concatenate([
        nu + weights.user_items.src,
        weights.item_users.src,
        nu + nv + weights.item_attrs.src,
        np.arange(nu),
        nu + np.arange(nv),
    ])
    vals = np.concatenate([
        weights.user_items.gamma, weights.item_users.gamma, weights.item_attrs.gamma,
        weights.user_self, weights.item_self,
    ])
    n = nu + nv + na
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return AttentionLaplacian(mat, nu, nv, na)


def _require_cover(w: EdgeWeights, src: np.ndarray, dst: np.ndarray, label: str) -> None:
    have = set(zip(w.src.tolist(), w.dst.tolist()))
    need = set(zip(src.tolist(), dst.tolist()))
    missing = need - have
    if missing:
        s, d = min(missing)
        raise GraphError(f"missing {label} coefficient for edge ({s}, {d})")
    extra = have - need
    if extra:
        s, d = min(extra)
        raise GraphError(f"{label} coefficient for non-edge ({s}, {d})")
