"""Forward pass of the attribute-aware attentive GCN recommender.

One propagation layer.  Items aggregate messages from their users and
attributes, users aggregate messages from their items, and every node keeps
a weighted self-message.  Message weights come from a softmax over cosine
scores; on the user side the item is first enriched with the mean of its
attribute embeddings (attribute-aware attention).

Weight matrices are stored in right-multiply layout (``E @ W``) because
embeddings are rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import (AttentionLaplacian, AttentionWeights, EdgeWeights, MessageView,
                    TripartiteGraph)
from .optim import xavier_init

ModelParams = dict[str, np.ndarray]

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class VariantConfig:
    use_attributes: bool = True
    use_attention: bool = True
    attribute_aware_attention: bool = True
    use_propagation: bool = True

    def __post_init__(self):
        if self.attribute_aware_attention and not (self.use_attention and self.use_attributes):
            raise ValueError("attribute-aware attention needs both attention and attributes")


VARIANTS: dict[str, VariantConfig] = {
    "GCN_b": VariantConfig(use_attributes=False, use_attention=False, attribute_aware_attention=False),
    "A-GCN_am": VariantConfig(use_attributes=False, attribute_aware_attention=False),
    "A-GCN_att": VariantConfig(use_attention=False, attribute_aware_attention=False),
    "A2-GCN_v": VariantConfig(attribute_aware_attention=False),
    "A2-GCN": VariantConfig(),
    "BPR-MF": VariantConfig(use_attributes=False, use_attention=False,
                            attribute_aware_attention=False, use_propagation=False),
}

ABLATION_ORDER = ("GCN_b", "A-GCN_am", "A-GCN_att", "A2-GCN_v", "A2-GCN")


def _norm_name(name: str) -> str:
    return name.lower().replace("²", "2").replace("-", "").replace("_", "")


def variant_by_name(name: str) -> VariantConfig:
    for key, cfg in VARIANTS.items():
        if _norm_name(key) == _norm_name(name):
            return cfg
    raise KeyError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


def param_names(variant: VariantConfig, learn_self_score: bool = False) -> list[str]:
    names = ["user_emb", "item_emb"]
    if variant.use_attributes:
        names.append("attr_emb")
    if variant.use_propagation:
        names += ["w1", "w2"]
    if variant.use_attention:
        names += ["w_vu", "w_uv"]
        if variant.use_attributes:
            names.append("w_va")
        if variant.attribute_aware_attention:
            names.append("w_a")
        if learn_self_score:
            names += ["self_score_item", "self_score_user"]
    return names


def init_params(n_users: int, n_items: int, n_attrs: int, dim: int = 64,
                variant: VariantConfig = VariantConfig(), seed: int = 0,
                dtype=np.float64, learn_self_score: bool = False) -> ModelParams:
    """Xavier-uniform initial parameters for ``variant``."""
    rng = np.random.default_rng(seed)
    shapes = {
        "user_emb": (n_users, dim), "item_emb": (n_items, dim), "attr_emb": (n_attrs, dim),
        "w1": (dim, dim), "w2": (dim, dim),
        "w_vu": (dim, dim), "w_uv": (dim, dim), "w_va": (dim, dim), "w_a": (dim, dim),
    }
    params: ModelParams = {}
    for name in param_names(variant, learn_self_score):
        if name.startswith("self_score"):
            params[name] = np.ones(1, dtype=dtype)
            continue
        rows, cols = shapes[name]
        params[name] = xavier_init(rows, cols, rng, dtype) if rows else np.zeros((0, cols), dtype)
    return params


def _tensors(params: Mapping[str, np.ndarray | Tensor]) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v, name=k) for k, v in params.items()}


@dataclass(frozen=True, eq=False)
class _Edges:
    src: np.ndarray
    dst: np.ndarray
    gamma: Tensor


@dataclass(frozen=True, eq=False)
class _Attention:
    item_users: _Edges
    item_attrs: _Edges
    item_self: Tensor
    user_items: _Edges
    user_self: Tensor

    def numpy(self) -> AttentionWeights:
        def ew(e: _Edges) -> EdgeWeights:
            return EdgeWeights(e.src, e.dst, e.gamma.value.copy())
        return AttentionWeights(ew(self.item_users), ew(self.item_attrs), self.item_self.value.copy(),
                                ew(self.user_items), self.user_self.value.copy())


def _self_scores(P: dict[str, Tensor], key: str, n: int, dtype) -> Tensor:
    if key in P:
        return ad.gather(P[key], np.zeros(n, dtype=np.int64))
    # cos(e, e) = 1 for the self-connection
    return Tensor(np.ones(n, dtype=dtype))


def _compute_attention(P: dict[str, Tensor], graph: TripartiteGraph, variant: VariantConfig,
                       view: MessageView) -> _Attention:
    nu, nv = graph.n_users, graph.n_items
    E_u, E_v = P["user_emb"], P["item_emb"]
    dtype = E_u.dtype
    i_src = graph.ui_users[view.to_item]
    i_dst = graph.ui_items[view.to_item]
    u_src = graph.ui_items[view.to_user]
    u_dst = graph.ui_users[view.to_user]
    if variant.use_attributes:
        a_src = graph.ia_attrs[view.attr_to_item]
        a_dst = graph.ia_items[view.attr_to_item]
    else:
        a_src = a_dst = np.zeros(0, dtype=np.int64)

    if variant.use_attention:
        s_iu = ad.cosine_similarity(ad.gather(E_v, i_dst), ad.gather(ad.matmul(E_u, P["w_vu"]), i_src))
        if a_src.size:
            s_ia = ad.cosine_similarity(ad.gather(E_v, a_dst),
                                        ad.gather(ad.matmul(P["attr_emb"], P["w_va"]), a_src))
        else:
            s_ia = Tensor(np.zeros(0, dtype=dtype))
        s_iself = _self_scores(P, "self_score_item", nv, dtype)

        if variant.attribute_aware_attention:
            # mean attribute embedding per item; items without attributes get 0
            ctx = ad.segment_mean(ad.gather(P["attr_emb"], graph.ia_attrs), graph.ia_items, nv)
            item_key = ad.add(E_v, ad.matmul(ctx, P["w_a"]))
        else:
            item_key = E_v
        s_ui = ad.cosine_similarity(ad.gather(E_u, u_dst), ad.gather(ad.matmul(item_key, P["w_uv"]), u_src))
        s_uself = _self_scores(P, "self_score_user", nu, dtype)
    else:
        s_iu = Tensor(np.zeros(i_src.size, dtype=dtype))
        s_ia = Tensor(np.zeros(a_src.size, dtype=dtype))
        s_iself = Tensor(np.zeros(nv, dtype=dtype))
        s_ui = Tensor(np.zeros(u_src.size, dtype=dtype))
        s_uself = Tensor(np.zeros(nu, dtype=dtype))

    k1, k2 = i_src.size, a_src.size
    g_item = ad.segment_softmax(ad.concat([s_iu, s_ia, s_iself]),
                                np.concatenate([i_dst, a_dst, np.arange(nv)]), nv)
    g_user = ad.segment_softmax(ad.concat([s_ui, s_uself]), np.concatenate([u_dst, np.arange(nu)]), nu)
    return _Attention(
        _Edges(i_src, i_dst, ad.gather(g_item, np.arange(k1))),
        _Edges(a_src, a_dst, ad.gather(g_item, np.arange(k1, k1 + k2))),
        ad.gather(g_item, np.arange(k1 + k2, k1 + k2 + nv)),
        _Edges(u_src, u_dst, ad.gather(g_user, np.arange(u_src.size))),
        ad.gather(g_user, np.arange(u_src.size, u_src.size + nu)),
    )


def _scaled(gamma: Tensor, scale: np.ndarray | None) -> Tensor:
    return gamma if scale is None else ad.mul(gamma, Tensor(scale.astype(gamma.dtype, copy=False)))


def _messages(P: dict[str, Tensor], src_emb: Tensor, dst_emb: Tensor, src: np.ndarray, dst: np.ndarray,
              coef: Tensor, n_dst: int) -> Tensor:
    """Sum over edges of ``coef * (W1 e_src + W2 (e_src * e_dst))`` into each destination."""
    es = ad.gather(src_emb, src)
    inter = ad.mul(es, ad.gather(dst_emb, dst))
    msg = ad.add(ad.matmul(es, P["w1"]), ad.matmul(inter, P["w2"]))
    return ad.scatter_add(ad.mul_rows(msg, coef), dst, n_dst)


def _aggregate(P: dict[str, Tensor], att: _Attention, view: MessageView | None,
               use_attributes: bool, slope: float) -> tuple[Tensor, Tensor]:
    E_u, E_v = P["user_emb"], P["item_emb"]
    nu, nv = E_u.shape[0], E_v.shape[0]
    sc = view or MessageView(None, None, None)

    item_in = ad.add(
        ad.mul_rows(ad.matmul(E_v, P["w1"]), att.item_self),
        _messages(P, E_u, E_v, att.item_users.src, att.item_users.dst,
                  _scaled(att.item_users.gamma, sc.to_item_scale), nv),
    )
    if use_attributes and att.item_attrs.src.size:
        item_in = ad.add(item_in, _messages(P, P["attr_emb"], E_v, att.item_attrs.src, att.item_attrs.dst,
                                            _scaled(att.item_attrs.gamma, sc.attr_to_item_scale), nv))
    user_in = ad.add(
        ad.mul_rows(ad.matmul(E_u, P["w1"]), att.user_self),
        _messages(P, E_v, E_u, att.user_items.src, att.user_items.dst,
                  _scaled(att.user_items.gamma, sc.to_user_scale), nu),
    )
    return ad.leaky_relu(user_in, slope), ad.leaky_relu(item_in, slope)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    users: Tensor
    items: Tensor
    attention: AttentionWeights | None


def forward(params: Mapping[str, np.ndarray | Tensor], graph: TripartiteGraph,
            variant: VariantConfig = VariantConfig(), view: MessageView | None = None,
            slope: float = LEAKY_SLOPE) -> ForwardResult:
    """Attention, then one propagation layer.  Differentiable on an active tape.

    ``view`` restricts and rescales messages (dropout); defaults to the
    whole graph.
    """
    P = _tensors(params)
    if not variant.use_propagation:
        return ForwardResult(P["user_emb"], P["item_emb"], None)
    view = view or graph.full_view()
    att = _compute_attention(P, graph, variant, view)
    users, items = _aggregate(P, att, view, variant.use_attributes, slope)
    return ForwardResult(users, items, att.numpy())


def attention_weights(params: Mapping[str, np.ndarray], graph: TripartiteGraph,
                      variant: VariantConfig = VariantConfig(),
                      view: MessageView | None = None) -> AttentionWeights:
    return _compute_attention(_tensors(params), graph, variant, view or graph.full_view()).numpy()


def item_attention(params: Mapping[str, np.ndarray], graph: TripartiteGraph, v: int,
                   variant: VariantConfig = VariantConfig()) -> dict:
    """``{"users": {u: w}, "attrs": {a: w}, "self": w}`` for item ``v``."""
    if not 0 <= v < graph.n_items:
        raise IndexError(f"item {v} out of range")
    w = attention_weights(params, graph, variant)
    users = {int(s): float(g) for s, d, g in zip(w.item_users.src, w.item_users.dst, w.item_users.gamma) if d == v}
    attrs = {int(s): float(g) for s, d, g in zip(w.item_attrs.src, w.item_attrs.dst, w.item_attrs.gamma) if d == v}
    return {"users": users, "attrs": attrs, "self": float(w.item_self[v])}


def user_attention(params: Mapping[str, np.ndarray], graph: TripartiteGraph, u: int,
                   attribute_aware: bool = True) -> dict:
    """``{"items": {v: w}, "self": w}`` for user ``u``."""
    if not 0 <= u < graph.n_users:
        raise IndexError(f"user {u} out of range")
    variant = VariantConfig(attribute_aware_attention=attribute_aware)
    w = attention_weights(params, graph, variant)
    items = {int(s): float(g) for s, d, g in zip(w.user_items.src, w.user_items.dst, w.user_items.gamma) if d == u}
    return {"items": items, "self": float(w.user_self[u])}


def propagate(params: Mapping[str, np.ndarray], graph: TripartiteGraph, weights: AttentionWeights,
              variant: VariantConfig = VariantConfig(), view: MessageView | None = None,
              slope: float = LEAKY_SLOPE) -> tuple[np.ndarray, np.ndarray]:
    """Node-wise message passing with fixed attention weights.

    Messages flow exactly along the edges listed in ``weights``; ``view``
    only contributes its per-message dropout scales.
    """
    if not variant.use_propagation:
        return params["user_emb"], params["item_emb"]
    nu, nv = graph.n_users, graph.n_items
    if weights.user_self.shape != (nu,) or weights.item_self.shape != (nv,):
        raise ValueError("attention weights do not match graph size")
    for e, n_src, n_dst in ((weights.item_users, nu, nv), (weights.item_attrs, graph.n_attrs, nv),
                            (weights.user_items, nv, nu)):
        if e.src.size and (e.src.max() >= n_src or e.dst.max() >= n_dst):
            raise ValueError("attention weights reference nodes outside the graph")

    def te(e: EdgeWeights) -> _Edges:
        return _Edges(e.src, e.dst, Tensor(e.gamma))

    att = _Attention(te(weights.item_users), te(weights.item_attrs), Tensor(weights.item_self),
                     te(weights.user_items), Tensor(weights.user_self))
    users, items = _aggregate(_tensors(params), att, view, variant.use_attributes, slope)
    return users.value, items.value


def propagate_matrix(params: Mapping[str, np.ndarray], laplacian: AttentionLaplacian,
                     slope: float = LEAKY_SLOPE) -> tuple[np.ndarray, np.ndarray]:
    """Whole-graph propagation as ``LeakyReLU(L E W1 + ((L - D) E * E) W2)``.

    ``L`` carries the self weights ``D`` on its diagonal.  Attribute rows are
    computed by nothing and never returned.
    """
    nu, nv, na = laplacian.n_users, laplacian.n_items, laplacian.n_attrs
    E_u, E_v = params["user_emb"], params["item_emb"]
    d = E_u.shape[1]
    E_a = params.get("attr_emb")
    if E_a is None:
        E_a = np.zeros((na, d), dtype=E_u.dtype)
    if E_u.shape[0] != nu or E_v.shape[0] != nv or E_a.shape[0] != na:
        raise ValueError(f"embedding rows ({E_u.shape[0]}, {E_v.shape[0]}, {E_a.shape[0]}) "
                         f"do not match Laplacian blocks ({nu}, {nv}, {na})")
    E = np.vstack([E_u, E_v, E_a])
    L = laplacian.matrix[: nu + nv]
    L_off = laplacian.off_diagonal[: nu + nv]
    pre = (L @ E) @ params["w1"] + ((L_off @ E) * E[: nu + nv]) @ params["w2"]
    out = np.where(pre > 0, pre, slope * pre)
    return out[:nu], out[nu:]


def predict(user_emb: np.ndarray, item_emb: np.ndarray, u: int, v: int) -> float:
    """Preference score: inner product of propagated embeddings."""
    return float(np.dot(user_emb[u], item_emb[v]))


def embed(params: Mapping[str, np.ndarray], graph: TripartiteGraph,
          variant: VariantConfig = VariantConfig(), slope: float = LEAKY_SLOPE) -> tuple[np.ndarray, np.ndarray]:
    """Propagated (user, item) embeddings without dropout, for evaluation."""
    out = forward(params, graph, variant, None, slope)
    return out.users.value, out.items.value
