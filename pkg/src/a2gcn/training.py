"""Pairwise (BPR) training with dropout, Adam, and NDCG-based early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .checkpoint import Checkpoint
from .data import InteractionTable, PreparedData
from .evaluation import evaluate_embeddings
from .graph import MessageView, TripartiteGraph, build_graph
from .model import ModelParams, VariantConfig, embed, forward, init_params, variant_by_name
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LEARNING_RATES = (0.1, 0.01, 0.001, 0.0001)
L2_GRID = tuple(10.0 ** k for k in range(-5, 3))
DROPOUT_GRID = tuple(round(0.1 * k, 1) for k in range(9))


def _on_grid(x: float, grid: Sequence[float]) -> bool:
    return any(math.isclose(x, g, rel_tol=1e-9, abs_tol=1e-12) for g in grid)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    l2_lambda: float = 1e-4
    message_dropout: float = 0.1
    node_dropout: float = 0.0
    batch_size: int = 1024
    embedding_dim: int = 64
    max_epochs: int = 400
    patience_epochs: int = 50
    checkpoint_every: int = 10
    seed: int = 0
    variant: str = "A2-GCN"
    leaky_slope: float = 0.2
    learn_self_score: bool = False
    train_attr_emb: bool = True
    dtype: str = "float32"
    top_n: int = 20

    def __post_init__(self):
        if not _on_grid(self.learning_rate, LEARNING_RATES):
            raise ValueError(f"learning_rate {self.learning_rate} not in {LEARNING_RATES}")
        if not _on_grid(self.l2_lambda, L2_GRID):
            raise ValueError(f"l2_lambda {self.l2_lambda} not in the 1e-5..1e2 decade grid")
        for name in ("message_dropout", "node_dropout"):
            if not _on_grid(getattr(self, name), DROPOUT_GRID):
                raise ValueError(f"{name} must be one of {DROPOUT_GRID}")
        for name in ("batch_size", "embedding_dim", "max_epochs", "patience_epochs", "checkpoint_every", "top_n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        variant_by_name(self.variant)

    @property
    def variant_config(self) -> VariantConfig:
        return variant_by_name(self.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DropoutSpec:
    message_drop_ratio: float = 0.0
    node_drop_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for r in (self.message_drop_ratio, self.node_drop_ratio):
            if not 0.0 <= r <= 0.8:
                raise ValueError(f"drop ratio {r} outside [0, 0.8]")


def apply_dropout(graph: TripartiteGraph, spec: DropoutSpec) -> MessageView:
    """Sample which messages flow in one training pass.

    Node dropout silences every outgoing message of a dropped node (its own
    self-connection is kept); attention then normalizes over the remaining
    neighbors.  Message dropout zeroes surviving messages independently and
    scales the rest by ``1 / (1 - p)``.
    """
    if spec.message_drop_ratio == 0 and spec.node_drop_ratio == 0:
        return graph.full_view()
    rng = np.random.default_rng(spec.seed)
    p_node, p_msg = spec.node_drop_ratio, spec.message_drop_ratio
    keep_u = rng.random(graph.n_users) >= p_node
    keep_v = rng.random(graph.n_items) >= p_node
    keep_a = rng.random(graph.n_attrs) >= p_node
    to_item = np.flatnonzero(keep_u[graph.ui_users])
    to_user = np.flatnonzero(keep_v[graph.ui_items])
    attr_to_item = np.flatnonzero(keep_a[graph.ia_attrs])

    def msg_scale(k: int) -> np.ndarray | None:
        if p_msg == 0:
            return None
        return (rng.random(k) >= p_msg) / (1.0 - p_msg)

    return MessageView(to_item, to_user, attr_to_item,
                       msg_scale(to_item.size), msg_scale(to_user.size), msg_scale(attr_to_item.size))


def sample_triplets(train: InteractionTable, epoch_seed: int, batch_size: int = 1024,
                    known: InteractionTable | Sequence[InteractionTable] | None = None
                    ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(users, positives, negatives)`` batches covering every training pair once.

    Negatives are uniform over items the user never interacted with in
    ``known`` (defaults to ``train``).
    """
    if len(train) == 0:
        raise ValueError("no training interactions")
    tables = [train] if known is None else ([known] if isinstance(known, InteractionTable) else list(known))
    n_items = train.n_items
    ku = np.concatenate([t.users for t in tables])
    kv = np.concatenate([t.items for t in tables])
    keys = np.unique(ku * n_items + kv)
    deg = np.bincount(keys // n_items, minlength=train.n_users)
    full = np.flatnonzero(deg[np.unique(train.users)] >= n_items)
    if full.size:
        raise ValueError(f"user {np.unique(train.users)[full[0]]} interacted with every item; no negative to sample")

    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(train))
    users, pos = train.users[order], train.items[order]
    neg = rng.integers(0, n_items, size=users.size)
    bad = np.flatnonzero(np.isin(users * n_items + neg, keys))
    while bad.size:
        neg[bad] = rng.integers(0, n_items, size=bad.size)
        bad = bad[np.isin(users[bad] * n_items + neg[bad], keys)]
    for i in range(0, users.size, batch_size):
        yield users[i:i + batch_size], pos[i:i + batch_size], neg[i:i + batch_size]


def bpr_loss(pos_scores: Tensor, neg_scores: Tensor, reg: Sequence[Tensor] = (), lam: float = 0.0) -> Tensor:
    """``mean(-log sigmoid(pos - neg)) + lam * sum ||reg||^2 / batch``."""
    if pos_scores.shape != neg_scores.shape:
        raise ad.ShapeError(f"bpr_loss: {pos_scores.shape} vs {neg_scores.shape}")
    if not (np.all(np.isfinite(pos_scores.value)) and np.all(np.isfinite(neg_scores.value))):
        raise NonFiniteError("bpr_loss: non-finite scores")
    batch = pos_scores.shape[0]
    loss = ad.scale(ad.mean_all(ad.log_sigmoid(ad.sub(pos_scores, neg_scores))), -1.0)
    if reg and lam:
        total = ad.square_sum(reg[0])
        for t in reg[1:]:
            total = ad.add(total, ad.square_sum(t))
        loss = ad.add(loss, ad.scale(total, lam / batch))
    return loss


def batch_loss(P: dict[str, Tensor], graph: TripartiteGraph, variant: VariantConfig,
               users: np.ndarray, pos: np.ndarray, neg: np.ndarray, lam: float,
               view: MessageView | None = None, slope: float = 0.2,
               reg_names: Sequence[str] | None = None) -> Tensor:
    """Full objective on one batch: forward, scores, BPR term, and L2 term.

    The L2 term covers the batch's own user/item embeddings plus every
    parameter in ``reg_names`` other than user/item embeddings.
    """
    out = forward(P, graph, variant, view, slope)
    eu = ad.gather(out.users, users)
    pos_s = ad.row_dot(eu, ad.gather(out.items, pos))
    neg_s = ad.row_dot(eu, ad.gather(out.items, neg))
    names = P.keys() if reg_names is None else reg_names
    reg = [ad.gather(P["user_emb"], users), ad.gather(P["item_emb"], pos), ad.gather(P["item_emb"], neg)]
    reg += [P[k] for k in names if k not in ("user_emb", "item_emb")]
    return bpr_loss(pos_s, neg_s, reg, lam)


class EarlyStopping:
    """Stop once the metric has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when training should stop."""
        if value > self.best:
            self.best, self.best_epoch = value, epoch
        return epoch - self.best_epoch >= self.patience


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint | None, history: list[dict]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0


HISTORY_FIELDS = ("epoch", "loss", "val_hr20", "val_ndcg20")


def write_history(history: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["val_hr20"]), repr(row["val_ndcg20"])])


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def fit(config: TrainConfig, data: PreparedData, attributes=None, out_dir: str | Path | None = None,
        validator: Callable[[ModelParams, int], tuple[float, float]] | None = None) -> FitResult:
    """Train one model on ``data.split.train``; select by validation NDCG.

    ``attributes`` overrides ``data.attributes`` (used by the attribute
    removal experiment).  ``validator(params, epoch) -> (hr, ndcg)`` replaces
    the built-in validation.  With ``out_dir``, a checkpoint is written every
    ``checkpoint_every`` epochs plus ``best.ckpt`` and ``history.csv``.
    """
    variant = config.variant_config
    dtype = np.dtype(config.dtype)
    split_ = data.split
    train = split_.train
    if variant.use_attributes:
        attrs = attributes if attributes is not None else data.attributes
        graph = build_graph(train, attrs)
        n_attrs = attrs.n_attrs
    else:
        graph = build_graph(train, None)
        n_attrs = 0

    params = init_params(train.n_users, train.n_items, n_attrs, config.embedding_dim, variant,
                         config.seed, dtype, config.learn_self_score)
    trainable = [k for k in params if config.train_attr_emb or k != "attr_emb"]
    state = AdamState(lr=config.learning_rate)
    known = [split_.train, split_.validation, split_.test]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def snapshot(epoch: int, best: float) -> Checkpoint:
        return Checkpoint({k: v.astype(np.float32) for k, v in params.items()}, config.to_dict(),
                          epoch, best, train.n_users, train.n_items, n_attrs)

    def validate(epoch: int) -> tuple[float, float]:
        if validator is not None:
            return validator(params, epoch)
        if len(split_.validation) == 0:
            return 0.0, 0.0
        users, items = embed(params, graph, variant, config.leaky_slope)
        rep = evaluate_embeddings(users, items, split_.validation, [train], n=config.top_n)
        return rep.hr, rep.ndcg

    stopper = EarlyStopping(config.patience_epochs)
    best_ckpt: Checkpoint | None = None
    history: list[dict] = []
    epoch = 0
    for epoch in range(config.max_epochs):
        total, count = 0.0, 0
        batches = sample_triplets(train, _seed(config.seed, epoch, 1), config.batch_size, known)
        for b, (u, vp, vn) in enumerate(batches):
            view = apply_dropout(graph, DropoutSpec(config.message_dropout, config.node_dropout,
                                                    _seed(config.seed, epoch, 2, b)))
            P = {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in params.items()}
            with Tape() as tape:
                try:
                    loss = batch_loss(P, graph, variant, u, vp, vn, config.l2_lambda, view,
                                      config.leaky_slope, trainable)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}", best_ckpt, history) from None
            lv = float(loss.value)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"epoch {epoch}: loss is {lv}", best_ckpt, history)
            grads = tape.gradient(loss, [P[k] for k in trainable])
            try:
                adam_step(params, dict(zip(trainable, grads)), state)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best_ckpt, history) from None
            total += lv * u.size
            count += u.size

        hr, ndcg = validate(epoch)
        history.append({"epoch": epoch, "loss": total / count, "val_hr20": hr, "val_ndcg20": ndcg})
        stop = stopper.update(epoch, ndcg)
        if stopper.best_epoch == epoch:
            best_ckpt = snapshot(epoch, ndcg)
        log.debug("epoch %d loss %.6f val hr %.4f ndcg %.4f", epoch, total / count, hr, ndcg)
        if out is not None and (epoch + 1) % config.checkpoint_every == 0:
            snapshot(epoch, stopper.best).save(out / f"epoch_{epoch + 1:04d}.ckpt")
        if stop:
            break

    assert best_ckpt is not None
    if out is not None:
        best_ckpt.save(out / "best.ckpt")
        write_history(history, out / "history.csv")
    return FitResult(best_ckpt, history, epoch)
