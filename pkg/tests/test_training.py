import math

import numpy as np
import pytest
from scipy import stats

from a2gcn.autodiff import Tape, Tensor
from a2gcn.checkpoint import Checkpoint, CheckpointError
from a2gcn.data import InteractionTable
from a2gcn.graph import TripartiteGraph
from a2gcn.synthetic import planted_preferences
from a2gcn.training import (DropoutSpec, EarlyStopping, TrainConfig, TrainingDiverged, apply_dropout, bpr_loss,
                            fit, sample_triplets)

from conftest import random_graph


def _table(pairs, n_users, n_items):
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return InteractionTable(arr[:, 0], arr[:, 1], tuple(map(str, range(n_users))), tuple(map(str, range(n_items))))


# -- sampling --------------------------------------------------------------------------


def test_one_batch_of_all_positives():
    rng = np.random.default_rng(0)
    pairs = sorted({(int(u), int(v)) for u, v in zip(rng.integers(0, 100, 3000), rng.integers(0, 400, 3000))})[:1000]
    t = _table(pairs, 100, 400)
    batches = list(sample_triplets(t, epoch_seed=1, batch_size=1024))
    assert len(batches) == 1 and batches[0][0].size == 1000
    u, vp, vn = batches[0]
    assert set(zip(u.tolist(), vp.tolist())) == t.pairs()
    assert not set(zip(u.tolist(), vn.tolist())) & t.pairs()


def test_batches_cover_every_pair_once():
    t = _table([(u, v) for u in range(10) for v in range(u % 4, 7)], 10, 9)
    seen = []
    for u, vp, _ in sample_triplets(t, 3, batch_size=7):
        assert u.size <= 7
        seen += list(zip(u.tolist(), vp.tolist()))
    assert len(seen) == len(t) and set(seen) == t.pairs()


def test_negatives_avoid_known_tables():
    t = _table([(0, 0), (1, 1)], 2, 4)
    held = _table([(0, 1), (0, 2)], 2, 4)
    for s in range(50):
        for u, _, vn in sample_triplets(t, s, known=[t, held]):
            assert vn[u == 0].tolist() == [3] * int((u == 0).sum())


def test_negative_distribution_is_uniform():
    # user 0 owns items 0..4 out of 25; 1e5 draws over the 20 others
    t = _table([(0, v) for v in range(5)] + [(1, 0)], 2, 25)
    counts = np.zeros(25)
    for s in range(20_000):
        for u, _, vn in sample_triplets(t, s):
            np.add.at(counts, vn[u == 0], 1)
    assert counts[:5].sum() == 0
    obs = counts[5:]
    assert obs.sum() == 100_000
    assert stats.chisquare(obs).pvalue > 0.001


def test_sampling_deterministic_per_seed():
    t = _table([(u, v) for u in range(5) for v in range(3)], 5, 10)
    a = [x.tolist() for b in sample_triplets(t, 9) for x in b]
    b = [x.tolist() for b in sample_triplets(t, 9) for x in b]
    assert a == b


def test_sampling_rejects_saturated_user():
    with pytest.raises(ValueError, match="every item"):
        list(sample_triplets(_table([(0, 0), (0, 1)], 1, 2), 0))


# -- loss -------------------------------------------------------------------------------


def test_bpr_symmetric_case():
    s = Tensor(np.array([0.3, -1.0]))
    assert float(bpr_loss(s, s).value) == pytest.approx(0.69314718056, abs=1e-9)


def test_bpr_large_margin():
    # -ln sigmoid(20) from 30-digit arithmetic
    loss = bpr_loss(Tensor(np.array([20.0])), Tensor(np.array([0.0])))
    assert float(loss.value) == pytest.approx(2.06115362031e-9, rel=1e-6)


def test_bpr_l2_term():
    theta = Tensor(np.array([3.0, 4.0]))
    loss = bpr_loss(Tensor(np.zeros(1)), Tensor(np.zeros(1)), [theta], lam=1.0)
    assert float(loss.value) == pytest.approx(math.log(2) + 25, abs=1e-9)


def test_bpr_gradient_sign():
    pos = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    neg = Tensor(np.array([0.5, 0.0]), requires_grad=True)
    with Tape() as tape:
        loss = bpr_loss(pos, neg)
    gp, gn = tape.gradient(loss, [pos, neg])
    assert np.all(gp < 0) and np.all(gn > 0)


# -- dropout ----------------------------------------------------------------------------


def test_zero_dropout_is_identity():
    g = random_graph(np.random.default_rng(1))
    view = apply_dropout(g, DropoutSpec(0.0, 0.0, seed=5))
    full = g.full_view()
    for name in ("to_item", "to_user", "attr_to_item"):
        np.testing.assert_array_equal(getattr(view, name), getattr(full, name))
    assert view.to_item_scale is None


def test_dropout_ratio_range():
    with pytest.raises(ValueError):
        DropoutSpec(node_drop_ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig(message_dropout=0.9)


def test_surviving_message_fraction():
    rng = np.random.default_rng(2)
    pairs = [(u, v) for u in range(30) for v in range(30) if rng.random() < 0.3]
    g = TripartiteGraph.from_edges(30, 30, 0, pairs)
    p_node, p_msg = 0.3, 0.2
    alive = 0.0
    trials = 10_000
    for s in range(trials):
        view = apply_dropout(g, DropoutSpec(p_msg, p_node, seed=s))
        alive += np.count_nonzero(view.to_item_scale)
    frac = alive / (trials * g.n_ui_edges)
    assert frac == pytest.approx((1 - p_node) * (1 - p_msg), abs=0.02)


def test_message_dropout_inverted_scaling():
    g = TripartiteGraph.from_edges(20, 20, 0, [(u, v) for u in range(20) for v in range(20)])
    view = apply_dropout(g, DropoutSpec(0.5, 0.0, seed=0))
    assert set(np.unique(view.to_user_scale).tolist()) == {0.0, 2.0}


def test_node_dropout_removes_all_outgoing_messages():
    g = TripartiteGraph.from_edges(40, 5, 0, [(u, v) for u in range(40) for v in range(5)])
    view = apply_dropout(g, DropoutSpec(0.0, 0.5, seed=3))
    senders = set(g.ui_users[view.to_item].tolist())
    for u in range(40):
        edges = np.flatnonzero(g.ui_users == u)
        kept = np.isin(edges, view.to_item)
        assert kept.all() if u in senders else not kept.any()


# -- early stopping ------------------------------------------------------------------------


def test_early_stop_flat_after_epoch_10():
    stop = EarlyStopping(50)
    for epoch in range(200):
        if stop.update(epoch, min(epoch, 10) / 10):
            break
    assert epoch == 60 and stop.best_epoch == 10


def test_early_stop_resets_on_improvement():
    stop = EarlyStopping(2)
    assert not stop.update(0, 0.1)
    assert not stop.update(1, 0.1)
    assert not stop.update(2, 0.2)
    assert not stop.update(3, 0.2)
    assert stop.update(4, 0.15)


# -- config ------------------------------------------------------------------------------------


def test_config_defaults_and_grid():
    c = TrainConfig()
    assert (c.batch_size, c.embedding_dim, c.learning_rate) == (1024, 64, 0.001)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.005)
    with pytest.raises(ValueError):
        TrainConfig(l2_lambda=3e-4)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 0.1})
    assert TrainConfig.from_dict(c.to_dict()) == c


# -- fit -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny():
    return planted_preferences(n_users=50, n_items=40, n_labels=4, labels_per_item=1, n_train=6, n_val=1,
                               n_test=2, seed=3)


def _cfg(**kw):
    base = dict(learning_rate=0.01, embedding_dim=16, max_epochs=21, patience_epochs=30, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_loss_decreases(tiny):
    res = fit(_cfg(), tiny)
    losses = [h["loss"] for h in res.history]
    assert np.mean(losses[1:21]) < losses[0]


def test_fit_deterministic_bytes(tiny, tmp_path):
    fit(_cfg(max_epochs=12, checkpoint_every=5), tiny, out_dir=tmp_path / "a")
    fit(_cfg(max_epochs=12, checkpoint_every=5), tiny, out_dir=tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["best.ckpt", "epoch_0005.ckpt", "epoch_0010.ckpt", "history.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert (tmp_path / "a" / "history.csv").read_text().splitlines()[0] == "epoch,loss,val_hr20,val_ndcg20"


def test_fit_frozen_metric_stops_after_patience(tiny):
    res = fit(_cfg(max_epochs=100, patience_epochs=4), tiny, validator=lambda p, e: (0.1, 0.1))
    assert res.stopped_epoch == 4 and len(res.history) == 5 and res.checkpoint.epoch == 0


def test_fit_without_attributes_for_gcn_b(tiny):
    res = fit(_cfg(variant="GCN_b", max_epochs=2), tiny)
    assert "attr_emb" not in res.checkpoint.params and res.checkpoint.n_attrs == 0


def test_frozen_attribute_embeddings(tiny):
    from a2gcn.model import init_params, VARIANTS
    res = fit(_cfg(max_epochs=2, train_attr_emb=False, dtype="float64"), tiny)
    init = init_params(tiny.n_users, tiny.n_items, tiny.attributes.n_attrs, 16, VARIANTS["A2-GCN"], seed=4)
    np.testing.assert_allclose(res.checkpoint.params["attr_emb"], init["attr_emb"].astype(np.float32))


def test_divergence_reports_epoch(tiny):
    calls = {"n": 0}

    def bad_validator(params, epoch):
        calls["n"] += 1
        params["w1"][:] = np.nan
        return 0.0, 0.0

    with pytest.raises(TrainingDiverged, match="epoch 1") as info:
        fit(_cfg(max_epochs=5), tiny, validator=bad_validator)
    assert info.value.checkpoint is not None and len(info.value.history) == 1


# -- checkpoint ----------------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"user_emb": rng.normal(size=(3, 4)).astype(np.float32), "w1": rng.normal(size=(4, 4)).astype(np.float32)}
    ck = Checkpoint(params, {"variant": "GCN_b", "batch_size": 1024}, 7, 0.25, 3, 5, 0)
    blob = ck.to_bytes()
    back = Checkpoint.from_bytes(blob)
    assert back.to_bytes() == blob
    assert (back.epoch, back.best_val_ndcg, back.n_items, back.dim) == (7, 0.25, 5, 4)
    np.testing.assert_array_equal(back.params["w1"], params["w1"])
    ck.save(tmp_path / "x.ckpt")
    assert Checkpoint.load(tmp_path / "x.ckpt").config == ck.config


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOTIT" + bytes(40))
    ck = Checkpoint({"user_emb": np.zeros((2, 2), np.float32)}, {}, 0, 0.0, 2, 1, 0).to_bytes()
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(ck[:-3])
