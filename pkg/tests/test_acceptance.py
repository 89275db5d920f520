"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that is printed in the terminal summary.
The synthetic pipelines (criteria 5, 6, 7, 9) share cached training runs.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from a2gcn.autodiff import Tensor, grad_check
from a2gcn.data import (InteractionTable, PreparedData, kcore_filter, load_attributes, load_interactions,
                        remove_attributes, split)
from a2gcn.evaluation import evaluate, hr_at_n, ndcg_at_n
from a2gcn.graph import assemble_laplacian, build_graph
from a2gcn.model import VARIANTS, attention_weights, init_params, propagate, propagate_matrix
from a2gcn.synthetic import planted_preferences
from a2gcn.training import TrainConfig, batch_loss, fit

from conftest import ACCEPTANCE, random_graph

SEEDS = (0, 1, 2)
RATIOS = (0.0, 0.2, 0.4, 0.6, 0.8)
# shared training regime for the synthetic pipelines
SYNTH_TRAIN = dict(learning_rate=0.01, l2_lambda=1e-2, max_epochs=200, patience_epochs=40)


def record(k: int, ok: bool | None, detail: str) -> None:
    """``ok=None`` marks a skipped criterion."""
    ACCEPTANCE[k] = (ok, detail)
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    print(f"criterion {k}: {status}  {detail}")


# -- synthetic pipeline cache ------------------------------------------------------

_RUNS: dict[tuple, dict] = {}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def pipeline(workdir: Path, variant: str, seed: int, ratio: float = 0.0, tag: str = "a") -> dict:
    key = (variant, seed, ratio, tag)
    if key not in _RUNS:
        data = planted_preferences(seed=seed)
        attrs = remove_attributes(data.attributes, ratio, seed) if ratio else None
        cfg = TrainConfig(variant=variant, seed=seed, **SYNTH_TRAIN)
        out = workdir / f"{tag}_{variant}_{seed}_{ratio:.1f}"
        t0 = time.perf_counter()
        res = fit(cfg, data, attributes=attrs, out_dir=out)
        rep = evaluate(res.checkpoint, data, attributes=attrs)
        _RUNS[key] = {"hr": rep.hr, "ndcg": rep.ndcg, "history": res.history, "out": out,
                      "seconds": time.perf_counter() - t0}
    return _RUNS[key]


# -- 1: gradients ------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    pairs = np.array([(0, 0), (0, 2), (1, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 4), (4, 1)])
    table = InteractionTable(pairs[:, 0], pairs[:, 1], tuple("uvwxy"), tuple("abcde"))
    graph = build_graph(table, [[0, 1], [2], [], [1], [0, 2]], n_attrs=3)
    users, pos, neg = np.array([0, 1, 3, 4]), np.array([2, 1, 4, 4]), np.array([1, 4, 2, 0])
    worst = 0.0
    for name, variant in VARIANTS.items():
        raw = init_params(5, 5, 3, 4, variant, seed=3, dtype=np.float64, learn_self_score=variant.use_attention)
        for k in raw:
            raw[k] = raw[k] + rng.normal(0, 0.3, raw[k].shape)
        P = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        err = grad_check(lambda: batch_loss(P, graph, variant, users, pos, neg, 0.1), list(P.values()), 1e-4)
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed < 10
    record(1, ok, f"max relative gradient error {worst:.2e} over {len(VARIANTS)} variants, {elapsed:.1f}s")
    assert ok


# -- 2: matrix form ------------------------------------------------------------------


def test_criterion_2_matrix_form_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        graph = random_graph(rng, max_nodes=30)
        variant = VARIANTS["A2-GCN"]
        params = init_params(graph.n_users, graph.n_items, graph.n_attrs, 5, variant, seed=i, dtype=np.float64)
        w = attention_weights(params, graph, variant)
        nu, nv = propagate(params, graph, w, variant)
        mu, mv = propagate_matrix(params, assemble_laplacian(graph, w))
        worst = max(worst, float(np.abs(nu - mu).max(initial=0)), float(np.abs(nv - mv).max(initial=0)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10
    record(2, ok, f"max abs difference {worst:.1e} on 100 graphs, {elapsed:.1f}s")
    assert ok


# -- 3: attention normalization ---------------------------------------------------------


def test_criterion_3_attention_normalization():
    rng = np.random.default_rng(3)
    checked, worst, min_gamma = 0, 0.0, math.inf
    names = [n for n, v in VARIANTS.items() if v.use_attention]
    while checked < 1000:
        graph = random_graph(rng)
        variant = VARIANTS[names[int(rng.integers(len(names)))]]
        params = init_params(graph.n_users, graph.n_items, graph.n_attrs, 6, variant,
                             seed=int(rng.integers(1 << 30)), dtype=np.float64)
        for k in params:
            params[k] = params[k] * rng.uniform(0.5, 5.0)
        w = attention_weights(params, graph, variant)
        sums = np.concatenate([w.item_sums(), w.user_sums()])
        worst = max(worst, float(np.abs(sums - 1).max()))
        gammas = np.concatenate([w.item_users.gamma, w.item_attrs.gamma, w.item_self,
                                 w.user_items.gamma, w.user_self])
        min_gamma = min(min_gamma, float(gammas.min()))
        checked += sums.size
    ok = worst <= 1e-9 and min_gamma > 0
    record(3, ok, f"{checked} nodes, max |sum - 1| {worst:.1e}, min gamma {min_gamma:.2e}")
    assert ok


# -- 4: metric oracle --------------------------------------------------------------------


def _brute_hr(order, test, n):
    return sum(1 for v in order[:n] if v in test) / len(test)


def _brute_ndcg(order, test, n):
    dcg = 0.0
    for i in range(min(n, len(order))):
        if order[i] in test:
            dcg += 1.0 / math.log2(i + 2)
    idcg = 0.0
    for i in range(min(n, len(test))):
        idcg += 1.0 / math.log2(i + 2)
    return dcg / idcg


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        n_items = int(rng.integers(1, 60))
        order = rng.permutation(n_items).tolist()
        test = set(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False).tolist())
        n = int(rng.integers(1, 30))
        if hr_at_n(order, test, n) != _brute_hr(order, test, n):
            mismatches += 1
        if ndcg_at_n(order, test, n) != _brute_ndcg(order, test, n):
            mismatches += 1
    perfect = ndcg_at_n([3, 1, 4, 0, 2], {3, 1, 4}, 20)
    ok = mismatches == 0 and perfect == 1.0
    record(4, ok, f"{mismatches} mismatches on 1000 instances, perfect NDCG {perfect}")
    assert ok


# -- 5: synthetic recoverability ------------------------------------------------------------


def test_criterion_5_synthetic_recoverability(workdir):
    t0 = time.perf_counter()
    a2 = [pipeline(workdir, "A2-GCN", s)["hr"] for s in SEEDS]
    base = [pipeline(workdir, "GCN_b", s)["hr"] for s in SEEDS]
    elapsed = time.perf_counter() - t0
    hr_a2, hr_b = float(np.mean(a2)), float(np.mean(base))
    ok = hr_a2 >= 0.60 and hr_a2 - hr_b >= 0.05 and elapsed < 300
    record(5, ok, f"A2-GCN HR@20 {hr_a2:.3f} vs GCN_b {hr_b:.3f} (gap {hr_a2 - hr_b:+.3f}, need >= 0.60 "
                  f"and +0.05), {elapsed:.0f}s")
    assert ok


# -- 6: attribute-missing robustness --------------------------------------------------------------


def test_criterion_6_attribute_missing_robustness(workdir):
    t0 = time.perf_counter()
    hrs = [pipeline(workdir, "A2-GCN", 0, r)["hr"] for r in RATIOS]
    base = pipeline(workdir, "GCN_b", 0)["hr"]
    elapsed = time.perf_counter() - t0
    steps = [b - a for a, b in zip(hrs, hrs[1:])]
    # HR values are multiples of 1/400, so compare with a rounding margin
    ok = all(s <= 0.02 + 1e-12 for s in steps) and hrs[-1] >= base - 0.01 and elapsed < 1500
    sweep = ", ".join(f"{r:.1f}:{h:.3f}" for r, h in zip(RATIOS, hrs))
    record(6, ok, f"HR@20 by ratio {sweep}; GCN_b {base:.3f}; max rise {max(steps):+.3f}")
    assert ok


# -- 7: training sanity ----------------------------------------------------------------------------


def test_criterion_7_training_sanity(workdir):
    hist = pipeline(workdir, "A2-GCN", 0)["history"]
    assert len(hist) >= 20
    early = float(np.mean([h["loss"] for h in hist[0:5]]))
    late = float(np.mean([h["loss"] for h in hist[15:20]]))

    patience = 7
    data = planted_preferences(seed=0)
    cfg = TrainConfig(seed=0, **{**SYNTH_TRAIN, "max_epochs": 100, "patience_epochs": patience})
    frozen = fit(cfg, data, validator=lambda params, epoch: (0.5, 0.25), out_dir=workdir / "frozen_a")
    _RUNS["frozen"] = {"out": workdir / "frozen_a"}
    stopped_ok = frozen.stopped_epoch == patience and len(frozen.history) == patience + 1

    ok = late < early and stopped_ok
    record(7, ok, f"loss epochs 1-5 {early:.4f} -> 16-20 {late:.4f}; frozen metric stopped at epoch "
                  f"{frozen.stopped_epoch} with patience {patience}")
    assert ok


# -- 8: real data (stretch) -------------------------------------------------------------------------


def test_criterion_8_office_products_stretch(tmp_path):
    inter = os.environ.get("A2GCN_OFFICE_INTERACTIONS")
    attrs_path = os.environ.get("A2GCN_OFFICE_ATTRIBUTES")
    if not inter or not attrs_path:
        record(8, None, "non-blocking stretch: set A2GCN_OFFICE_INTERACTIONS and A2GCN_OFFICE_ATTRIBUTES")
        pytest.skip("Office Products data not available")
    table = kcore_filter(load_interactions(inter), 5)
    data = PreparedData(split(table, 0.8, 0.1, 0), load_attributes(attrs_path))
    res = fit(TrainConfig(seed=0), data, out_dir=tmp_path)
    rep = evaluate(res.checkpoint, data)
    ok = rep.hr >= 0.22 and rep.ndcg >= 0.095
    record(8, ok, f"HR@20 {rep.hr:.4f} NDCG@20 {rep.ndcg:.4f} on {len(table)} interactions")
    assert ok


# -- 9: determinism ------------------------------------------------------------------------------------


def test_criterion_9_determinism(workdir):
    first = [pipeline(workdir, "A2-GCN", 0)["out"], pipeline(workdir, "A2-GCN", 0, 0.4)["out"]]
    second = [pipeline(workdir, "A2-GCN", 0, tag="b")["out"], pipeline(workdir, "A2-GCN", 0, 0.4, tag="b")["out"]]
    if "frozen" in _RUNS:
        cfg = TrainConfig(seed=0, **{**SYNTH_TRAIN, "max_epochs": 100, "patience_epochs": 7})
        fit(cfg, planted_preferences(seed=0), validator=lambda p, e: (0.5, 0.25), out_dir=workdir / "frozen_b")
        first.append(_RUNS["frozen"]["out"])
        second.append(workdir / "frozen_b")
    compared, differing = 0, []
    for a, b in zip(first, second):
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            compared += 1
            if (a / name).read_bytes() != (b / name).read_bytes():
                differing.append(f"{a.name}/{name}")
    ok = not differing
    record(9, ok, f"{compared} history/checkpoint files compared, {len(differing)} differ")
    assert ok
