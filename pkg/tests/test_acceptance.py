"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict; conftest prints them at the
end of the run.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import os

import numpy as np
import pytest

from factories import make_gt, make_pred
from oracles import map_by_enumeration, nms_by_enumeration, pixel_set, rasterized_box_iou, set_iou
from tspal.evaluation import map50
from tspal.geometry import Box, box_iou, mask_iou, nms
from tspal.loop import cold_start, init_pools, load_state, run_cycle, save_state
from tspal.losses import LossBatch, RoiRecord, semi_loss, supervised_gradients, supervised_loss, total_loss
from tspal.pseudo import GateThresholds, gate_instance
from tspal.records import dumps
from tspal.scoring import TripletScores, image_score, instance_score
from tspal.simulator import SimConfig, compare_strategies, gen_dataset, oracle_predict, run_experiment

VERDICTS: list[str] = []


def verdict(n, ok, detail):
    VERDICTS.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# 1 -------------------------------------------------------------------------

def test_criterion_1_score_formulas():
    s = instance_score(TripletScores(0.9, 0.8, 0.7))
    S = image_score([1.0, 0.5])
    checks = {
        "instance(0.9,0.8,0.7)=0.737274": abs(s - 0.737274) <= 1e-6,
        "instance(1,1,1)=1": instance_score(TripletScores(1, 1, 1)) == 1.0,
        "instance(0,0,0)=0": instance_score(TripletScores(0, 0, 0)) == 0.0,
        "image([1,0.5])=0.584101": abs(S - 0.584101) <= 1e-6,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(1, not failed, f"instance={s:.10f} image={S:.10f} failed={failed}")


# 2 -------------------------------------------------------------------------

def _rect(rng, size):
    x1, y1 = int(rng.integers(0, size - 1)), int(rng.integers(0, size - 1))
    return (x1, y1, int(rng.integers(x1 + 1, size + 1)), int(rng.integers(y1 + 1, size + 1)))


def test_criterion_2_geometry_oracles():
    rng = np.random.default_rng(2)
    counts = dict(mask_iou=0, box_iou=0, nms=0, map50=0)
    mismatches = []
    for _ in range(300):
        h, w = (int(v) for v in rng.integers(1, 33, 2))
        a, b = rng.random((h, w)) < rng.random(), rng.random((h, w)) < rng.random()
        if mask_iou(a, b) != set_iou(pixel_set(a.tolist()), pixel_set(b.tolist())):
            mismatches.append(("mask_iou", a, b))
        counts["mask_iou"] += 1
    for _ in range(300):
        a, b = Box(*_rect(rng, 32)), Box(*_rect(rng, 32))
        if box_iou(a, b) != rasterized_box_iou(a.to_list(), b.to_list()):
            mismatches.append(("box_iou", a, b))
        counts["box_iou"] += 1
    for _ in range(250):
        n = int(rng.integers(0, 9))
        boxes = [Box(*_rect(rng, 16)) for _ in range(n)]
        scores = [float(rng.choice([0.2, 0.5, 0.9])) for _ in range(n)]
        classes = [int(rng.integers(2)) for _ in range(n)]
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        if nms(boxes, scores, classes, thr) != nms_by_enumeration([b.to_list() for b in boxes], scores, classes, thr):
            mismatches.append(("nms", boxes, scores, classes))
        counts["nms"] += 1
    while counts["map50"] < 250:
        size = int(rng.integers(4, 17))
        preds, gts, oracle = {}, {}, {}
        for k in range(int(rng.integers(1, 4))):
            g = [make_gt(int(rng.integers(2)), _rect(rng, size), (size, size)) for _ in range(rng.integers(0, 5))]
            p = [make_pred(int(rng.integers(2)), (float(rng.choice([0.3, 0.6, 0.9, rng.random()])), 0.5, 0.5),
                           _rect(rng, size), (size, size)) for _ in range(rng.integers(0, 5))]
            preds[f"i{k}"], gts[f"i{k}"] = p, g
            oracle[f"i{k}"] = ([(x.class_id, x.scores.cls, pixel_set(x.mask.tolist())) for x in p],
                               [(x.class_id, pixel_set(x.mask.tolist())) for x in g])
        if not any(gts.values()):
            continue
        _, expected = map_by_enumeration(oracle)
        got = map50(preds, gts).map
        if got != float(expected):
            mismatches.append(("map50", got, expected))
        counts["map50"] += 1
    total = sum(counts.values())
    verdict(2, total >= 1000 and not mismatches, f"{total} instances {counts}, mismatches={len(mismatches)}")


# 3 -------------------------------------------------------------------------

def _record(rng, positive):
    return RoiRecord(
        p=rng.dirichlet(np.ones(3)), p_star=int(positive), label=int(rng.integers(3)) if positive else 0,
        t=rng.normal(0, 1.5, 4), t_star=rng.normal(0, 1.5, 4),
        m=rng.uniform(0.01, 0.99, (5, 5)), m_star=rng.random((5, 5)) > 0.5,
        biou=rng.uniform(0.05, 0.95), biou_star=rng.random(),
        miou=rng.uniform(0.05, 0.95), miou_star=rng.random(),
    )


def test_criterion_3_loss_semantics():
    rng = np.random.default_rng(3)
    failures = []
    for _ in range(100):
        neg = LossBatch([_record(rng, False) for _ in range(5)])
        if semi_loss(neg) != 0.0:
            failures.append("semi on negatives")
        pos = LossBatch([_record(rng, True) for _ in range(5)], lam=0.0)
        if supervised_loss(pos) != semi_loss(pos):
            failures.append("lambda=0 vs semi")
        l_sup, l_semi = supervised_loss(pos), float(rng.random())
        if total_loss(l_sup, l_semi, 0.0) != l_sup:
            failures.append("beta=0")

    h, worst, n_checked = 1e-6, 0.0, 0
    for _ in range(20):
        batch = LossBatch([_record(rng, rng.random() < 0.7) for _ in range(6)], lam=float(rng.uniform(0.5, 2)))
        g = supervised_gradients(batch)
        for k, r in enumerate(batch.records):
            if not r.p_star:
                continue
            targets = [("biou", None, g.biou[k]), ("miou", None, g.miou[k])]
            targets += [("t", j, g.t[k][j]) for j in range(4) if abs(abs(r.t[j] - r.t_star[j]) - 1) > 1e-3]
            for name, j, analytic in targets:
                def bump(d, name=name, j=j, r=r):
                    if j is None:
                        setattr(r, name, getattr(r, name) + d)
                    else:
                        r.t[j] += d
                bump(h)
                up = supervised_loss(batch)
                bump(-2 * h)
                down = supervised_loss(batch)
                bump(h)
                numeric = (up - down) / (2 * h)
                rel = abs(numeric - analytic) / max(abs(analytic), 1e-8)
                worst = max(worst, rel)
                n_checked += 1
    if worst > 1e-4:
        failures.append(f"gradient rel err {worst:.2e}")
    verdict(3, not failures, f"{n_checked} gradient checks, worst rel err {worst:.2e}, failures={failures[:3]}")


# 4 -------------------------------------------------------------------------

def test_criterion_4_gate_monotonicity():
    rng = np.random.default_rng(4)
    violations = 0
    n = 10_000
    for _ in range(n):
        t = TripletScores(*rng.random(3))
        thr = rng.random(3)
        raised = thr.copy()
        which = int(rng.integers(3))
        raised[which] = rng.uniform(thr[which], 1.0)
        for rule in ("all", "any"):
            if gate_instance(t, GateThresholds(*raised), rule) and not gate_instance(t, GateThresholds(*thr), rule):
                violations += 1
    verdict(4, violations == 0, f"{n} pairs x 2 rules, violations={violations}")


# 5 -------------------------------------------------------------------------

def _drive(state, ds, cfg, strategy, path, stop_after=None):
    """Run cycles to completion; return per-cycle manifest bytes."""
    manifests = []
    while not state.done and (stop_after is None or state.k < stop_after):
        if state.k == 0:
            man, state = cold_start(state)
        else:
            dump = oracle_predict(ds, state.d_al, state.d_u, cfg, seed=11, cycle=state.k + 1)
            man, _, state, _ = run_cycle(state, dump.images, strategy=strategy)
        manifests.append(dumps(man))
        save_state(state, path)
    return state, manifests


def test_criterion_5_loop_integrity(tmp_path):
    cfg = SimConfig(n_train=200, n_test=10)
    ds = gen_dataset(cfg)
    problems = []
    for strategy in ("tsp", "random"):
        full_path = tmp_path / f"{strategy}_full.json"
        state, full = _drive(init_pools(ds.train, 20, 6, seed=5), ds, cfg, strategy, full_path)
        seen: set[str] = set()
        for r in state.history:
            if len(r.selected) != 20:
                problems.append(f"{strategy}: cycle {r.cycle} selected {len(r.selected)}")
            if seen & set(r.selected):
                problems.append(f"{strategy}: reselection at cycle {r.cycle}")
            seen |= set(r.selected)
        if state.k != 6 or state.d_u & state.d_al or state.d_u | state.d_al != set(ds.train):
            problems.append(f"{strategy}: pool invariant broken")
        # stop at cycle 3, reload from disk, continue
        part_path = tmp_path / f"{strategy}_part.json"
        _, head = _drive(init_pools(ds.train, 20, 6, seed=5), ds, cfg, strategy, part_path, stop_after=3)
        _, tail = _drive(load_state(part_path), ds, cfg, strategy, part_path)
        if head + tail != full or part_path.read_bytes() != full_path.read_bytes():
            problems.append(f"{strategy}: replay differs")
    verdict(5, not problems, f"K=6 b=20 pool=200, problems={problems}")


# 6 -------------------------------------------------------------------------

def test_criterion_6_noiseless_identity():
    res = run_experiment(SimConfig.noiseless(n_train=120, n_test=40), "tsp", cycles=6, per_cycle=20)
    ok = len(res.map_curve) == 6 and all(v == 1.0 for v in res.map_curve)
    verdict(6, ok, f"mAP per cycle {res.map_curve}")


# 7 and 8 share one comparison run -------------------------------------------

@pytest.fixture(scope="module")
def comparison():
    return compare_strategies(SimConfig(), ["random", "entropy", "tsp", "tsp_ssl"], seeds=[0, 1, 2, 3, 4],
                              cycles=6, per_cycle=20, workers=min(8, os.cpu_count() or 1))


def test_criterion_7_strategy_ordering(comparison):
    final = {s: float(comparison.mean(s)[-1]) for s in comparison.curves}
    gap = comparison.mean("tsp") - comparison.mean("random")
    wins = int(np.sum(gap[1:6] > 0))
    ok = final["tsp_ssl"] >= final["tsp"] >= final["random"] and wins >= 3
    shown = " ".join(f"{s}={v:.4f}" for s, v in final.items())
    verdict(7, ok, f"final mAP {shown}; tsp>random at {wins}/5 cycles")


def test_criterion_8_pseudo_enrichment(comparison):
    per_seed, pooled = [], np.zeros(4)
    for r in comparison.runs["tsp_ssl"]:
        c = np.array([sum(x for x, _ in r.gated_precision), sum(n for _, n in r.gated_precision),
                      sum(x for x, _ in r.emitted_precision), sum(n for _, n in r.emitted_precision)])
        pooled += c
        per_seed.append(c[1] > 0 and c[0] / c[1] > c[2] / c[3])
    gated, emitted = pooled[0] / pooled[1], pooled[2] / pooled[3]
    ok = gated > emitted and all(per_seed)
    verdict(8, ok, f"gated {gated:.4f} ({int(pooled[1])} inst) vs emitted {emitted:.4f} "
                   f"({int(pooled[3])} inst); per-seed wins {sum(per_seed)}/{len(per_seed)}")
