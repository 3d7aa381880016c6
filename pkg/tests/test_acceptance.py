"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (also repeated
in the terminal summary) and then asserts. Tolerances and budgets are pinned
as module constants.
"""
import math
import tempfile
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import random_graph
from gradcheck import kge_max_error, numeric_grad, rel_error
from oracles import (classification_oracle, epsilon_bruteforce, increment_direct,
                     link_prediction_oracle, q_direct, threshold_oracle, vote_one_prob)
from fkge.bus import MessageKind, SessionChannel, scan_for_rows
from fkge.config import load_config
from fkge.evaluation import best_threshold, classification_accuracy, link_prediction
from fkge.federation import Federation, FederationConfig, OwnerActor
from fkge.kg import split_triples
from fkge.kge import MODELS, TrainConfig, init_embeddings, train_epochs
from fkge.ppat import (ClientView, Discriminator, HostView, PpatConfig, client_view,
                       generator_objective, host_view,
                       new_session, random_orthogonal, run_session, student_objective,
                       teacher_objective, weight_gradient)
from fkge.privacy import (PrivacyLedger, best_order, epsilon_hat, moment_increment,
                          pate_vote_batch, q_value)
from fkge.runner import run
from fkge.synth import generate_synthetic_federation

RESULTS: dict[int, str] = {}

DP_TOL = 1e-12
DP_BUDGET_S = 1.0
EPS_TARGET, EPS_TOL = 2.73, 0.01
ALPHA9 = 13.07
ROUND_ALPHA9 = 0.29
VOTE_TRIALS, VOTE_TOL, VOTE_BUDGET_S = 1_000_000, 0.005, 30.0
FD_TOL, FD_BUDGET_S = 1e-5, 10.0
ROT_COS, ROT_SEEDS, ROT_NEED, ROT_BUDGET_S = 0.9, 5, 4, 120.0
FED_SEEDS, FED_BUDGET_S = 5, 600.0
ABL_SEEDS, ABL_RATIOS, ABL_BUDGET_S = 5, (0.2, 0.4, 0.6, 0.8, 1.0), 1200.0
TRAFFIC_MB = 0.845


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_criterion_01_dp_exactness():
    t0 = time.perf_counter()
    worst = 0.0
    orders = np.arange(1, 33)
    for lam in (0.01, 0.05, 0.5):
        for gap in range(9):
            worst = max(worst, abs(float(q_value(gap, lam)) - q_direct(gap, lam)))
            inc = moment_increment(gap, lam, orders)
            worst = max(worst, max(abs(inc[l - 1] - increment_direct(gap, lam, l)) for l in orders))
    rng = np.random.default_rng(0)
    eps_ok = True
    for _ in range(200):
        alpha = rng.uniform(0, 40, 32)
        delta = float(10 ** rng.uniform(-9, -1))
        led = PrivacyLedger(0.05, delta, 32, alpha)
        eps_ok &= abs(epsilon_hat(led) - epsilon_bruteforce(alpha, delta)) <= DP_TOL
    took = time.perf_counter() - t0
    verdict(1, worst <= DP_TOL and eps_ok and took < DP_BUDGET_S,
            f"max |diff| {worst:.2e} (tol {DP_TOL}), eps_hat == brute-force min: {eps_ok}, {took:.3f}s")


def test_criterion_02_operating_point():
    orders = np.arange(1, 33)
    # one round's moment profile, scaled so that alpha(9) per round is 0.29
    per_round = moment_increment(0, 0.05, orders)
    per_round *= ROUND_ALPHA9 / per_round[8]
    rounds = ALPHA9 / ROUND_ALPHA9
    led = PrivacyLedger(0.05, 1e-5, 32, per_round * rounds)
    eps = epsilon_hat(led)
    l_star = best_order(led)
    point_ok = abs(eps - EPS_TARGET) <= EPS_TOL and l_star == 9

    # every ledger of a real run stays above the floor
    cfg = load_config({
        "synth": {"n_graphs": 3, "entities": 200, "overlap": 0.2, "relations": 6, "relation_overlap": 3},
        "dim": 8, "train": {"pretrain_epochs": 20, "epochs_per_round": 5},
        "federation": {"max_ticks": 4}, "ppat": {"max_epochs": 5},
    })
    with tempfile.TemporaryDirectory() as out:
        res = run(cfg, "fkge", out)[0]
    floor = math.log(1e5) / 32
    eps_runs = [s.ledger.epsilon() for s in res.federation.sessions]
    floor_ok = bool(eps_runs) and all(e >= floor for e in eps_runs)
    verdict(2, point_ok and floor_ok,
            f"eps_hat {eps:.4f} at l={l_star} (target {EPS_TARGET} +/- {EPS_TOL}); "
            f"{len(eps_runs)} run ledgers, min eps_hat {min(eps_runs):.3f} >= floor {floor:.3f}")


def test_criterion_03_vote_distribution():
    t0 = time.perf_counter()
    lam = 0.05
    votes = np.zeros((4, VOTE_TRIALS), dtype=np.int64)
    votes[:3] = 1
    labels, _ = pate_vote_batch(votes, PrivacyLedger(lam), np.random.default_rng(2024))
    emp = labels.mean()
    want = vote_one_prob(1, 3, lam)
    took = time.perf_counter() - t0
    verdict(3, abs(emp - want) <= VOTE_TOL and took < VOTE_BUDGET_S,
            f"P(label=1) empirical {emp:.5f} vs closed form {want:.5f} (tol {VOTE_TOL}), {took:.2f}s")


def test_criterion_04_gradients():
    t0 = time.perf_counter()
    worst = {}
    for model in MODELS:
        for norm in (1, 2):
            g = random_graph(7, 3, 12, 0)
            tbl = init_embeddings(g, TrainConfig(model=model, dim=6, norm=norm, seed=0))
            rng = np.random.default_rng(100)
            for v in tbl.params().values():
                v += rng.normal(scale=0.3, size=v.shape)
            w = np.random.default_rng(1).normal(size=len(g))
            worst[f"{model}/L{norm}"] = kge_max_error(tbl, g.triples, w)

    d = 8
    rng = np.random.default_rng(3)
    disc = Discriminator.create(d, 6, rng)
    fake, real = rng.normal(size=(7, d)), rng.normal(size=(5, d))
    labels = rng.integers(0, 2, 7)
    err = 0.0
    _, dx = generator_objective(disc, fake)
    err = max(err, rel_error(dx, numeric_grad(lambda: generator_objective(disc, fake)[0], fake)))
    _, gt = teacher_objective(disc, fake, real)
    _, gs = student_objective(disc, fake, labels)
    for name, p in disc.params().items():
        err = max(err, rel_error(gt[name], numeric_grad(lambda: teacher_objective(disc, fake, real)[0], p)))
        err = max(err, rel_error(gs[name], numeric_grad(lambda: -student_objective(disc, fake, labels)[0], p)))
    X = rng.normal(size=(9, d))
    W = random_orthogonal(d, rng) + 0.1 * rng.normal(size=(d, d))
    _, delta = generator_objective(disc, X @ W.T)
    gw = weight_gradient(W, delta.T @ (X @ W.T))
    err = max(err, rel_error(gw, numeric_grad(lambda: generator_objective(disc, X @ W.T)[0], W)))
    worst["ppat"] = err
    took = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    verdict(4, max(worst.values()) < FD_TOL and took < FD_BUDGET_S,
            f"worst relative error {worst[top]:.2e} ({top}), tol {FD_TOL}, {took:.2f}s")


def _rotated_pair(seed: int, d: int = 8, shared: int = 64):
    spec = {"graphs": [{"id": "x", "entities": 300, "relations": 4, "triples": 1200},
                       {"id": "y", "entities": 300, "relations": 4, "triples": 1200}],
            "overlaps": [{"pair": ["x", "y"], "entities": shared}]}
    (gx, gy), (al,) = generate_synthetic_federation(spec, seed)
    rng = np.random.default_rng(seed)
    tx = train_epochs(gx, init_embeddings(gx, TrainConfig(dim=d, seed=seed)), TrainConfig(dim=d, seed=seed),
                      epochs=20)
    ty = init_embeddings(gy, TrainConfig(dim=d, seed=seed + 1))
    R = random_orthogonal(d, rng)
    ty.entity[al.entity_pairs[:, 1]] = tx.entity[al.entity_pairs[:, 0]] @ R.T
    return gx, gy, tx, ty, al


def test_criterion_05_rotation_recovery():
    t0 = time.perf_counter()
    cosines = []
    for seed in range(ROT_SEEDS):
        gx, gy, tx, ty, al = _rotated_pair(seed)
        cv, hv = client_view(gx, tx, al), host_view(gy, ty, al)
        s = new_session("x", "y", 8, len(hv.rows), PpatConfig(), seed=seed)
        b = run_session(s, cv, hv)
        G, Y = b.entity_rows, hv.rows[:cv.n_entity_rows]
        cosines.append(float(np.mean((G * Y).sum(1) / np.linalg.norm(G, axis=1) / np.linalg.norm(Y, axis=1))))
    took = time.perf_counter() - t0
    hits = sum(c > ROT_COS for c in cosines)
    verdict(5, hits >= ROT_NEED and took < ROT_BUDGET_S,
            f"mean cosine per seed {[round(c, 4) for c in cosines]}, {hits}/{ROT_SEEDS} > {ROT_COS}, {took:.1f}s")


def _federation_cfg(seed: int, **extra):
    raw = {"synth": {"n_graphs": 3, "entities": 2000, "overlap": 0.1}, "dim": 32,
           "train": {"pretrain_epochs": 200, "epochs_per_round": 20},
           "federation": {"max_ticks": 15, "patience": 15},
           "seeds": {"data": seed, "train": seed, "scheduler": seed, "noise": seed}}
    raw.update(extra)
    return load_config(raw)


@pytest.mark.slow
def test_criterion_06_federation_improvement():
    t0 = time.perf_counter()
    ok, rows = True, []
    for seed in range(FED_SEEDS):
        with tempfile.TemporaryDirectory() as out:
            fed = run(_federation_cfg(seed), "fkge", out)[0].federation
        base = {g: a.history[0].score for g, a in fed.actors.items()}
        final = {g: a.best_score for g, a in fed.actors.items()}
        never_worse = all(final[g] >= base[g] for g in base)
        strict = sum(final[g] > base[g] for g in base)
        ok &= never_worse and strict >= 2
        rows.append(f"seed {seed}: " + " ".join(f"{g} {base[g]:.4f}->{final[g]:.4f}" for g in sorted(base)))
    took = time.perf_counter() - t0
    for r in rows:
        print("   ", r)
    verdict(6, ok and took < FED_BUDGET_S,
            f"FKGE >= baseline on every graph and strictly better on >= 2 of 3, {FED_SEEDS} seeds, {took:.0f}s")


ABLATION_SPEC = {
    "graphs": [{"id": "a", "entities": 2000, "relations": 12, "triples": 3000},
               {"id": "b", "entities": 2000, "relations": 12, "triples": 16000},
               {"id": "c", "entities": 2000, "relations": 12, "triples": 16000}],
    "overlaps": [{"pair": ["a", "b"], "entities": 800, "relations": 12},
                 {"pair": ["a", "c"], "entities": 800, "relations": 12},
                 {"pair": ["b", "c"], "entities": 200, "relations": 12}],
}


def _ablation_run(seed: int, ratio: float, simple: bool) -> dict[str, float]:
    cfg = load_config({
        "synth": ABLATION_SPEC, "dim": 32,
        "train": {"pretrain_epochs": 200, "epochs_per_round": 20},
        "federation": {"max_ticks": 10, "patience": 10},
        "ablation": {"sample_aligned_ratio": ratio, "fkge_simple": simple},
        "seeds": {"data": seed, "train": seed, "scheduler": seed, "noise": seed},
    })
    with tempfile.TemporaryDirectory() as out:
        fed = run(cfg, "fkge", out)[0].federation
    return {g: a.best_score for g, a in fed.actors.items()}


@pytest.mark.slow
def test_criterion_07_ablation_trends():
    t0 = time.perf_counter()
    xs, ys = [], []
    full, simple = [], []
    for seed in range(ABL_SEEDS):
        for ratio in ABL_RATIOS:
            acc = _ablation_run(seed, ratio, False)
            xs.append(ratio)
            ys.append(float(np.mean(list(acc.values()))))
            if ratio == 1.0:
                full.append(acc)
        simple.append(_ablation_run(seed, 1.0, True))
    rho = spearmanr(xs, ys).statistic
    graphs = sorted(full[0])
    mean_full = {g: np.mean([f[g] for f in full]) for g in graphs}
    mean_simple = {g: np.mean([s[g] for s in simple]) for g in graphs}
    wins = sum(mean_full[g] >= mean_simple[g] for g in graphs)
    took = time.perf_counter() - t0
    for r in ABL_RATIOS:
        print(f"    ratio {r}: mean accuracy {np.mean([y for x, y in zip(xs, ys) if x == r]):.4f}")
    print("    FKGE vs FKGE-simple: " + " ".join(
        f"{g} {mean_full[g]:.4f}/{mean_simple[g]:.4f}" for g in graphs))
    verdict(7, rho > 0 and wins >= 2 and took < ABL_BUDGET_S,
            f"Spearman rho {rho:.3f}; FKGE >= FKGE-simple on {wins}/3 graphs; {took:.0f}s")


def test_criterion_08_privacy_invariants(small_federation):
    graphs, aligns = small_federation
    actors = []
    for g in graphs:
        tc = TrainConfig(dim=8, epochs_per_round=5, seed=0)
        a = OwnerActor(g, train_epochs(g, init_embeddings(g, tc), tc, epochs=20), tc)
        a.initialize()
        actors.append(a)
    fed = Federation(actors, aligns, PpatConfig(max_epochs=5), FederationConfig(max_ticks=6, audit=True))
    fed.run()
    leaks = sum(len(scan_for_rows(fed.bus.trace, s.raw_rows)) for s in fed.sessions)
    counts_ok = all(s.ledger.query_count == s.labels_issued for s in fed.sessions)
    labels = sum(s.labels_issued for s in fed.sessions)

    d, n = 100, 64
    rng = np.random.default_rng(0)
    X = rng.normal(size=(n, d))
    cv = ClientView("c", X, n)
    hv = HostView("h", X @ random_orthogonal(d, rng).T, np.arange(n), np.zeros(0, np.int64), n, 0)
    ch = SessionChannel()
    run_session(new_session("c", "h", d, n, PpatConfig(max_epochs=1, refine="none"), seed=0), cv, hv, ch)
    adv = next(e for e in ch.outbox if e.kind is MessageKind.ADV_BATCH and "phase" not in e.meta)
    grad = next(e for e in ch.outbox if e.kind is MessageKind.GRAD_BATCH)
    mb = 8 * (len(adv.payload) + len(grad.payload)) / 1e6
    verdict(8, leaks == 0 and counts_ok and bool(fed.sessions) and mb <= TRAFFIC_MB,
            f"{len(fed.sessions)} sessions, {leaks} raw-row hits, ledger queries == {labels} labels: "
            f"{counts_ok}, per-batch traffic {mb:.4f} Mb (limit {TRAFFIC_MB})")


def test_criterion_09_protocol(small_federation):
    graphs, aligns = small_federation

    def fed(**kw):
        actors = []
        for g in graphs:
            tc = TrainConfig(dim=8, epochs_per_round=5, seed=0)
            a = OwnerActor(g, train_epochs(g, init_embeddings(g, tc), tc, epochs=20), tc)
            a.initialize()
            actors.append(a)
        f = Federation(actors, aligns, PpatConfig(max_epochs=3), FederationConfig(**kw))
        f.run()
        return f

    a, b = fed(max_ticks=6, patience=10), fed(max_ticks=6, patience=10)
    replay = a.bus.records() == b.bus.records() and len(a.bus.records()) > 0
    monotone = all([r.best_score for r in x.history] == sorted(r.best_score for r in x.history)
                   for x in a.actors.values())
    script = [[("g1", "g3"), ("g2", "g1"), ("g3", "g2")]]
    s = fed(max_ticks=1, scheduler="scripted", script=script)
    pairing = sorted((x.client, x.host) for x in s.sessions) == sorted(script[0])
    verdict(9, replay and monotone and pairing,
            f"identical replay ({len(a.bus.records())} messages): {replay}, best score monotone: {monotone}, "
            f"scripted first wave g1->g3 g2->g1 g3->g2: {pairing}")


def _saturated(g) -> bool:
    # some (h, r) or (r, t) already links every entity, so it cannot be corrupted
    for cols in ([0, 1], [1, 2]):
        _, counts = np.unique(g.triples[:, cols], axis=0, return_counts=True)
        if counts.max() >= g.n_entities:
            return True
    return False


def test_criterion_10_eval_oracles():
    lp_ok, n_lp = True, 0
    seeds = [s for s in range(12) if not _saturated(random_graph(8, 3, 40, s))][:10]
    for seed in seeds:
        g = split_triples(random_graph(8, 3, 40, seed), (60, 20, 20), seed)
        tc = TrainConfig(dim=4, learning_rate=0.05, seed=seed)
        tbl = train_epochs(g, init_embeddings(g, tc), tc, epochs=5)
        if seed % 2:
            tbl.entity = np.round(tbl.entity * 2) / 2
            tbl.relation = np.round(tbl.relation * 2) / 2
        for opts in ({}, {"filtered": False}, {"filter_train": True}, {"type_constraint": True}):
            got = link_prediction(g, tbl, "test", **opts)
            want = link_prediction_oracle(g, tbl, "test", **opts)
            lp_ok &= all(getattr(got, k) == v for k, v in want.items())
            n_lp += 1
    tc_ok, n_tc = True, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pos = np.round(rng.normal(0, 1, rng.integers(1, 15)), 1)
        neg = np.round(rng.normal(0.8, 1, rng.integers(1, 15)), 1)
        tc_ok &= best_threshold(pos, neg) == threshold_oracle(pos, neg)
        vp, vn, ep, en = rng.normal(0, 1, 30), rng.normal(1, 1, 30), rng.normal(0, 1, 20), rng.normal(1, 1, 20)
        vrel, erel = rng.integers(0, 3, 30), rng.integers(0, 4, 20)
        tc_ok &= classification_accuracy(vp, vn, vrel, ep, en, erel) == \
            classification_oracle(vp, vn, vrel, ep, en, erel)
        n_tc += 2
    verdict(10, lp_ok and tc_ok,
            f"link prediction == oracle on {n_lp} cases: {lp_ok}; "
            f"classification == threshold sweep on {n_tc} cases: {tc_ok}")
