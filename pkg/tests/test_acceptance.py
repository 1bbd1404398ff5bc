"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import hashlib
import math
import time

import numpy as np
import pytest

from conftest import dijkstra_length, random_batch, random_grid
from sage.cli import main
from sage.evolution.objective import (
    EvolutionConfig,
    aac_objective,
    clipped_surrogate,
    eps_up,
    eta_schedule,
    group_advantages,
)
from sage.evolution.policy import ReferencePolicy, objective_and_grad, objective_value
from sage.evolution.train import build_context, prepare_task, replay_eta, rollout, split_tasks, train
from sage.experience import ExperienceRule, ExperienceStore, embed, rule_text
from sage.genesis import GenesisConfig, generate_dataset
from sage.gridworld import CellState, OccupancyGrid, compute_distance_field
from sage.mazes import generate_maze
from sage.metrics import EvalRecord, spl_llm, sr_llm
from sage.navigation import (
    LinearNavPolicy,
    NavConfig,
    OraclePolicy,
    RandomPolicy,
    episode_from_task,
    frontier_clusters,
    run_episode,
    target_cells,
)
from sage.planner import astar

SEEDS = (1, 42, 77)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

    return emit


# 1. oracle equivalences


def _edt_numpy_brute(cells):
    oy, ox = np.nonzero(cells == CellState.OBSTACLE)
    if len(ox) == 0:
        return np.full(cells.shape, -1, dtype=np.int64)
    yy, xx = np.mgrid[0 : cells.shape[0], 0 : cells.shape[1]]
    d = (xx[..., None] - ox) ** 2 + (yy[..., None] - oy) ** 2
    return d.min(axis=-1)


def _naive_frontier_reps(g):
    h, w = g.cells.shape
    front = set()
    for y in range(h):
        for x in range(w):
            if g.cells[y, x] == CellState.FREE and any(
                0 <= x + dx < w and 0 <= y + dy < h and g.cells[y + dy, x + dx] == CellState.UNKNOWN
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
            ):
                front.add((x, y))
    clear = _edt_numpy_brute(g.cells).astype(float)
    clear[clear < 0] = math.inf
    seen, reps = set(), []
    for s in sorted(front, key=lambda c: (c[1], c[0])):
        if s in seen:
            continue
        comp, stack = [], [s]
        seen.add(s)
        while stack:
            c = stack.pop()
            comp.append(c)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    n = (c[0] + dx, c[1] + dy)
                    if n in front and n not in seen:
                        seen.add(n)
                        stack.append(n)
        best = max(comp, key=lambda c: (clear[c[1], c[0]], -(c[1] * w + c[0])))
        reps.append((best, len(comp)))
    return sorted(reps, key=lambda r: (r[0][1], r[0][0]))


def test_criterion_1_oracle_equivalences(report):
    t0 = time.perf_counter()
    bad = {"astar": 0, "edt": 0, "frontier": 0, "retrieval": 0}

    for s in range(200):
        g = random_grid(10_000 + s, 24, 24, 0.25)
        free = set(g.free_cells())
        passable = [[(x, y) in free for x in range(24)] for y in range(24)]
        rng = np.random.default_rng(s)
        cells = sorted(free)
        a, b = (cells[int(i)] for i in rng.integers(len(cells), size=2))
        want = dijkstra_length(passable, a, b)
        got = astar(g, free, a, b)
        if (want is None) != (got is None) or (got is not None and abs(got.length - want * g.resolution) > 1e-9):
            bad["astar"] += 1

    rng = np.random.default_rng(1)
    for s in range(150):
        w, h = int(rng.integers(2, 49)), int(rng.integers(2, 49))
        g = random_grid(20_000 + s, w, h, float(rng.uniform(0, 0.5)))
        if not np.array_equal(compute_distance_field(g).sq_cells, _edt_numpy_brute(g.cells)):
            bad["edt"] += 1

    for s in range(100):
        base = random_grid(30_000 + s, 24, 24, 0.15)
        cells = base.cells.copy()
        cells[np.random.default_rng(s).random(cells.shape) < 0.35] = CellState.UNKNOWN
        g = OccupancyGrid(cells, 0.1)
        if [(f.cell, f.cluster_size) for f in frontier_clusters(g)] != _naive_frontier_reps(g):
            bad["frontier"] += 1

    words = "sofa chair table lamp bed sink fridge tv plant desk shelf oven door window rug toilet mirror".split()
    rng = np.random.default_rng(7)
    store, rules = ExperienceStore(), []
    for i in range(1000):
        task = "what is near the " + " ".join(rng.choice(words, size=2))
        scene = ", ".join(rng.choice(words, size=int(rng.integers(1, 5))))
        rules.append(ExperienceRule(f"r{i:04d}", task, scene, rule_text(task, scene)))
    store.extend(rules)
    vecs = [embed(r.full_text) for r in rules]
    for _ in range(50):
        q = " ".join(rng.choice(words, size=3))
        k = int(rng.integers(1, 8))
        qv = embed(q)
        scored = sorted((-round(float(sum(a * b for a, b in zip(v, qv))), 12), i) for i, v in enumerate(vecs))
        if store.retrieve(q, k=k).ids != [rules[i].id for _, i in scored[:k]]:
            bad["retrieval"] += 1

    elapsed = time.perf_counter() - t0
    ok = not any(bad.values()) and elapsed < 60
    report(1, ok, f"mismatches={bad} runtime={elapsed:.1f}s (budget 60s)")
    assert ok


# 2. AAC properties


def _aac_tuples(n=100_000):
    rng = np.random.default_rng(2)
    rho = rng.uniform(0, 5, n)
    rho[rho == 0] = 1e-9
    adv = rng.uniform(-3, 3, n)
    m = rng.integers(0, 2, n)
    eps_exp = rng.uniform(0.2, 5, n)
    return rho, adv, m, eps_exp


def _vector_aac(rho, adv, m, eps_exp, eps_std=0.2):
    up = np.where(m == 1, eps_exp, eps_std)
    return np.minimum(rho * adv, np.clip(rho, 1 - eps_std, 1 + up) * adv), up


def test_criterion_2_aac_properties(report):
    rho, adv, m, eps_exp = _aac_tuples()
    cfg0 = EvolutionConfig()
    # library values, one config per distinct eps_exp is too slow; check the vector form against the library on a subsample
    sub = np.random.default_rng(0).choice(len(rho), 2000, replace=False)
    vals, up = _vector_aac(rho, adv, m, eps_exp)
    for i in sub:
        cfg = EvolutionConfig(eps_exp=float(eps_exp[i]))
        assert aac_objective(rho[i], adv[i], int(m[i]), cfg) == vals[i]
    neg, pos = adv < 0, adv > 0
    literal_a = int(np.sum(neg & (vals < (1 - cfg0.eps_std) * adv - 1e-12)))
    corrected_a = int(np.sum(neg & ~np.isclose(vals, np.maximum(rho, 1 - cfg0.eps_std) * adv, rtol=0, atol=1e-12)))
    # independence of eps_exp for negative advantages
    other, _ = _vector_aac(rho, adv, m, np.full_like(eps_exp, 0.2))
    indep_a = int(np.sum(neg & (vals != other)))
    plateau = pos & (rho >= 1 + up)
    b = int(np.sum(plateau & ~np.isclose(vals, (1 + up) * adv, rtol=0, atol=1e-12)))
    sym_cfg = EvolutionConfig(eps_exp=0.2)
    s1 = aac_objective(rho, adv, np.ones_like(m), sym_cfg)
    s0 = aac_objective(rho, adv, np.zeros_like(m), sym_cfg)
    c = int(np.sum((s1 != s0) | (s1 != clipped_surrogate(rho, adv, 0.2))))
    detail = (
        f"(a) literal 'A<0 => L >= (1-eps_std)A' violated in {literal_a}/{int(neg.sum())} tuples; "
        f"(a') L = max(rho, 1-eps_std)*A independent of eps_exp: {corrected_a + indep_a} violations; "
        f"(b) plateau {b} violations; (c) symmetric {c} violations"
    )
    report(2, literal_a == 0 and b == 0 and c == 0 and corrected_a == 0 and indep_a == 0, detail)
    assert corrected_a == 0 and indep_a == 0 and b == 0 and c == 0
    if literal_a:
        pytest.xfail("the literal lower bound contradicts min(rho*A, clip*A) for A<0 and rho>1-eps_std")


# 3. gradient check


def test_criterion_3_gradient_check(report):
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(100):
        rng = np.random.default_rng(300 + s)
        cfg = EvolutionConfig(eps_exp=float(rng.uniform(0.2, 3.0)), beta_kl=float(rng.choice([0.01, 0.1])))
        w, w_ref, batch = random_batch(rng, cfg)
        pol = ReferencePolicy(w=w, w_ref=w_ref, temperature=float(rng.choice([0.5, 1.0, 2.0])))
        _, grad, _ = objective_and_grad(pol, batch, cfg)
        fd = np.zeros(8)
        for i in range(8):
            e = np.zeros(8)
            e[i] = 1e-6
            fd[i] = (objective_value(pol, batch, cfg, w + e) - objective_value(pol, batch, cfg, w - e)) / 2e-6
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    report(3, ok, f"max relative error {worst:.2e} (tol 1e-4) over 100 batches, runtime {elapsed:.1f}s")
    assert ok


# 4. advantages and homogeneity


def test_criterion_4_advantages(report, small_dataset):
    _, res = small_dataset
    store = ExperienceStore()
    store.extend(res.rules)
    preps = [prepare_task(t, store) for t in res.tasks]
    cfg = EvolutionConfig()
    # 500 groups from real rollouts under randomly perturbed policies
    worst_mean = worst_std = 0.0
    mixed = spread = 0
    for i in range(500):
        p = preps[i % len(preps)]
        grng = np.random.default_rng([9, i])
        m = int(grng.random() < 0.5)
        ctx = build_context(p, m, grng)
        pol = ReferencePolicy(w=grng.normal(0, 1.0, 8))
        grp = rollout(pol, ctx, p, cfg, grng)
        a = grp.advantages
        worst_mean = max(worst_mean, abs(a.sum()))
        if grp.rewards.std() > 1e-4:
            spread += 1
            worst_std = max(worst_std, abs(a.std() - 1))
        source = p.augmented if m else p.plain
        if grp.mask != m or not np.array_equal(grp.features, source[ctx.frames]):
            mixed += 1
    # continuous groups: check the exact relation std(A) = sigma / (sigma + eps)
    rng = np.random.default_rng(4)
    worst_rel = worst_cont_mean = 0.0
    for _ in range(500):
        r = rng.normal(rng.normal(0, 2), 10 ** rng.uniform(-5, 1), int(rng.integers(2, 12)))
        a = group_advantages(r)
        sigma = r.std()
        worst_cont_mean = max(worst_cont_mean, abs(a.sum()))
        worst_rel = max(worst_rel, abs(a.std() - sigma / (sigma + 1e-8)))
    ok = worst_mean < 1e-9 and worst_std < 1e-6 and mixed == 0 and worst_cont_mean < 1e-9 and worst_rel < 1e-9
    report(
        4,
        ok,
        f"rollout groups: max|sum A|={worst_mean:.1e} max|std-1|={worst_std:.1e} ({spread}/500 with sigma>1e-4), "
        f"mixed-mask groups={mixed}; continuous groups: max|sum A|={worst_cont_mean:.1e} "
        f"max|std - sigma/(sigma+eps)|={worst_rel:.1e}",
    )
    assert ok


# 7 runs are shared with 5 and 8


@pytest.fixture(scope="module")
def evolution_runs():
    t0 = time.perf_counter()
    grids = [generate_maze(s) for s in range(5)]
    data = generate_dataset(grids, GenesisConfig(n_tasks=500, seed=0))
    store = ExperienceStore()
    store.extend(data.rules)
    tr, va = split_tasks(data.tasks)
    ptr = [prepare_task(t, store) for t in tr]
    pva = [prepare_task(t, store) for t in va]
    variants = {"dynamic": {}, "fixed0": {"eta_fixed": 0.0}, "fixed1": {"eta_fixed": 1.0}, "eps02": {"eps_exp": 0.2}}
    out = {"accepted": data.accepted}
    for name, kw in variants.items():
        for seed in SEEDS:
            cfg = EvolutionConfig(seed=seed, **kw)
            pol = ReferencePolicy()
            out[(name, seed)] = (train(ptr, pva, pol, cfg), pol, cfg)
    out["elapsed"] = time.perf_counter() - t0
    return out


# 5. eta schedule


def test_criterion_5_eta_schedule(report, evolution_runs):
    bad_replay = bad_bounds = bad_mono = 0
    for seed in SEEDS:
        trace, _, cfg = evolution_runs[("dynamic", seed)]
        etas = [r.eta for r in trace.rows]
        r_vals = [r.r_val for r in trace.rows]
        bad_replay += sum(a != b for a, b in zip(etas, replay_eta(r_vals, cfg)))
        bad_bounds += sum(not cfg.eta_min <= e <= cfg.eta_init for e in etas)
        finite = [v for v in r_vals if not math.isnan(v)]
        assert finite == sorted(finite)  # best-so-far is non-decreasing
        bad_mono += sum(b > a for a, b in zip(etas, etas[1:]))
    cfg = EvolutionConfig()
    spot = [eta_schedule(0.0, cfg), eta_schedule(0.75, cfg), eta_schedule(1.5, cfg), eta_schedule(-1.0, cfg)]
    spot_ok = spot[:3] == [0.8, 0.4, 0.0] and spot[3] >= 0.8
    bounded = [max(cfg.eta_min, min(cfg.eta_init, eta_schedule(v, cfg))) for v in np.linspace(0, 3, 61)]
    ok = bad_replay == bad_bounds == bad_mono == 0 and spot_ok and bounded == [eta_schedule(v, cfg) for v in np.linspace(0, 3, 61)]
    report(5, ok, f"replay mismatches={bad_replay} out-of-bounds={bad_bounds} increases={bad_mono} over 3 dynamic traces")
    assert ok


# 6. metrics


def test_criterion_6_metric_hand_cases(report):
    a = sr_llm([EvalRecord(str(i), 1.0, 1.0, r) for i, r in enumerate([5, 3, 1])])
    b = spl_llm([EvalRecord("x", 5.0, 10.0, 3)])
    c = spl_llm([EvalRecord("x", 5.0, 10.0, 5, failure=True)])
    ok = a == 0.5 and b == 0.25 and c == 0.0
    report(6, ok, f"SR_llm([5,3,1])={a} SPL_llm(raw=3,l=5,p=10)={b} SPL_llm(failure)={c}")
    assert ok


# 7. evolution behaviour


def test_criterion_7_evolution_ordering(report, evolution_runs):
    mean = {n: float(np.mean([evolution_runs[(n, s)][0].final_validation for s in SEEDS])) for n in ("dynamic", "fixed0", "fixed1", "eps02")}
    a1, a2, b = mean["dynamic"] >= mean["fixed0"], mean["dynamic"] >= mean["fixed1"], mean["dynamic"] >= mean["eps02"]
    elapsed = evolution_runs["elapsed"]
    ok = a1 and a2 and b and evolution_runs["accepted"] == 500 and elapsed < 600
    report(
        7,
        ok,
        f"final validation mean over seeds: dynamic={mean['dynamic']:.4f} fixed0={mean['fixed0']:.4f} "
        f"fixed1={mean['fixed1']:.4f} (eps_exp=1.0 is the dynamic run) eps_exp=0.2={mean['eps02']:.4f}; runtime {elapsed:.0f}s",
    )
    assert ok


# 8. navigation


def test_criterion_8_navigation(report, evolution_runs):
    _, evolved, _ = evolution_runs[("dynamic", 1)]
    cfg = NavConfig(t_max=50)
    wins = {"oracle": 0, "random": 0, "evolved": 0}
    within_2l = 0
    for s in range(50):
        g = generate_maze(1000 + s)
        d = generate_dataset([g], GenesisConfig(n_tasks=1, seed=s))
        task, scene = d.tasks[0], d.scenes[g.grid_id]
        store = ExperienceStore()
        store.extend(d.rules)
        ep = episode_from_task(task, g.resolution)
        policies = {
            "oracle": OraclePolicy(g, target_cells(scene, task.target_label)),
            "random": RandomPolicy(s),
            "evolved": LinearNavPolicy(evolved),
        }
        for name, pol in policies.items():
            r = run_episode(ep, g, scene, pol, store, cfg, seed=s)
            wins[name] += r.success
            if name == "oracle":
                within_2l += r.path_length <= 2 * r.shortest
    ok = wins["oracle"] == 50 and wins["random"] < wins["evolved"]
    report(8, ok, f"successes on 50 mazes: oracle={wins['oracle']} evolved={wins['evolved']} random={wins['random']}; oracle p<=2l on {within_2l}/50")
    assert ok


# 9. determinism


def _hash_tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def _pipeline(root, monkeypatch):
    # relative paths so config.json files match byte for byte as well
    root.mkdir()
    monkeypatch.chdir(root)
    codes = [
        main(["genesis", "--procedural", "2", "--n-tasks", "20", "--seed", "9", "--out", "data"]),
        main(["evolve", "--data", "data", "--steps", "15", "--seed", "9", "--out", "evo"]),
        main(["navigate", "--data", "data", "--checkpoint", "evo/checkpoint.json", "--episodes", "5", "--seed", "9", "--out", "nav"]),
        main(["eval", "--episodes", "nav/episodes.jsonl", "--out", "eval"]),
    ]
    return codes, _hash_tree(root)


def test_criterion_9_determinism(report, tmp_path, capsys, monkeypatch):
    codes_a, a = _pipeline(tmp_path / "a", monkeypatch)
    codes_b, b = _pipeline(tmp_path / "b", monkeypatch)
    capsys.readouterr()
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = codes_a == codes_b == [0, 0, 0, 0] and a.keys() == b.keys() and not differing
    report(9, ok, f"{len(a)} output files compared by sha256 across two runs; differing={differing}")
    assert ok
