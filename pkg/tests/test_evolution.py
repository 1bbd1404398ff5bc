import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch
from sage.evolution import (
    EvolutionConfig,
    NonFiniteGradient,
    ReferencePolicy,
    RolloutGroup,
    policy_update,
)
from sage.evolution.objective import (
    aac_objective,
    clipped_surrogate,
    eta_schedule,
    group_advantages,
    reward,
    rouge_l_f1,
)
from sage.evolution.policy import (
    kl_to_reference,
    load_checkpoint,
    objective_and_grad,
    objective_value,
    save_checkpoint,
)
from sage.evolution.train import (
    EMPTY_EXPERIENCE,
    TRACE_COLUMNS,
    TrainingTrace,
    build_context,
    prepare_task,
    replay_eta,
    split_tasks,
    train,
)
from sage.experience import ExperienceStore

CFG = EvolutionConfig()


def exhaustive_lcs(a, b):
    best = 0
    for r in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), r):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(tok in it for tok in sub):
                return r
    return best


# reward and rouge


def test_reward_examples():
    assert reward(True, True, "a b", "a b", False, CFG) == pytest.approx(2.1)
    assert reward(True, False, "x", "y", True, CFG) == pytest.approx(-0.4)
    assert reward(True, True, "the cat sat", "the cat", False, CFG) == pytest.approx(1.9)
    always = EvolutionConfig(p_err_always=True)
    assert reward(True, True, "a", "a", False, always) == pytest.approx(1.6)


def test_rouge_edges():
    assert rouge_l_f1("the cat", "the cat") == 1.0
    assert rouge_l_f1("dog", "cat") == 0.0
    assert rouge_l_f1("", "cat") == 0.0
    assert rouge_l_f1("the cat sat", "the cat") == pytest.approx(0.8)


def test_rouge_matches_exhaustive_lcs():
    rng = np.random.default_rng(0)
    vocab = list("abcde")
    for _ in range(200):
        a = list(rng.choice(vocab, size=int(rng.integers(1, 11))))
        b = list(rng.choice(vocab, size=int(rng.integers(1, 11))))
        lcs = exhaustive_lcs(a, b)
        want = 0.0 if lcs == 0 else 2 * (lcs / len(a)) * (lcs / len(b)) / (lcs / len(a) + lcs / len(b))
        assert rouge_l_f1(" ".join(a), " ".join(b)) == pytest.approx(want, abs=1e-12)


# schedule


def test_eta_examples():
    assert eta_schedule(0.0, CFG) == pytest.approx(0.8)
    assert eta_schedule(1.5, CFG) == 0.0 and eta_schedule(9.0, CFG) == 0.0
    assert eta_schedule(0.75, CFG) == pytest.approx(0.4)
    assert eta_schedule(-3.0, CFG) == pytest.approx(0.8 * 3.0)  # uncapped above for negative rewards


def test_config_validation():
    for bad in (dict(eta_min=0.9), dict(eps_exp=0.1), dict(group_size=1), dict(r_target=0), dict(eta_fixed=2.0)):
        with pytest.raises(ValueError):
            EvolutionConfig(**bad)


# advantages


def test_advantage_examples():
    assert np.all(group_advantages([1.0, 1.0, 1.0]) == 0)
    assert group_advantages([0.0, 2.0]) == pytest.approx([-1.0, 1.0], abs=1e-7)
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=12))
def test_advantages_standardized(rs):
    a = group_advantages(rs)
    assert abs(a.sum()) < 1e-9 * max(1, len(rs))
    sigma = np.std(rs)
    assert a.std() == pytest.approx(sigma / (sigma + 1e-8), abs=1e-9)
    if sigma > 1e-2:
        assert abs(a.std() - 1) < 1e-6


# AAC


def test_aac_examples():
    assert aac_objective(2.5, 1.0, 1, CFG) == pytest.approx(2.0)
    assert aac_objective(0.5, -1.0, 0, CFG) == pytest.approx(-0.8)
    assert aac_objective(0.5, -1.0, 1, CFG) == pytest.approx(-0.8)
    assert aac_objective(2.5, 1.0, 0, CFG) == pytest.approx(1.2)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-3, 5.0), st.floats(-3, 3), st.integers(0, 1), st.floats(0.2, 5.0))
def test_aac_clip_properties(rho, adv, m, eps_exp):
    cfg = EvolutionConfig(eps_exp=eps_exp)
    val = aac_objective(rho, adv, m, cfg)
    if adv < 0:
        # the lower clip alone governs negative advantages, whatever eps_exp is
        assert val == pytest.approx(max(rho, 1 - cfg.eps_std) * adv)
        if rho <= 1 - cfg.eps_std:
            assert val == pytest.approx((1 - cfg.eps_std) * adv)
    up = eps_exp if m else cfg.eps_std
    if adv > 0 and rho >= 1 + up:
        assert val == pytest.approx((1 + up) * adv)
    sym = EvolutionConfig(eps_exp=cfg.eps_std)
    assert aac_objective(rho, adv, 1, sym) == aac_objective(rho, adv, 0, sym) == pytest.approx(clipped_surrogate(rho, adv, 0.2))


# policy and gradient


def test_probabilities_valid():
    rng = np.random.default_rng(1)
    p = ReferencePolicy(w=rng.normal(size=8))
    probs = p.probs(rng.normal(size=(6, 8)))
    assert probs.sum() == pytest.approx(1.0) and np.all(probs > 0)


def test_kl_properties():
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(5, 8))
    p = ReferencePolicy(w=rng.normal(size=8))
    assert kl_to_reference(p, phi) == 0.0
    p.w = p.w + rng.normal(size=8)
    assert kl_to_reference(p, phi) > 0


def _fd_grad(policy, batch, cfg, h=1e-6):
    g = np.zeros(policy.dim)
    for i in range(policy.dim):
        e = np.zeros(policy.dim)
        e[i] = h
        g[i] = (objective_value(policy, batch, cfg, policy.w + e) - objective_value(policy, batch, cfg, policy.w - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = EvolutionConfig(eps_exp=float(rng.uniform(0.2, 2.0)))
    w, w_ref, batch = random_batch(rng, cfg)
    pol = ReferencePolicy(w=w, w_ref=w_ref)
    obj, grad, _ = objective_and_grad(pol, batch, cfg)
    assert obj == pytest.approx(objective_value(pol, batch, cfg, pol.w), abs=1e-12)
    fd = _fd_grad(pol, batch, cfg)
    assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8) < 1e-4


def test_zero_advantage_at_reference_is_stationary():
    rng = np.random.default_rng(3)
    phi = rng.normal(size=(4, 8))
    pol = ReferencePolicy(w=rng.normal(size=8))
    lp = pol.log_probs(phi)
    acts = np.array([0, 1, 2, 3, 0])
    g = RolloutGroup(phi, 1, acts, lp[acts], np.ones(5), np.zeros(5))
    before = pol.w.copy()
    rep = policy_update(pol, [g], CFG)
    assert rep.grad_norm == 0.0 and np.array_equal(pol.w, before) and rep.mean_kl == 0.0


def test_update_rejects_bad_mask_and_nonfinite():
    phi = np.ones((2, 8))
    pol = ReferencePolicy()
    g = RolloutGroup(phi, 2, np.array([0, 1]), np.log([0.5, 0.5]), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        policy_update(pol, [g], CFG)
    g = RolloutGroup(phi, 0, np.array([0, 1]), np.log([0.5, 0.5]), np.zeros(2), np.array([np.nan, 1.0]))
    with pytest.raises(NonFiniteGradient):
        policy_update(pol, [g], CFG)


def test_checkpoint_round_trip(tmp_path):
    pol = ReferencePolicy(w=np.arange(8.0))
    save_checkpoint(tmp_path / "c.json", pol, 12, "abc")
    back, meta = load_checkpoint(tmp_path / "c.json")
    assert np.array_equal(back.w, pol.w) and meta["step"] == 12 and meta["cfg_hash"] == "abc"


# contexts and training


@pytest.fixture(scope="module")
def prepared(small_dataset):
    _, res = small_dataset
    store = ExperienceStore()
    store.extend(res.rules)
    return [prepare_task(t, store) for t in res.tasks], store


def test_context_masks(prepared, small_dataset):
    preps, _ = prepared
    p = preps[0]
    c0 = build_context(p, 0, np.random.default_rng(0))
    c1 = build_context(p, 1, np.random.default_rng(0))
    assert c0.experience == "" and "IF" not in c0.text()
    assert c1.experience.startswith("IF")
    assert p.gt in c0.frames and c0.frames[c0.gt_pos] == p.gt and len(c0.frames) == 4
    empty = prepare_task(small_dataset[1].tasks[0], ExperienceStore())
    e1 = build_context(empty, 1, np.random.default_rng(0))
    e0 = build_context(empty, 0, np.random.default_rng(0))
    assert e1.experience == EMPTY_EXPERIENCE and e1.frames == e0.frames
    positions = {build_context(p, 0, np.random.default_rng(s)).gt_pos for s in range(30)}
    assert len(positions) > 1


def test_injection_frequency(prepared):
    preps, _ = prepared
    cfg = EvolutionConfig(eta_fixed=0.5, training_steps=125, groups_per_step=8, update_epochs=1, validation_interval=1000)
    tr = train(preps[:30], preps[30:], ReferencePolicy(), cfg)
    masks = [m for step in tr.masks for m in step]
    assert len(masks) == 1000 and 0.45 <= np.mean(masks) <= 0.55


def test_train_zero_steps_and_overlap(prepared):
    preps, _ = prepared
    pol = ReferencePolicy()
    tr = train(preps, [], pol, EvolutionConfig(training_steps=0))
    assert tr.rows == [] and np.all(pol.w == 0)
    with pytest.raises(ValueError):
        train(preps[:10], preps[5:15], ReferencePolicy(), EvolutionConfig(training_steps=1))


def test_train_deterministic_and_eta_replay(prepared):
    preps, _ = prepared
    cfg = EvolutionConfig(training_steps=20, seed=3)
    a, b = train(preps[:32], preps[32:], ReferencePolicy(), cfg), train(preps[:32], preps[32:], ReferencePolicy(), cfg)
    assert a.to_csv() == b.to_csv()
    rows = TrainingTrace.read_csv(a.to_csv())
    assert tuple(rows[0]) == TRACE_COLUMNS
    r_vals = [r["r_val"] for r in rows]
    assert [r["eta"] for r in rows] == replay_eta(r_vals, cfg)
    finite = [v for v in r_vals if not math.isnan(v)]
    assert finite == sorted(finite)
    etas = [r["eta"] for r in rows]
    assert all(x >= y for x, y in zip(etas, etas[1:]))
    assert all(cfg.eta_min <= e <= cfg.eta_init for e in etas)
    for masks in a.masks:
        assert set(masks) <= {0, 1}


def test_training_improves_validation(prepared):
    preps, _ = prepared
    pol = ReferencePolicy()
    from sage.evolution.train import validation_contexts, validation_reward

    ctx = validation_contexts(preps[32:], 4)
    before = validation_reward(pol, ctx)
    train(preps[:32], preps[32:], pol, EvolutionConfig(training_steps=30, seed=1))
    assert validation_reward(pol, ctx) > before


def test_split_tasks(small_dataset):
    _, res = small_dataset
    tr, va = split_tasks(res.tasks, 0.9)
    assert len(tr) == 36 and len(va) == 4
    assert not {t.task_id for t in tr} & {t.task_id for t in va}
    with pytest.raises(ValueError):
        split_tasks(res.tasks, 0.0)
