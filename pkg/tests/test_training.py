import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy import stats

from ltocf.graph import InteractionDataset, InteractionGraph, build_graph
from ltocf.model import EmbeddingState, ModelParams, TimeGrid, init_embeddings, layer_combination
from ltocf.solvers import SolverConfig, integrate_grid, integrate_segment
from ltocf.training import (
    Adam,
    BatchSampler,
    BprBatch,
    TrainConfig,
    apply_time_update,
    backward,
    bpr_loss,
    bpr_loss_and_grad,
    embedding_step,
    sample_batch,
    time_gradient,
    time_gradient_continuous,
    time_step,
    train,
)

from conftest import random_dataset

SOLVERS = ["euler", "rk4", "adams-moulton", "dopri"]


def rel_err(got, ref):
    return np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300)


# -- sampling


def test_forced_negative():
    ds = InteractionDataset(1, 2, np.array([[0, 0]]))
    batch = sample_batch(ds, 50, np.random.default_rng(0))
    assert set(batch.neg.tolist()) == {1}
    assert set(batch.pos.tolist()) == {0}


def test_positive_item_uniform_chi_square():
    items = [0, 3, 4, 7, 9]
    ds = InteractionDataset(1, 12, np.array([[0, i] for i in items]))
    batch = sample_batch(ds, 100_000, np.random.default_rng(1))
    counts = np.array([np.sum(batch.pos == i) for i in items])
    assert stats.chisquare(counts).pvalue > 0.01


def test_negatives_never_positive():
    ds = random_dataset(8, 10, 0.5, seed=2)
    batch = sample_batch(ds, 5000, np.random.default_rng(3))
    train = set(map(tuple, ds.train_edges.tolist()))
    assert all((u, i) in train for u, i in zip(batch.users, batch.pos))
    assert not any((u, j) in train for u, j in zip(batch.users, batch.neg))


def test_saturated_user_skipped():
    ds = InteractionDataset(2, 2, np.array([[0, 0], [0, 1], [1, 0]]))
    batch = sample_batch(ds, 100, np.random.default_rng(0))
    assert set(batch.users.tolist()) == {1}
    with pytest.raises(ValueError):
        sample_batch(InteractionDataset(1, 2, np.array([[0, 0], [0, 1]])), 4, np.random.default_rng(0))


def test_batch_size_zero():
    with pytest.raises(ValueError):
        sample_batch(random_dataset(3, 3, 0.5), 0, np.random.default_rng(0))


def test_full_batch_covers_every_edge(toy_dataset):
    batch = BatchSampler(toy_dataset).full(np.random.default_rng(0))
    assert sorted(zip(batch.users.tolist(), batch.pos.tolist())) == sorted(map(tuple, toy_dataset.train_edges.tolist()))


# -- loss


def zero_params(n, m, d):
    return ModelParams(np.zeros((n, d)), np.zeros((m, d)), TimeGrid(1.0))


def test_bpr_symmetry_point():
    batch = BprBatch(np.array([0]), np.array([0]), np.array([1]))
    eu, ep = np.array([[1.0]]), np.array([[2.0], [2.0]])
    assert bpr_loss(eu, ep, batch, zero_params(1, 2, 1), 0.0) == pytest.approx(math.log(2), abs=1e-15)


def test_bpr_softplus_tail():
    batch = BprBatch(np.array([0]), np.array([0]), np.array([1]))
    eu, ep = np.array([[1.0]]), np.array([[20.0], [0.0]])
    assert bpr_loss(eu, ep, batch, zero_params(1, 2, 1), 0.0) == pytest.approx(2.0611536e-9, rel=1e-6)


def test_bpr_zero_embeddings_with_lambda():
    batch = BprBatch(np.array([0, 1]), np.array([0, 1]), np.array([1, 0]))
    z = np.zeros((2, 3))
    assert bpr_loss(z, z, batch, zero_params(2, 2, 3), 0.5) == math.log(2)


def test_regularizer_hits_initial_embeddings():
    params = ModelParams(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0], [3.0, 0.0]]), TimeGrid(1.0))
    batch = BprBatch(np.array([0]), np.array([0]), np.array([1]))
    z = np.zeros((1, 2)), np.zeros((2, 2))
    assert bpr_loss(*z, batch, params, 0.1) == pytest.approx(math.log(2) + 0.1 * (1 + 4 + 9))


# -- gradients


def instance(n=3, m=3, d=2, seed=0, grid=None, density=0.6):
    ds = random_dataset(n, m, density, seed=seed)
    g = build_graph(ds)
    e_u, e_p = init_embeddings(n, m, d, seed)
    rng = np.random.default_rng(seed)
    # larger embeddings keep the loss away from its flat symmetry point
    params = ModelParams(5 * e_u, 5 * e_p, grid or TimeGrid(2.0, [0.93]))
    batch = sample_batch(ds, 6, rng)
    return ds, g, params, batch


def full_loss(g, params, cfg, batch, lam):
    traj = integrate_grid(g, params, cfg)
    return bpr_loss(*layer_combination(traj.snapshots, params.grid), batch, params, lam)


def fd_embeddings(g, params, cfg, batch, lam, h=1e-4):
    out = []
    for which in ("e_u0", "e_p0"):
        base = getattr(params, which)
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                p = params.copy()
                getattr(p, which)[idx] += sign * h
                vals.append(full_loss(g, p, cfg, batch, lam))
            grad[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(grad)
    return out


def fd_time(g, params, cfg, batch, lam, h=1e-4):
    """Perturb each t_i, re-integrate only the segment ending there, keep every
    other snapshot frozen.

    Fixed-step kinds keep the segment's substep count, so a t_i sitting on a
    substep boundary does not see the count jump mid-difference.
    """
    traj = integrate_grid(g, params, cfg)
    grid = params.grid
    grad = np.zeros(grid.count)
    for i in range(1, grid.count + 1):
        vals = []
        substeps = len(traj.segments[i - 1].steps)
        for sign in (1, -1):
            snaps = list(traj.snapshots)
            t_new = grid.times[i] + sign * h
            start = snaps[i - 1]
            seg_cfg = cfg
            if cfg.kind.value != "dopri":
                seg_cfg = replace(cfg, step=(t_new - grid.times[i - 1]) / substeps)
            snaps[i], _ = integrate_segment(g, start, grid.times[i - 1], t_new, seg_cfg)
            snaps[i] = EmbeddingState(snaps[i].users, snaps[i].items, grid.times[i])
            vals.append(bpr_loss(*layer_combination(snaps, grid), batch, params, lam))
        grad[i - 1] = (vals[0] - vals[1]) / (2 * h)
    return grad


def test_gradient_hand_instance():
    # 3x3, D=2, K=2, T=1, euler s=0.5
    ds, g, params, batch = instance(grid=TimeGrid(2.0, [1.0]))
    cfg = SolverConfig("euler", step=0.5)
    traj = integrate_grid(g, params, cfg)
    grads = backward(g, params, cfg, batch, traj, lam=1e-2)
    fd_u, fd_p = fd_embeddings(g, params, cfg, batch, 1e-2)
    assert rel_err(grads.d_e_u0, fd_u) <= 1e-5
    assert rel_err(grads.d_e_p0, fd_p) <= 1e-5
    assert rel_err(grads.d_t, fd_time(g, params, cfg, batch, 1e-2)) <= 1e-4


@pytest.mark.parametrize("solver", SOLVERS)
@pytest.mark.parametrize("residual", [True, False])
@pytest.mark.parametrize("kind", ["normalized-adjacency", "normalized-laplacian"])
def test_gradients_match_finite_differences(solver, residual, kind):
    ds, _, params, batch = instance(4, 5, 3, seed=1, grid=TimeGrid(2.0, [0.93]))
    g = build_graph(ds, kind)
    cfg = SolverConfig(solver, step=0.2, residual=residual)
    traj = integrate_grid(g, params, cfg)
    grads = backward(g, params, cfg, batch, traj, lam=1e-2)
    fd_u, fd_p = fd_embeddings(g, params, cfg, batch, 1e-2)
    assert rel_err(grads.d_e_u0, fd_u) <= 1e-5
    assert rel_err(grads.d_e_p0, fd_p) <= 1e-5
    assert rel_err(grads.d_t, fd_time(g, params, cfg, batch, 1e-2)) <= 1e-4


def test_time_gradient_two_interior_points():
    _, g, params, batch = instance(4, 4, 2, seed=4, grid=TimeGrid(3.0, [0.7, 1.85]))
    cfg = SolverConfig("adams-moulton", step=0.1)
    traj = integrate_grid(g, params, cfg)
    grads = backward(g, params, cfg, batch, traj)
    assert rel_err(grads.d_t, fd_time(g, params, cfg, batch, 0.0)) <= 1e-4


def test_locality_on_empty_graph():
    empty = InteractionGraph(sp.csr_matrix((3, 4), dtype=np.float32), sp.csr_matrix((4, 3), dtype=np.float32))
    e_u, e_p = init_embeddings(3, 4, 2, 0)
    params = ModelParams(e_u, e_p, TimeGrid(2.0, [1.0]))
    batch = BprBatch(np.array([0, 2]), np.array([1, 1]), np.array([3, 0]))
    cfg = SolverConfig("rk4")
    grads = backward(empty, params, cfg, batch, integrate_grid(empty, params, cfg))
    assert not grads.d_e_u0[1].any()
    assert not grads.d_e_p0[2].any()


def test_backward_requires_tape():
    _, g, params, batch = instance()
    traj = integrate_grid(g, params, SolverConfig())
    traj.segments = []
    with pytest.raises(ValueError):
        backward(g, params, SolverConfig(), batch, traj)


def test_continuous_time_gradient_is_the_small_step_limit():
    _, g, params, batch = instance(4, 4, 2, seed=2, grid=TimeGrid(3.0, [1.2, 2.1]))
    diffs = []
    for step in (0.1, 0.05):
        cfg = SolverConfig("rk4", step=step)
        traj = integrate_grid(g, params, cfg)
        final = layer_combination(traj.snapshots, params.grid)
        _, (gu, gp), _ = bpr_loss_and_grad(*final, batch, params, 0.0)
        exact = time_gradient(g, traj, params.grid, gu, gp)
        cont = time_gradient_continuous(g, traj, params.grid, gu, gp)
        diffs.append(np.abs(exact - cont).max())
    # rk4 derivative error shrinks like step^4
    assert diffs[1] < diffs[0] / 8
    assert diffs[1] <= 1e-4 * np.abs(cont).max()


# -- time projection


def test_zero_gradient_leaves_grid():
    grid = TimeGrid(4.0, [1.0, 2.0, 3.0])
    out = apply_time_update(grid, np.zeros(3), 1e-3, 1e-3)
    assert out.interior.tolist() == [1.0, 2.0, 3.0]


def test_projection_trace():
    grid = TimeGrid(4.0, [1.0, 2.0, 3.0])
    out = apply_time_update(grid, np.array([-1.5, 0.0, 0.0]), 1.0, 1e-3)
    assert out.interior.tolist() == [pytest.approx(1.999), 2.0, 3.0]


@settings(max_examples=200, deadline=None)
@given(
    count=st.integers(1, 4),
    seed=st.integers(0, 10_000),
    scale=st.floats(1e-3, 1e3),
    steps=st.integers(1, 5),
)
def test_projection_keeps_order(count, seed, scale, steps):
    rng = np.random.default_rng(seed)
    grid = TimeGrid.uniform(4.0, count)
    for _ in range(steps):
        grid = apply_time_update(grid, rng.normal(size=count) * scale, 1.0, 1e-3)
        t = grid.times
        assert all(b > a for a, b in zip(t, t[1:]))
        assert all(b - a >= 1e-3 * (1 - 1e-9) for a, b in zip(t, t[1:]))


# -- optimizer and loop


def test_adam_first_step_is_lr_times_sign():
    x = np.array([1.0, -2.0, 3.0])
    Adam([x.shape], lr=0.1).step([x], [np.array([5.0, -0.01, 0.0])])
    np.testing.assert_allclose(x, [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -4.0])
    opt = Adam([x.shape], lr=0.05)
    for _ in range(2000):
        opt.step([x], [2 * x])
    assert np.abs(x).max() < 1e-3


def quick_config(**kw):
    base = dict(lam=1e-3, lr_embed=1e-3, lr_time=1e-4, batch_size=4, max_epochs=3, patience=100, seed=7,
                eval_every=1, topk=2)
    base.update(kw)
    return TrainConfig(**base)


def toy_params(toy_dataset, grid=None):
    e_u, e_p = init_embeddings(3, 3, 2, 0)
    return ModelParams(e_u, e_p, grid or TimeGrid.uniform(2.0, 1))


def test_lr_embed_zero_keeps_embeddings(toy_dataset):
    g = build_graph(toy_dataset)
    params = toy_params(toy_dataset)
    cfg = quick_config(lr_embed=0.0, lr_time=0.0, max_epochs=1, full_batch=True)
    res = train(toy_dataset, g, cfg, SolverConfig("rk4"), params)
    assert np.array_equal(res.final_params.e_u0, params.e_u0)
    assert np.array_equal(res.final_params.e_p0, params.e_p0)


def test_lr_embed_zero_loss_constant():
    # each user has exactly one positive and one forced negative
    ds = InteractionDataset(2, 2, np.array([[0, 0], [1, 1]]), {0: {1}})
    params = ModelParams(*init_embeddings(2, 2, 2, 0), TimeGrid.uniform(2.0, 1))
    cfg = quick_config(lr_embed=0.0, lr_time=0.0, max_epochs=2, full_batch=True)
    res = train(ds, build_graph(ds), cfg, SolverConfig("rk4"), params)
    assert res.curves[0]["loss"] == res.curves[1]["loss"]


def test_lr_time_zero_keeps_uniform_grid(toy_dataset):
    g = build_graph(toy_dataset)
    params = toy_params(toy_dataset, TimeGrid.uniform(4.0, 3))
    res = train(toy_dataset, g, quick_config(lr_time=0.0, max_epochs=5), SolverConfig("rk4"), params)
    for row in res.curves:
        assert [row["t_1"], row["t_2"], row["t_3"]] == [1.0, 2.0, 3.0]


def test_fixed_grid_not_learned(toy_dataset):
    g = build_graph(toy_dataset)
    grid = TimeGrid(4.0, [1.0, 2.0, 3.0], learnable=False)
    res = train(toy_dataset, g, quick_config(lr_time=1e-3), SolverConfig("rk4"), toy_params(toy_dataset, grid))
    assert res.final_params.grid.interior.tolist() == [1.0, 2.0, 3.0]


def test_full_batch_loss_non_increasing(toy_dataset):
    g = build_graph(toy_dataset)
    cfg = quick_config(lr_time=0.0, lam=0.0, max_epochs=20, full_batch=True, eval_every=100)
    res = train(toy_dataset, g, cfg, SolverConfig("rk4"), toy_params(toy_dataset))
    losses = [row["loss"] for row in res.curves]
    assert all(b <= a + 1e-3 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_alternation_matches_composition(toy_dataset):
    g = build_graph(toy_dataset)
    params = toy_params(toy_dataset, TimeGrid.uniform(3.0, 2))
    cfg = quick_config(max_epochs=1, batch_size=len(toy_dataset.train_edges), lr_time=1e-2, lr_embed=1e-2)
    solver = SolverConfig("rk4")
    res = train(toy_dataset, g, cfg, solver, params)

    manual = params.copy()
    batch = BatchSampler(toy_dataset).sample(cfg.batch_size, np.random.default_rng([cfg.seed, 1]))
    opt = Adam([manual.e_u0.shape, manual.e_p0.shape], cfg.lr_embed)
    embedding_step(g, manual, solver, batch, cfg.lam, opt)
    time_step(g, manual, solver, batch, cfg.lam, cfg.lr_time, cfg.time_margin)
    assert np.array_equal(res.final_params.e_u0, manual.e_u0)
    assert np.array_equal(res.final_params.e_p0, manual.e_p0)
    assert np.array_equal(res.final_params.grid.interior, manual.grid.interior)
    assert not np.array_equal(manual.grid.interior, params.grid.interior)


def test_train_does_not_mutate_input(toy_dataset):
    g = build_graph(toy_dataset)
    params = toy_params(toy_dataset)
    before = params.e_u0.copy()
    train(toy_dataset, g, quick_config(), SolverConfig("rk4"), params)
    assert np.array_equal(params.e_u0, before)


def test_early_stopping(toy_dataset):
    g = build_graph(toy_dataset)
    cfg = quick_config(lr_embed=0.0, lr_time=0.0, max_epochs=50, patience=3)
    res = train(toy_dataset, g, cfg, SolverConfig("rk4"), toy_params(toy_dataset))
    # first evaluation sets the best, three stale evaluations end the run
    assert len(res.curves) == 4 and res.best_epoch == 1


def test_time_margin_must_fit(toy_dataset):
    g = build_graph(toy_dataset)
    with pytest.raises(ValueError):
        train(toy_dataset, g, quick_config(time_margin=0.6), SolverConfig("rk4"),
              toy_params(toy_dataset, TimeGrid(1.0, [0.5])))


def test_lr_time_above_lr_embed_warns():
    with pytest.warns(UserWarning):
        TrainConfig(lr_embed=1e-4, lr_time=1e-3)


@pytest.mark.slow
def test_planted_smoke_run():
    from ltocf.synthetic import planted_dataset

    ds = planted_dataset(50, 50, p_out=0.1, seed=0)
    g = build_graph(ds)
    e_u, e_p = init_embeddings(50, 50, 16, 0)
    params = ModelParams(e_u, e_p, TimeGrid.uniform(4.0, 3))
    cfg = TrainConfig(lam=1e-2, lr_embed=1e-3, lr_time=1e-4, batch_size=128, max_epochs=200, patience=200,
                      seed=0, eval_every=50, topk=10)
    res = train(ds, g, cfg, SolverConfig("rk4"), params)
    assert res.curves[-1]["loss"] < res.curves[0]["loss"]
    assert res.best_recall > 10 / 50
