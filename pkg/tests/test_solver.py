import numpy as np
import pytest

from scaleflow.propagation import ncc_weights, uniform_weights
from scaleflow.solver import SolverError, assemble, default_max_iter, quadratic_cost, solve


def dense_oracle(stencils, seeds):
    """Solve 'x_p - sum_q w_pq x_q = 0 for free p, x_s = value for seeds' densely."""
    h, w = stencils.shape[:2]
    n = h * w
    A = np.zeros((n, n))
    b = np.zeros(n)
    fixed = {y * w + x: val for (x, y), val in seeds}
    for y in range(h):
        for x in range(w):
            p = y * w + x
            A[p, p] = 1.0
            if p in fixed:
                b[p] = fixed[p]
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    wt = stencils[y, x, 1 + dy, 1 + dx]
                    if wt:
                        A[p, (y + dy) * w + (x + dx)] -= wt
    return np.linalg.solve(A, b).reshape(h, w)


def random_seeds(rng, shape, count):
    h, w = shape
    flat = rng.choice(h * w, size=count, replace=False)
    return [((int(i % w), int(i // w)), float(rng.uniform(0.5, 10))) for i in flat]


def test_one_by_three_hand_solution():
    sys_ = assemble((1, 3), uniform_weights((1, 3)), [((0, 0), 1.0), ((2, 0), 3.0)])
    assert sys_.n == 1
    assert solve(sys_).values[0, 1] == pytest.approx(2.0, abs=1e-6)


def test_all_seeded_is_empty():
    seeds = [((x, y), float(x + y)) for y in range(2) for x in range(3)]
    sys_ = assemble((2, 3), uniform_weights((2, 3)), seeds)
    assert sys_.n == 0
    np.testing.assert_array_equal(solve(sys_).values, [[0, 1, 2], [1, 2, 3]])


def test_assembly_errors():
    st = uniform_weights((3, 3))
    with pytest.raises(ValueError):
        assemble((3, 3), st, [])
    with pytest.raises(ValueError):
        assemble((3, 3), st, [((3, 0), 1.0)])
    with pytest.raises(ValueError):
        assemble((3, 3), st * 2, [((0, 0), 1.0)])
    with pytest.raises(ValueError):
        assemble((3, 4), st, [((0, 0), 1.0)])


def test_equal_seeds_constant(rng):
    shape = (12, 15)
    seeds = [(xy, 8 / 3) for xy, _ in random_seeds(rng, shape, 7)]
    res = solve(assemble(shape, uniform_weights(shape), seeds))
    assert np.abs(res.values - 8 / 3).max() < 1e-9


def test_uniform_system_structure(rng):
    shape = (10, 10)
    sys_ = assemble(shape, uniform_weights(shape), random_seeds(rng, shape, 6))
    A = sys_.matrix
    assert sys_.symmetric and abs(A - A.T).max() <= 1e-10
    assert np.diff(A.indptr).max() <= 9
    diag = A.diagonal()
    off = np.abs(A).sum(axis=1).A1 - np.abs(diag)
    assert np.all(diag >= off - 1e-12)


@pytest.mark.parametrize("trial", range(10))
def test_cg_matches_dense_oracle(trial):
    rng = np.random.default_rng(100 + trial)
    shape = (10, 10)
    seeds = random_seeds(rng, shape, int(rng.integers(1, 20)))
    st = uniform_weights(shape)
    res = solve(assemble(shape, st, seeds), tol=1e-10)
    assert res.method == "cg"
    assert np.abs(res.values - dense_oracle(st, seeds)).max() < 1e-5
    vals = [v for _, v in seeds]
    assert res.values.min() >= min(vals) - 1e-9 and res.values.max() <= max(vals) + 1e-9


def test_image_weights_match_dense_oracle(rng):
    shape = (10, 10)
    img = rng.uniform(size=shape)
    st = ncc_weights(img)
    seeds = random_seeds(rng, shape, 12)
    res = solve(assemble(shape, st, seeds))
    assert np.abs(res.values - dense_oracle(st, seeds)).max() < 1e-5


def test_seeds_exact_and_order_invariant(rng):
    shape = (9, 11)
    seeds = random_seeds(rng, shape, 5)
    a = solve(assemble(shape, uniform_weights(shape), seeds), tol=1e-10).values
    b = solve(assemble(shape, uniform_weights(shape), seeds[::-1]), tol=1e-10).values
    for (x, y), v in seeds:
        assert a[y, x] == v
    assert np.abs(a - b).max() < 1e-6
    # enumerating pixels column-major (transposed problem) gives the transposed answer
    t_seeds = [((y, x), v) for (x, y), v in seeds]
    c = solve(assemble(shape[::-1], uniform_weights(shape[::-1]), t_seeds), tol=1e-10).values
    assert np.abs(a - c.T).max() < 1e-6


def test_solution_is_local_minimum(rng):
    shape = (8, 8)
    st = uniform_weights(shape)
    seeds = random_seeds(rng, shape, 5)
    res = solve(assemble(shape, st, seeds), tol=1e-12)
    free = np.ones(shape, dtype=bool)
    for (x, y), _ in seeds:
        free[y, x] = False
    base = quadratic_cost(res.values, st, free)
    for _ in range(100):
        pert = res.values + np.where(free, rng.normal(0, 0.05, size=shape), 0.0)
        assert base <= quadratic_cost(pert, st, free) + 1e-12


def test_direct_and_cg_agree(rng):
    shape = (7, 9)
    sys_ = assemble(shape, uniform_weights(shape), random_seeds(rng, shape, 4))
    a = solve(sys_, method="cg", tol=1e-12).values
    b = solve(sys_, method="direct").values
    assert np.abs(a - b).max() < 1e-8
    with pytest.raises(ValueError):
        solve(sys_, method="bogus")


def test_iteration_cap_reports_residual(rng):
    shape = (30, 30)
    res = solve(assemble(shape, uniform_weights(shape), random_seeds(rng, shape, 2)),
                tol=1e-14, max_iter=3)
    assert res.iterations == 3 and res.residual > 1e-14
    assert res.info["converged"] is False


def test_default_max_iter():
    assert default_max_iter(100) == 1000
    assert default_max_iter(10 ** 6) == 10_000


def test_singular_system_raises():
    # stencils that cut the free pixel off from every seed
    st = np.zeros((1, 4, 3, 3))
    st[0, 0, 1, 2] = 1.0  # pixel 0 -> pixel 1
    st[0, 1, 1, 0] = 1.0  # pixel 1 -> pixel 0
    st[0, 2, 1, 2] = 1.0
    st[0, 3, 1, 0] = 1.0
    sys_ = assemble((1, 4), st, [((3, 0), 1.0)])
    with pytest.raises(SolverError):
        solve(sys_, method="direct")


def test_forced_cg_on_image_weights(rng):
    shape = (10, 10)
    st = ncc_weights(rng.uniform(size=shape))
    seeds = random_seeds(rng, shape, 10)
    sys_ = assemble(shape, st, seeds)
    assert not sys_.symmetric
    res = solve(sys_, method="cg", tol=1e-12)
    assert res.method == "cg" and res.info["normal_equations"]
    assert np.abs(res.values - dense_oracle(st, seeds)).max() < 1e-5
