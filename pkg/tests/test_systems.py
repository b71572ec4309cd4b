import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import fsolve

from blockssm import systems as sy
from blockssm.systems import (
    CSTRParams, Normalizer, TrajectoryDataset, TwoTankParams, make_windows, rk4_integrate,
    random_step_input, simulate_cstr, simulate_twotank, split_dataset,
)

GOLDEN = Path(__file__).parent / "data" / "golden.json"


def test_rk4_exponential_decay():
    xs = rk4_integrate(lambda x, u: -x, [1.0], np.zeros(100), dt=0.01)
    assert abs(xs[-1, 0] - math.exp(-1.0)) < 1e-8


def test_rk4_zero_field_is_constant():
    xs = rk4_integrate(lambda x, u: np.zeros_like(x), [0.3, -2.0], np.zeros(50), dt=0.5, substeps=3)
    assert np.all(xs == np.array([0.3, -2.0]))


def test_rk4_rotation_nearly_conserves_radius():
    rot = lambda x, u: np.array([-x[1], x[0]])
    xs = rk4_integrate(rot, [1.0, 0.0], np.zeros(1000), dt=0.01)
    r = np.hypot(xs[:, 0], xs[:, 1])
    assert np.abs(r - 1.0).max() < 1e-9
    np.testing.assert_allclose(xs[-1], [math.cos(10.0), math.sin(10.0)], atol=1e-9)


def test_rk4_piecewise_constant_input():
    xs = rk4_integrate(lambda x, u: u, [0.0], np.array([[1.0], [2.0], [-1.0]]), dt=0.5)
    np.testing.assert_allclose(xs[:, 0], [0.0, 0.5, 1.5, 1.0])


def test_rk4_divergence_detected():
    with pytest.raises(sy.SimulationDivergence), np.errstate(over="ignore", invalid="ignore"):
        rk4_integrate(lambda x, u: x * x, [1e200], np.zeros(5), dt=1.0)
    with pytest.raises(ValueError):
        rk4_integrate(lambda x, u: x, [1.0], np.zeros(3), dt=0.0)


def test_rk4_substeps_converge():
    # halving the step reduces the error by about 2^4
    f = lambda x, u: np.array([math.sin(x[0]) + u[0]])
    U = np.full(20, 0.3)
    ref = rk4_integrate(f, [0.1], U, dt=0.5, substeps=64)[-1, 0]
    e1 = abs(rk4_integrate(f, [0.1], U, dt=0.5, substeps=1)[-1, 0] - ref)
    e2 = abs(rk4_integrate(f, [0.1], U, dt=0.5, substeps=2)[-1, 0] - ref)
    assert 8.0 < e1 / e2 < 32.0


def test_cstr_settles_to_equilibrium():
    p = CSTRParams()
    f = sy.cstr_rhs(p)
    U = np.full(3000, 300.0)
    Y = simulate_cstr(p, U)
    x_eq = fsolve(lambda x: f(x, [300.0]), Y[-1], xtol=1e-13)
    np.testing.assert_allclose(f(x_eq, [300.0]), 0.0, atol=1e-8)
    np.testing.assert_allclose(Y[-1], x_eq, rtol=1e-6)


def test_cstr_without_reaction_mixes_to_feed():
    p = CSTRParams(k0=0.0)
    Y = simulate_cstr(p, np.full(2000, 300.0), x0=(0.0, 300.0))
    # no reaction: concentration relaxes to the feed, temperature to a weighted mix
    q_over_v = p.q / p.V
    cool = p.UA / (p.V * p.rho * p.cp)
    t_eq = (q_over_v * p.Tf + cool * 300.0) / (q_over_v + cool)
    np.testing.assert_allclose(Y[-1], [p.Caf, t_eq], rtol=1e-8)


def test_cstr_output_length():
    assert simulate_cstr(CSTRParams(), np.full(7, 300.0)).shape == (7, 2)
    with pytest.raises(ValueError):
        simulate_cstr(CSTRParams(), np.zeros(0))


def test_twotank_fill_is_monotone():
    # valve closed, pump on: tank 1 rises monotonically from empty
    U = np.tile([0.0, 0.3], (200, 1))
    Y = simulate_twotank(TwoTankParams(), U)
    assert np.all(np.diff(Y[:, 0]) >= 0)


def test_twotank_fixed_point():
    # (1-valve) c1 pump = c2 sqrt(x1)  =>  sqrt(x1) = 2 (1-valve) pump
    p = TwoTankParams()
    valve, pump = 0.0, 0.2
    x1 = (2 * pump) ** 2
    x2 = (2 * pump) ** 2
    Y = simulate_twotank(p, np.tile([valve, pump], (50, 1)), x0=(x1, x2))
    np.testing.assert_allclose(Y, np.tile([x1, x2], (50, 1)), atol=1e-14)


def test_twotank_levels_stay_in_unit_interval():
    U = random_step_input(3, 3000, 2, (5, 50), (0.0, 1.0))
    Y = simulate_twotank(TwoTankParams(), U)
    assert Y.min() >= 0.0 and Y.max() <= 1.0


def test_twotank_input_validation():
    with pytest.raises(ValueError):
        simulate_twotank(TwoTankParams(), np.full((5, 2), 1.5))
    with pytest.raises(ValueError):
        simulate_twotank(TwoTankParams(), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        TwoTankParams(c1=0.0)


def test_random_steps_constant_when_hold_spans_series():
    U = random_step_input(1, 40, 2, (40, 40))
    assert np.all(U == U[0])


def test_random_steps_deterministic_and_uniform():
    a = random_step_input(9, 50_000, 1, (1, 3))
    b = random_step_input(9, 50_000, 1, (1, 3))
    assert np.array_equal(a, b)
    assert 0.45 <= a.mean() <= 0.55
    assert not np.array_equal(a, random_step_input(10, 50_000, 1, (1, 3)))


def test_random_steps_binary_channel():
    U = random_step_input(0, 500, 2, (5, 10), binary=[True, False])
    assert set(np.unique(U[:, 0])) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        random_step_input(0, 10, 1, (0, 3))


def _ds(T=9, nu=1, ny=1):
    t = np.arange(T, dtype=float)
    return TrajectoryDataset(np.stack([100 + t] * nu, 1), np.stack([t] * ny, 1))


def test_window_alignment():
    w = make_windows(_ds(9), N=3, n_p=2)
    assert len(w) == 5
    np.testing.assert_array_equal(w.y_histories[0, :, 0], [0, 1])
    np.testing.assert_array_equal(w.u_futures[0, :, 0], [101, 102, 103])
    np.testing.assert_array_equal(w.y_futures[0, :, 0], [2, 3, 4])
    np.testing.assert_array_equal(w.y_futures[-1, :, 0], [6, 7, 8])
    assert len(make_windows(_ds(9), N=3, n_p=2, stride=2)) == 3


def test_window_preconditions():
    with pytest.raises(ValueError):
        make_windows(_ds(9), N=8, n_p=2)
    with pytest.raises(ValueError):
        make_windows(_ds(9), N=0, n_p=1)


def test_split_normalizes_with_train_statistics_only():
    ds = _ds(30, nu=1, ny=2)
    train, dev, test = split_dataset(ds)
    assert (len(train), len(dev), len(test)) == (10, 10, 10)
    assert train.Y.min() == 0.0 and train.Y.max() == 1.0
    assert dev.Y.min() > 1.0  # dev/test values scaled by train range, not their own
    np.testing.assert_allclose(train.normalizer.invert_y(test.Y), ds.Y[20:])
    assert test.offset == 20
    raw = split_dataset(ds, normalize=False)
    np.testing.assert_array_equal(raw[2].Y, ds.Y[20:])


def test_normalizer_constant_channel_and_round_trip():
    n = Normalizer.fit(np.ones((4, 1)), np.array([[1.0], [3.0], [2.0], [5.0]]))
    U, Y = n.apply(np.ones((2, 1)), np.array([[3.0], [5.0]]))
    np.testing.assert_array_equal(U, 0.0)
    np.testing.assert_array_equal(Y, [[0.5], [1.0]])
    again = Normalizer.from_dict(json.loads(json.dumps(n.to_dict())))
    np.testing.assert_array_equal(again.invert_y(Y), [[3.0], [5.0]])


def test_split_and_window_lengths():
    ds = sy.make_twotank_dataset(T=600)
    tr, dv, te = sy.split_and_window(ds, N=16, n_p=4)
    assert len(tr) == 200 - 16 - 4 + 1
    assert tr.u_futures.shape == (181, 16, 2)
    with pytest.raises(ValueError):
        sy.split_and_window(ds, N=200, n_p=4)


def _aero_rows(n, rng):
    return rng.normal(size=(n, 15))


def test_load_aero(tmp_path, rng):
    data = _aero_rows(20, rng)
    path = tmp_path / "aero.csv"
    with open(path, "w") as fh:
        fh.write("# aerodynamic body\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    ds = sy.load_aero(path)
    assert ds.nu == 10 and ds.ny == 5 and ds.dt == 0.02
    np.testing.assert_array_equal(ds.Y, data[:, 10:])


def test_load_aero_rejects_wrong_columns(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(ValueError, match="expected 15 columns"):
        sy.load_aero(path)


def test_dataset_file_round_trip(tmp_path):
    ds = sy.make_cstr_dataset(T=50)
    sy.save_dataset(ds, tmp_path / "c.csv")
    back = sy.load_dataset(tmp_path / "c.csv")
    assert back.name == "cstr" and back.dt == ds.dt
    assert np.array_equal(back.U, ds.U) and np.array_equal(back.Y, ds.Y)


def test_linear_dataset_is_consistent():
    ds, (A, B, C) = sy.make_linear_dataset(seed=3, T=200)
    assert max(abs(np.linalg.eigvals(A))) == pytest.approx(0.9)
    X = np.linalg.solve(C, ds.Y.T).T
    np.testing.assert_allclose(X[1:], X[:-1] @ A.T + ds.U[:-1] @ B.T, atol=1e-12)


@pytest.mark.parametrize("name", ["cstr", "twotank"])
def test_golden_runs_are_byte_stable(name):
    golden = json.loads(GOLDEN.read_text())[name]
    ds = sy.make_cstr_dataset() if name == "cstr" else sy.make_twotank_dataset()
    assert ds.Y.shape == (10_000, 2)
    np.testing.assert_array_equal(ds.Y[[0, 1, 4999, 9999]], golden["samples"])
    assert sy.series_checksum(ds.U) == golden["u_sha256"]
    assert sy.series_checksum(ds.Y) == golden["y_sha256"]
