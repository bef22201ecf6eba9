import numpy as np
import pytest

from cardioem.noise import (
    NoiseCoeff,
    NoisePath,
    eval_coeff,
    increment_at,
    wiener_increments,
)


def test_same_seed_identical_sequences():
    a = wiener_increments(42, 200, 0.0125, "v")
    b = wiener_increments(42, 200, 0.0125, "v")
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    a = wiener_increments(1, 50, 0.0125, "v")
    b = wiener_increments(2, 50, 0.0125, "v")
    assert not np.array_equal(a, b)


def test_increment_regenerable_from_index():
    seq = wiener_increments(7, 100, 0.05, "w")
    for k in (0, 17, 99):
        assert increment_at(7, k, 0.05, "w") == seq[k]


def test_statistics_mean_and_variance():
    n, dt = 100_000, 0.0125
    seq = wiener_increments(123, n, dt, "v")
    assert abs(seq.mean()) < 4 * np.sqrt(dt / n)
    assert abs(seq.var() - dt) < 0.05 * dt


def test_channels_decorrelated():
    n, dt = 100_000, 0.0125
    a = wiener_increments(9, n, dt, "v")
    b = wiener_increments(9, n, dt, "w")
    rho = np.corrcoef(a, b)[0, 1]
    assert abs(rho) < 0.02


def test_modes_decorrelated():
    n, dt = 50_000, 0.0125
    a = wiener_increments(9, n, dt, "v", mode=0)
    b = wiener_increments(9, n, dt, "v", mode=1)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.03


def test_rejects_bad_dt():
    with pytest.raises(ValueError):
        wiener_increments(0, 10, 0.0, "v")


def test_noise_path_shape_and_determinism():
    p = NoisePath(seed=5, dt=0.01, n_steps=40, n_modes=3)
    inc = p.increments("v")
    assert inc.shape == (40, 3)
    assert np.array_equal(inc, NoisePath(5, 0.01, 40, 3).increments("v"))


# ---------------------------------------------------------------------------
# coefficients


def test_constant_coefficient():
    c = NoiseCoeff("constant", 0.5)
    assert eval_coeff(c, 0.0) == 0.5
    assert eval_coeff(c, -17.3) == 0.5
    assert np.all(eval_coeff(c, np.linspace(-5, 5, 11)) == 0.5)


def test_zero_amplitude_reduction():
    c = NoiseCoeff("constant", 0.0)
    assert np.all(eval_coeff(c, np.linspace(-3, 3, 7)) == 0.0)


def test_linear_clipped():
    c = NoiseCoeff("linear-clipped", 1.0, z_cap=2.0)
    assert eval_coeff(c, 3.0) == 2.0
    assert eval_coeff(c, -3.0) == -2.0
    assert eval_coeff(c, 0.5) == 0.5


def test_mode_scaling():
    c = NoiseCoeff("constant", 0.6)
    assert eval_coeff(c, 0.0, mode=0) == pytest.approx(0.6)
    assert eval_coeff(c, 0.0, mode=2) == pytest.approx(0.2)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        NoiseCoeff("quadratic", 1.0)


@pytest.mark.parametrize("kind,beta0", [("constant", 0.5), ("linear-clipped", 1.0)])
def test_growth_and_lipschitz_conditions(kind, beta0):
    c = NoiseCoeff(kind, beta0, z_cap=2.0)
    Cb = c.growth_cap
    rng = np.random.default_rng(2)
    z = rng.uniform(-10, 10, size=2000)
    vals = eval_coeff(c, z)
    assert np.all(vals**2 <= Cb * (1 + z**2) + 1e-12)
    z1 = rng.uniform(-10, 10, size=2000)
    z2 = rng.uniform(-10, 10, size=2000)
    lhs = np.abs(eval_coeff(c, z1) - eval_coeff(c, z2))
    assert np.all(lhs <= np.sqrt(Cb) * np.abs(z1 - z2) + 1e-12)


def test_mode_amplitudes_square_summable():
    c = NoiseCoeff("constant", 1.0)
    amps = np.array([eval_coeff(c, 0.0, mode=m) for m in range(200)])
    partial = np.cumsum(amps**2)
    assert partial[-1] < np.pi**2 / 6 + 1e-6
