import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gendd.errors import ConfigError, ValidationError
from gendd.schedule import MAX_BETA, NoiseSchedule, build_schedule, forward_noise, respace, respace_steps

# cosine schedule, M=10, recomputed by a pure-python direct product of (1 - beta)
COSINE_M10_ALPHA_BAR = [
    1.0, 0.972092737113969, 0.8987059205995089, 0.7869105111508292, 0.647478211146504,
    0.4938435904406378, 0.34080963975932416, 0.2031214741183376, 0.0940456126766538,
    0.02409172414008586, 2.4091724140085884e-05,
]


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_invariants(kind):
    s = build_schedule(kind, 1000)
    assert s.M == 1000 and s.alpha_bar.shape == (1001,)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1)) and s.betas.max() <= MAX_BETA
    np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alphas, rtol=0, atol=1e-12)


def test_default_kind_is_cosine():
    assert build_schedule().kind == "cosine"
    assert build_schedule().M == 1000


def test_cosine_m10_matches_direct_product():
    s = build_schedule("cosine", 10)
    np.testing.assert_allclose(s.alpha_bar, COSINE_M10_ALPHA_BAR, rtol=1e-13, atol=0)


def test_single_step_product():
    s = NoiseSchedule.from_betas([0.3])
    assert s.alpha_bar[1] == pytest.approx(0.7, abs=1e-15)
    assert build_schedule("linear", 1).alpha_bar[1] == 1 - build_schedule("linear", 1).betas[0]


def test_bad_args():
    with pytest.raises(ConfigError):
        build_schedule("sigmoid", 10)
    with pytest.raises(ValidationError):
        build_schedule("cosine", 0)
    with pytest.raises(ValidationError):
        NoiseSchedule.from_betas([0.1, 1.0])


def test_arrays_read_only():
    s = build_schedule("cosine", 10)
    with pytest.raises(ValueError):
        s.alpha_bar[3] = 0.5


def test_forward_noise_zero_eps_and_identity():
    s = build_schedule("cosine", 100)
    x0 = np.arange(5.0)
    np.testing.assert_allclose(forward_noise(s, x0, 40, np.zeros(5)), np.sqrt(s.alpha_bar[40]) * x0)
    ident = NoiseSchedule.from_betas(np.zeros(4))
    np.testing.assert_array_equal(forward_noise(ident, x0, 3, np.ones(5)), x0)


def test_forward_noise_errors():
    s = build_schedule("cosine", 100)
    with pytest.raises(ValidationError):
        forward_noise(s, np.zeros(3), 1, np.zeros(4))
    with pytest.raises(ValidationError):
        forward_noise(s, np.zeros(3), 0, np.zeros(3))
    with pytest.raises(ValidationError):
        forward_noise(s, torch.zeros(2, 3), torch.tensor([1, 101]), torch.zeros(2, 3))


def test_forward_noise_torch_per_row_steps():
    s = build_schedule("cosine", 100)
    x0, eps = torch.randn(3, 2, 4, dtype=torch.float64), torch.randn(3, 2, 4, dtype=torch.float64)
    m = torch.tensor([[1, 50], [100, 7], [3, 3]])
    out = forward_noise(s, x0, m, eps)
    for i in range(3):
        for j in range(2):
            ab = s.alpha_bar[int(m[i, j])]
            ref = np.sqrt(ab) * x0[i, j].numpy() + np.sqrt(1 - ab) * eps[i, j].numpy()
            np.testing.assert_allclose(out[i, j].numpy(), ref, rtol=1e-14)


def test_forward_noise_moments_m500():
    s = build_schedule("cosine", 1000)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(4)
    eps = rng.standard_normal((100_000, 4))
    xs = forward_noise(s, np.broadcast_to(x0, eps.shape), 500, eps)
    ab = s.alpha_bar[500]
    se_mean = np.sqrt((1 - ab) / eps.shape[0])
    assert np.all(np.abs(xs.mean(0) - np.sqrt(ab) * x0) < 4 * se_mean)
    se_var = (1 - ab) * np.sqrt(2 / (eps.shape[0] - 1))
    assert np.all(np.abs(xs.var(0, ddof=1) - (1 - ab)) < 4 * se_var)


@given(a=st.floats(-5, 5), m=st.integers(1, 100), seed=st.integers(0, 2**16))
def test_forward_noise_homogeneous(a, m, seed):
    s = build_schedule("cosine", 100)
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal(6), rng.standard_normal(6)
    np.testing.assert_allclose(forward_noise(s, a * x0, m, a * eps), a * forward_noise(s, x0, m, eps),
                               rtol=1e-12, atol=1e-12)


def test_respace_full_is_identity():
    s = build_schedule("cosine", 1000)
    v = respace(s, 1000)
    np.testing.assert_array_equal(v.steps, np.arange(1, 1001))
    np.testing.assert_array_equal(v.alphas, s.alphas)
    np.testing.assert_array_equal(v.alpha_bar, s.alpha_bar[1:])


def test_respace_64():
    v = respace(build_schedule("cosine", 1000), 64)
    assert v.S == 64 and v.steps[-1] == 1000
    assert np.all(np.diff(v.steps) > 0)


def test_respace_m10_s2_lookup():
    s = build_schedule("cosine", 10)
    v = respace(s, 2)
    np.testing.assert_array_equal(v.steps, [1, 10])
    assert v.alpha_bar[0] == COSINE_M10_ALPHA_BAR[1]
    assert v.alpha_bar[1] == COSINE_M10_ALPHA_BAR[10]


def test_respace_bad_s():
    s = build_schedule("cosine", 10)
    for S in (0, 11):
        with pytest.raises(ValidationError):
            respace(s, S)


@given(M=st.integers(1, 400), data=st.data())
def test_respace_properties(M, data):
    S = data.draw(st.integers(1, M))
    s = build_schedule("cosine", M)
    v = respace(s, S)
    assert v.S == S and v.steps[-1] == M and v.steps[0] >= 1
    assert np.all(np.diff(v.steps) > 0)
    np.testing.assert_array_equal(v.alpha_bar, s.alpha_bar[v.steps])
    np.testing.assert_allclose(np.cumprod(v.alphas), v.alpha_bar, rtol=1e-10)
    assert np.all(v.posterior_variance() >= 0)
    assert respace_steps(M, S).tolist() == v.steps.tolist()
