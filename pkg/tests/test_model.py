import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import protocol_rows, random_params
from oracles import column_rel_error, mp_central_jacobian, scalar_signals
from t1ballstick.acquisition import AcquisitionProtocol, Measurement
from t1ballstick.model import (
    DEFAULT_BOUNDS,
    ModelOptions,
    ParamBounds,
    TissueParams,
    clamp_params,
    jacobian_batch,
    polar_to_cartesian,
    predict_batch,
    predict_signal,
    predict_signals,
    signal_jacobian,
)

ALL_OPTS = [ModelOptions(e, f) for e in ("squared", "linear") for f in ("product", "standard")]
EXAMPLE = TissueParams(f=0.5, lambda_par=2.0, lambda_iso=1.0, t1_stick=0.8, t1_ball=4.0, theta=0.0, phi=0.0)
EXAMPLE_M = Measurement(b=1.0, g=(0, 0, 1), ti=1.0, te=0.08, tr=7.5)


@pytest.mark.parametrize(
    "theta, phi, expected",
    [(0.0, 1.234, (0, 0, 1)), (np.pi / 2, 0.0, (1, 0, 0)), (np.pi / 2, np.pi / 2, (0, 1, 0))],
)
def test_polar_to_cartesian(theta, phi, expected):
    np.testing.assert_allclose(polar_to_cartesian(theta, phi), expected, atol=1e-15)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_polar_to_cartesian_unit_norm(theta, phi):
    assert abs(np.linalg.norm(polar_to_cartesian(theta, phi)) - 1.0) < 1e-12


def test_default_bounds_are_table_values():
    b = DEFAULT_BOUNDS.as_dict()
    assert b["lambda_iso"] == [0.1, 3.0] and b["lambda_par"] == [0.1, 3.0]
    assert b["f"] == [0.0, 1.0]
    assert b["t1_ball"] == [0.01, 5.0] and b["t1_stick"] == [0.01, 5.0]
    assert b["theta"] == [0.0, np.pi] and b["phi"] == [-np.pi, np.pi]
    DEFAULT_BOUNDS.validate()


def test_invalid_options_rejected():
    with pytest.raises(ValueError):
        ModelOptions("cubed", "product")
    with pytest.raises(ValueError):
        ModelOptions("squared", "weird")
    with pytest.raises(ValueError):
        ParamBounds((0,) * 7, (0,) * 7).validate()


@pytest.mark.parametrize("f", [0.0, 0.3, 1.0])
def test_saturated_inversion_at_b0_gives_unit_signal(f):
    p = TissueParams(f, 1.0, 1.0, 0.01, 0.01, 0.4, 0.2)
    m = Measurement(0.0, (0, 0, 0), 4.673, 0.08, 7.5)
    assert predict_signal(p, m) == pytest.approx(1.0, abs=1e-15)


def test_pure_ball_monoexponential():
    p = TissueParams(0.0, 1.0, 1.0, 0.01, 0.01, 0.0, 0.0)
    m = Measurement(1.0, (0, 0, 1), 4.673, 0.08, 7.5)
    assert predict_signal(p, m) == pytest.approx(np.exp(-1.0), rel=1e-14)


def test_derived_example_signal():
    # 40-digit mpmath value of the same expression
    assert predict_signal(EXAMPLE, EXAMPLE_M) == pytest.approx(0.20766713982073872, rel=1e-14)
    assert predict_signal(EXAMPLE, EXAMPLE_M) == pytest.approx(0.20767, abs=5e-6)


def test_singleton_and_duplicates(small_protocol):
    m = small_protocol.measurements[3]
    one = AcquisitionProtocol.from_measurements([m], validate=False)
    assert predict_signals(EXAMPLE, one)[0] == predict_signal(EXAMPLE, m)
    dup = AcquisitionProtocol.from_measurements([m, m], validate=False)
    s = predict_signals(EXAMPLE, dup)
    assert s[0] == s[1]


@pytest.mark.parametrize("opts", ALL_OPTS, ids=lambda o: f"{o.stick_exponent}-{o.ir_form}")
def test_predict_matches_scalar_oracle(mudi_protocol, opts):
    rng = np.random.default_rng(3)
    rows = protocol_rows(mudi_protocol)
    for params in random_params(rng, 3):
        expected = scalar_signals(params, rows, stick_exponent=opts.stick_exponent, ir_form=opts.ir_form)
        np.testing.assert_allclose(predict_signals(params, mudi_protocol, opts), expected, rtol=0, atol=1e-12)


def test_batch_rows_independent_of_batch(mudi_protocol):
    P = random_params(np.random.default_rng(1), 50)
    full = predict_batch(P, mudi_protocol)
    for i in (0, 17, 49):
        assert np.array_equal(full[i], predict_signals(P[i], mudi_protocol))


def test_clamp_examples():
    p = TissueParams(0.5, 1.0, 5.0, 1.0, -1.0, 0.1, 0.1)
    out = clamp_params(p)
    assert out.lambda_iso == 3.0
    assert out.f == 0.5
    assert out.t1_ball == 0.01
    with pytest.raises(ValueError):
        clamp_params(np.array([np.nan, 1, 1, 1, 1, 0, 0]))


@given(st.lists(st.floats(-100, 100), min_size=7, max_size=7))
def test_clamp_postcondition(values):
    out = clamp_params(np.array(values))
    assert np.all(out >= DEFAULT_BOUNDS.lo) and np.all(out <= DEFAULT_BOUNDS.hi)
    inside = (np.array(values) >= DEFAULT_BOUNDS.lo) & (np.array(values) <= DEFAULT_BOUNDS.hi)
    assert np.array_equal(out[inside], np.array(values)[inside])


# ------------------------------------------------------------------ jacobian


def _fd_check(params, protocol, opts, tol=1e-5):
    J = signal_jacobian(params, protocol, opts)
    fd = mp_central_jacobian(params, protocol_rows(protocol), 1e-6, stick_exponent=opts.stick_exponent, ir_form=opts.ir_form)
    assert column_rel_error(J, fd) < tol


@pytest.mark.parametrize("opts", ALL_OPTS, ids=lambda o: f"{o.stick_exponent}-{o.ir_form}")
def test_jacobian_matches_finite_differences(mudi_protocol, small_protocol, opts):
    rng = np.random.default_rng(11)
    _fd_check(EXAMPLE.to_array() + np.array([0, 0, 0, 0, 0, 0.3, 0.2]), mudi_protocol, opts)
    for params in random_params(rng, 8, margin=0.05):
        _fd_check(params, small_protocol, opts)


def test_jacobian_derived_example(mudi_protocol):
    # theta=0 sits on a bound; nudge inside so central differences stay in-domain
    p = EXAMPLE.to_array()
    p[5] = 1e-3
    _fd_check(p, mudi_protocol, ModelOptions())


def test_jacobian_f_column_zero_when_compartments_equal():
    # b=0 and equal T1 times: stick and ball contribute identically
    prot = AcquisitionProtocol([0.0, 0.0], [(0, 0, 0)] * 2, [0.5, 2.0], [0.08] * 2, [7.5] * 2)
    J = signal_jacobian([0.4, 1.0, 2.0, 1.3, 1.3, 0.5, 0.5], prot)
    assert np.all(J[:, 0] == 0)


def test_jacobian_lambda_iso_zero_without_ball(mudi_protocol):
    J = signal_jacobian([1.0, 1.0, 2.0, 1.3, 0.7, 0.5, 0.5], mudi_protocol)
    assert np.all(J[:, 2] == 0)


def test_jacobian_batch_signal_equals_predict(mudi_protocol):
    P = random_params(np.random.default_rng(5), 20)
    S, _ = jacobian_batch(P, mudi_protocol)
    assert np.array_equal(S, predict_batch(P, mudi_protocol))


# ---------------------------------------------------------------- properties


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_antipodal_symmetry_squared(seed):
    from t1ballstick.acquisition import mudi_like_protocol

    prot = mudi_like_protocol()
    p = random_params(np.random.default_rng(seed), 1)[0]
    q = p.copy()
    q[5] = np.pi - p[5]
    q[6] = p[6] + np.pi if p[6] < 0 else p[6] - np.pi
    np.testing.assert_allclose(predict_signals(p, prot), predict_signals(q, prot), rtol=0, atol=1e-13)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 2.9), st.floats(0.01, 0.09))
def test_monotone_in_lambda_iso(seed, lam, dlam):
    from t1ballstick.acquisition import mudi_like_protocol

    prot = mudi_like_protocol()
    p = random_params(np.random.default_rng(seed), 1)[0]
    p[0] = min(p[0], 0.99)
    p[2] = lam
    q = p.copy()
    q[2] = lam + dlam
    dw = prot.b > 0
    assert np.all(predict_signals(q, prot)[dw] <= predict_signals(p, prot)[dw])


@settings(deadline=None, max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_signal_in_unit_interval(seed):
    from t1ballstick.acquisition import mudi_like_protocol

    prot = mudi_like_protocol()
    rng = np.random.default_rng(seed)
    P = rng.uniform(DEFAULT_BOUNDS.lo, DEFAULT_BOUNDS.hi, size=(20, 7))
    for opts in (ModelOptions("squared", "product"), ModelOptions("squared", "standard")):
        S = predict_batch(P, prot, opts)
        assert S.min() >= 0 and S.max() <= 1 + 1e-12
