import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fm_difficulty.features import DesignRow
from fm_difficulty.fm import (FmModel, Param, SchemaMismatchError, clamp, get_param, load_model, multilinear_terms,
                              predict, predict_batch, predict_clamped, save_model, set_param)


def double_loop(model: FmModel, x: DesignRow) -> float:
    """Direct evaluation of the second-order model over all active pairs."""
    y = model.w0
    idx, val = x.indices, x.values
    for a in range(len(idx)):
        y += model.w[idx[a]] * val[a]
        for b in range(a + 1, len(idx)):
            y += float(np.dot(model.V[idx[a]], model.V[idx[b]])) * val[a] * val[b]
    return y


def random_case(rng, width=20, k=2, active=3):
    model = FmModel(rng.normal(size=width), rng.normal(size=(width, k)))
    idx = np.sort(rng.choice(width, size=active, replace=False))
    return model, DesignRow(idx, rng.normal(size=active), 0.0)


def test_zero_model_predicts_zero():
    x = DesignRow([0, 3], [1.0, 2.5], 0.0)
    assert predict(FmModel.zeros(5, 3), x) == 0.0


def test_single_active_feature_gives_bias():
    rng = np.random.default_rng(0)
    m = FmModel(rng.normal(size=4), rng.normal(size=(4, 3)))
    assert predict(m, DesignRow([2], [1.0], 0.0)) == pytest.approx(m.w[2], abs=1e-15)


def test_seeded_instance_matches_double_loop():
    model, x = random_case(np.random.default_rng(7), k=2, active=3)
    assert predict(model, x) == pytest.approx(double_loop(model, x), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0, 1, 2, 8]), st.integers(1, 8))
def test_predict_matches_double_loop(seed, k, active):
    model, x = random_case(np.random.default_rng(seed), width=10, k=k, active=active)
    assert predict(model, x) == pytest.approx(double_loop(model, x), rel=1e-10, abs=1e-10)


@pytest.mark.parametrize("raw, expected", [(0.2, 1.0), (57.0, 30.0), (3.7, 3.7)])
def test_clamp(raw, expected):
    assert clamp(raw) == expected


def test_predict_clamped():
    m = FmModel(np.array([0.2, 100.0]), np.zeros((2, 1)))
    assert predict_clamped(m, DesignRow([0], [1.0], 0)) == 1.0
    assert predict_clamped(m, DesignRow([1], [1.0], 0)) == 30.0


def test_predict_batch_matches_rowwise():
    rng = np.random.default_rng(3)
    model = FmModel(rng.normal(size=15), rng.normal(size=(15, 4)))
    X = sp.random(40, 15, density=0.3, random_state=4, format="csr")
    batch = predict_batch(model, X)
    for i in range(40):
        row = DesignRow(X[i].indices, X[i].data, 0.0)
        assert batch[i] == pytest.approx(predict(model, row), abs=1e-12)


def test_predict_rejects_out_of_range_row():
    with pytest.raises(IndexError):
        predict(FmModel.zeros(3, 1), DesignRow([5], [1.0], 0))


def test_multilinear_linear_term():
    model, _ = random_case(np.random.default_rng(1))
    g, h = multilinear_terms(model, DesignRow([4, 9], [1.0, 1.0], 0), Param("w", 4))
    assert h == 1.0


def test_multilinear_no_partner():
    model, _ = random_case(np.random.default_rng(1))
    _, h = multilinear_terms(model, DesignRow([4], [1.0], 0), Param("v", 4, 1))
    assert h == 0.0


def test_multilinear_inactive_parameter():
    model, x = random_case(np.random.default_rng(2))
    inactive = next(i for i in range(model.schema_width) if i not in x.indices)
    g, h = multilinear_terms(model, x, Param("w", inactive))
    assert h == 0.0 and g == pytest.approx(predict(model, x))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_multilinear_reconstructs_prediction(seed):
    rng = np.random.default_rng(seed)
    model, x = random_case(rng, width=8, k=3, active=4)
    i = int(rng.choice(x.indices))
    param = Param("w", i) if rng.random() < 0.3 else Param("v", i, int(rng.integers(3)))
    g, h = multilinear_terms(model, x, param)
    theta = get_param(model, param)
    assert g + h * theta == pytest.approx(predict(model, x), abs=1e-10)
    # linear in theta: moving the parameter moves the prediction by h * delta
    set_param(model, param, theta + 0.7)
    assert predict(model, x) == pytest.approx(g + h * (theta + 0.7), abs=1e-10)


def test_param_validation():
    m = FmModel.zeros(3, 2)
    for bad in (Param("x", 0), Param("w", 3), Param("v", 0, 2), Param("v", 0)):
        with pytest.raises(ValueError):
            get_param(m, bad)


def test_model_rejects_non_finite():
    with pytest.raises(ValueError):
        FmModel(np.array([np.nan]), np.zeros((1, 1)))


def test_save_load_round_trip(tmp_path):
    model, _ = random_case(np.random.default_rng(5))
    model.fingerprint = "abc"
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json", expected_fingerprint="abc")
    np.testing.assert_array_equal(back.w, model.w)
    np.testing.assert_array_equal(back.V, model.V)


def test_load_fingerprint_mismatch(tmp_path):
    save_model(FmModel.zeros(2, 1, fingerprint="aaa"), tmp_path / "m.json")
    with pytest.raises(SchemaMismatchError) as err:
        load_model(tmp_path / "m.json", expected_fingerprint="bbb")
    assert "aaa" in str(err.value) and "bbb" in str(err.value)


def test_k_zero_model_is_linear():
    m = FmModel(np.array([1.0, 2.0]), np.zeros((2, 0)))
    assert m.k == 0
    assert predict(m, DesignRow([0, 1], [1.0, 1.0], 0)) == 3.0
    assert predict_batch(m, sp.csr_matrix(np.array([[1.0, 1.0]])))[0] == 3.0
