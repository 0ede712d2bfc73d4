import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from geoguide import tensorkit as tk
from geoguide.errors import DimensionError, StateError

from conftest import max_rel_error, numeric_grads, random_params, taped_grads


# --------------------------------------------------------------------------
# cosine_rows


def test_cosine_rows_self_similarity():
    a = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(tk.cosine_rows(a, a), 1.0, atol=1e-15)


def test_cosine_rows_antipodal():
    a = np.random.default_rng(1).normal(size=(5, 4))
    np.testing.assert_allclose(tk.cosine_rows(a, -a), -1.0, atol=1e-15)


def test_cosine_rows_45_degrees():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(tk.cosine_rows(a, b), [1 / np.sqrt(2)] * 2, rtol=1e-15)


def test_cosine_rows_zero_row_is_zero():
    a = np.array([[0.0, 0.0], [1.0, 2.0]])
    b = np.array([[3.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(tk.cosine_rows(a, b), [0.0, 0.0])


def test_cosine_rows_shape_mismatch():
    with pytest.raises(DimensionError):
        tk.cosine_rows(np.ones((3, 2)), np.ones((2, 2)))


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (6, 3), elements=st.floats(-1e6, 1e6, allow_nan=False)),
    hnp.arrays(np.float64, (6, 3), elements=st.floats(-1e6, 1e6, allow_nan=False)),
)
def test_cosine_rows_bounded(a, b):
    cos = tk.cosine_rows(a, b)
    assert np.all(np.isfinite(cos))
    assert np.all(np.abs(cos) <= 1 + 1e-12)


def test_cosine_matrix_matches_rows():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(7, 5))
    full = tk.cosine_matrix(a, b)
    for k in range(3):
        np.testing.assert_allclose(full[k], tk.cosine_rows(np.repeat(a[k : k + 1], 7, 0), b), atol=1e-15)


# --------------------------------------------------------------------------
# forward_adapter


def test_adapter_zero_map():
    params = tk.ParamStore.init(9, 16).zeros_like()
    geo = np.random.default_rng(3).normal(size=(10, 9))
    np.testing.assert_array_equal(tk.forward_adapter(geo, params), np.zeros((10, 16)))


@pytest.mark.parametrize("c", [4, 5, 7])
def test_adapter_identity_like(c):
    # C1 == H; W2 = eye(H, C) pads with zeros or truncates
    params = tk.ParamStore.init(5, c, hidden=5).zeros_like()
    params["adapter.w1"] = np.eye(5)
    params["adapter.w2"] = np.eye(5, c)
    geo = np.abs(np.random.default_rng(4).normal(size=(6, 5)))
    expected = np.zeros((6, c))
    m = min(5, c)
    expected[:, :m] = geo[:, :m]
    np.testing.assert_array_equal(tk.forward_adapter(geo, params), expected)


def test_adapter_matches_loop_recomputation():
    rng = np.random.default_rng(7)
    geo = rng.normal(size=(4, 3))
    params = random_params(rng, c1=3, c=5, hidden=6)
    w1, b1, w2, b2 = (params[k] for k in ("adapter.w1", "adapter.b1", "adapter.w2", "adapter.b2"))
    expected = np.zeros((4, 5))
    for i in range(4):
        hidden = [max(0.0, sum(geo[i, a] * w1[a, j] for a in range(3)) + b1[0, j]) for j in range(6)]
        for o in range(5):
            expected[i, o] = sum(hidden[j] * w2[j, o] for j in range(6)) + b2[0, o]
    np.testing.assert_allclose(tk.forward_adapter(geo, params), expected, atol=1e-12)


def test_adapter_shape_error_names_both_shapes():
    params = tk.ParamStore.init(9, 16)
    with pytest.raises(DimensionError, match=r"\(5, 8\).*\(9, 18\)"):
        tk.forward_adapter(np.zeros((5, 8)), params)


def test_adapter_deterministic():
    rng = np.random.default_rng(8)
    geo = rng.normal(size=(30, 9))
    params = random_params(rng)
    a = tk.forward_adapter(geo, params)
    b = tk.forward_adapter(geo.copy(), params.copy())
    assert a.tobytes() == b.tobytes()


def test_adapter_normalized_output_has_unit_rows():
    rng = np.random.default_rng(9)
    out = tk.forward_adapter(rng.normal(size=(8, 9)), random_params(rng), normalize=True)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------------------
# backward


def test_backward_sum_of_zero_adapter():
    params = tk.ParamStore.init(9, 16).zeros_like()
    geo = np.random.default_rng(10).normal(size=(11, 9))
    grads = taped_grads(lambda p: tk.total(tk.forward_adapter(geo, p)), params)
    np.testing.assert_array_equal(grads["adapter.b2"], np.full((1, 16), 11.0))


def test_backward_untouched_params_are_exactly_zero():
    rng = np.random.default_rng(11)
    geo = rng.normal(size=(12, 9))
    grads = taped_grads(lambda p: tk.mean(tk.forward_adapter(geo, p)), random_params(rng))
    for name in ("uncertainty.w", "uncertainty.b", "mask.w", "mask.b"):
        assert np.all(grads[name] == 0.0)


def test_backward_without_tape_is_state_error():
    with pytest.raises(StateError):
        tk.backward(np.asarray(1.0))


def test_backward_on_foreign_tape_is_state_error():
    t1, t2 = tk.Tape(), tk.Tape()
    x = t1.leaf("x", np.ones((1, 1)))
    with pytest.raises(StateError):
        t2.backward(tk.total(x))


def test_backward_needs_scalar():
    tape = tk.Tape()
    x = tape.leaf("x", np.ones((2, 2)))
    with pytest.raises(DimensionError):
        tk.backward(tk.relu(x))


def test_ops_on_plain_arrays_do_not_tape():
    out = tk.cosine_rows(np.ones((2, 3)), np.ones((2, 3)))
    assert isinstance(out, np.ndarray)


def _leaf_check(fn, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    values = {f"x{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    if positive:
        values = {k: np.abs(v) + 0.1 for k, v in values.items()}
    params = tk.ParamStore(values)
    analytic = taped_grads(lambda p: fn(*(p[k] for k in values)), params)
    numeric = numeric_grads(lambda p: fn(*(p[k] for k in values)), params)
    assert max_rel_error(analytic, numeric) < 1e-5


def test_grad_row_normalize():
    w = np.random.default_rng(120).normal(size=(5, 3))
    _leaf_check(lambda x: tk.mse(tk.row_normalize(x), w), (5, 3), seed=20)


def test_grad_cosine_rows():
    _leaf_check(lambda a, b: tk.total(tk.cosine_rows(a, b)), (6, 4), (6, 4), seed=21)


def test_grad_cosine_matrix():
    _leaf_check(lambda a, b: tk.total(tk.sigmoid(tk.cosine_matrix(a, b))), (3, 4), (7, 4), seed=22)


def test_grad_weighted_segment_mean():
    seg = np.array([0, 1, 0, 2, 2, 1, 0])
    w = np.random.default_rng(23).normal(size=(3, 2))
    _leaf_check(
        lambda x, wt: tk.total(tk.cosine_rows(tk.segment_weighted_mean(x, wt, seg, 3), w)),
        (7, 2),
        (7, 1),
        seed=23,
        positive=True,
    )


def test_grad_gram_mse_gather():
    idx = np.array([0, 2, 2, 1, 0])
    target = np.random.default_rng(24).normal(size=(5, 5))
    _leaf_check(lambda x: tk.mse(tk.gram(tk.gather_rows(x, idx)), target), (3, 4), seed=24)


def test_grad_bce():
    target = (np.random.default_rng(25).random((4, 5)) > 0.5).astype(float)
    _leaf_check(lambda x: tk.bce(target, tk.sigmoid(x)), (4, 5), seed=25)


def test_bce_clamp_gives_finite_bounded_loss():
    loss = tk.bce(np.ones((1, 1)), np.zeros((1, 1)))
    assert np.isfinite(loss) and loss <= -np.log(1e-7) + 1e-12


# --------------------------------------------------------------------------
# ParamStore and checkpoints


def test_paramstore_roundtrip_bit_exact(tmp_path):
    params = random_params(np.random.default_rng(30))
    path = tmp_path / "p.ggpk"
    params.save(path)
    back = tk.ParamStore.load(path)
    assert back.names() == params.names()
    for k in params.names():
        assert back[k].tobytes() == params[k].tobytes()


def test_checkpoint_layout():
    params = tk.ParamStore({"a": np.array([[1.5, -2.0]])})
    data = params.to_bytes()
    assert data[:4] == b"GGPK"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 1
    assert data[12:13] == b"a"
    assert data[13:21] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    np.testing.assert_array_equal(np.frombuffer(data[21:], "<f8"), [1.5, -2.0])


@pytest.mark.parametrize("cut", [3, 10, 30])
def test_truncated_checkpoint_is_state_error(cut):
    data = random_params(np.random.default_rng(31)).to_bytes()
    with pytest.raises(StateError):
        tk.load_tensors(data[:cut])


def test_paramstore_shapes_are_fixed():
    params = tk.ParamStore.init(9, 16)
    with pytest.raises(DimensionError):
        params["mask.w"] = np.eye(3)


def test_paramstore_default_shapes():
    params = tk.ParamStore.init(9, 16)
    assert params.dims == (9, 18, 16)
    assert params["uncertainty.w"].shape == (25, 1)
    assert params["mask.w"].shape == (16, 16)
