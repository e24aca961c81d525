import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cualab.adapter import (
    STOCHASTIC_ABLATIONS,
    AblationKind,
    AdapterMode,
    CuaLayer,
    adapter_backward,
    forward,
    forward_plain,
    forward_sign_constrained,
    load_layer,
    make_ablation,
    read_manifest,
    save_layer,
    weight_checksum,
)
from cualab.cayley import BlockDiagonalUnitary, SkewBlockParams

SIGN = AdapterMode.SIGN_CONSTRAINED
ORTH = AdapterMode.ORTHOGONAL
FREE = AdapterMode.UNCONSTRAINED
ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def _rot_plus_identity():
    return BlockDiagonalUnitary(np.stack([ROT, np.eye(2)]))


# -- sign-constrained forward --------------------------------------------


def test_sign_identity_absorption():
    layer = CuaLayer.identity(SIGN, np.eye(4))
    x = np.array([1.0, 2.0, -3.0, 0.0])
    assert np.array_equal(forward_sign_constrained(layer, x), x)


def test_sign_diagonal_absorption_example():
    layer = CuaLayer(SIGN, np.diag([1.0, -1.0, 1.0, -1.0]), np.eye(4))
    x = np.array([1.0, 2.0, -3.0, 0.0])
    assert np.array_equal(forward_sign_constrained(layer, x), x)


def test_sign_rotation_by_hand():
    layer = CuaLayer(SIGN, _rot_plus_identity(), np.eye(4))
    y = forward_sign_constrained(layer, np.array([3.0, 4.0, 0.0, 0.0]))
    assert np.array_equal(y, [4.0, 3.0, 0.0, 0.0])


def test_sign_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_sign_constrained(CuaLayer.identity(SIGN, np.eye(4)), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.sampled_from([4, 8, 16]))
def test_sign_diagonal_absorption_property(seed, d):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((3, d))
    x = rng.standard_normal(d)
    x[rng.random(d) < 0.2] = 0.0
    D = np.diag(rng.choice([-1.0, 1.0], d))
    a = forward_sign_constrained(CuaLayer(SIGN, D, W), x)
    b = forward_sign_constrained(CuaLayer.identity(SIGN, W), x)
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sign_pattern_and_norm_bound(seed):
    rng = np.random.default_rng(seed)
    layer = CuaLayer.from_params(SIGN, SkewBlockParams.random(8, 4, 1.0, seed), np.eye(8))
    x = rng.standard_normal(8)
    x[rng.random(8) < 0.3] = 0.0
    z = forward_sign_constrained(layer, x)
    nz = np.abs(z) > 0
    assert np.array_equal(np.sign(z)[nz], np.sign(x)[nz])
    assert np.all(z[x == 0] == 0)
    assert np.linalg.norm(z) <= np.linalg.norm(x) * (1 + 1e-12)
    if np.all(x != 0):
        assert np.isclose(np.linalg.norm(z), np.linalg.norm(x), rtol=1e-12)


# -- plain forward --------------------------------------------------------


def test_plain_identity_gives_wx(rng):
    W = rng.standard_normal((3, 4))
    x = rng.standard_normal(4)
    np.testing.assert_allclose(forward_plain(CuaLayer.identity(ORTH, W), x), W @ x, atol=1e-14)


def test_plain_rotation_by_hand():
    layer = CuaLayer(ORTH, ROT, np.eye(2))
    assert np.array_equal(forward_plain(layer, np.array([3.0, 4.0])), [-4.0, 3.0])


def test_unconstrained_scaling_not_norm_preserving():
    layer = CuaLayer(FREE, 2 * np.eye(4), np.eye(4))
    x = np.array([1.0, -2.0, 0.5, 3.0])
    assert np.array_equal(forward(layer, x), 2 * x)


def test_orthogonal_mode_rejects_non_orthogonal():
    with pytest.raises(ValueError):
        CuaLayer(ORTH, 2 * np.eye(4), np.eye(4))


def test_transform_weight_dimension_check():
    with pytest.raises(ValueError):
        CuaLayer(ORTH, np.eye(3), np.eye(4))


def test_frozen_weight_read_only():
    W = np.eye(4)
    layer = CuaLayer.identity(SIGN, W)
    with pytest.raises(ValueError):
        layer.frozen_weight[0, 0] = 5.0
    W[0, 0] = 5.0  # caller's copy is detached
    assert layer.frozen_weight[0, 0] == 1.0


def test_param_count_regimes():
    W = np.eye(8)
    sign = CuaLayer.identity(SIGN, W, 4)
    orth = CuaLayer.identity(ORTH, W, 4)
    free = CuaLayer(FREE, np.eye(4), np.eye(4))
    assert sign.n_params == orth.n_params == 12
    # per 4x4 block: 16 free entries versus 6 Cayley parameters
    assert free.n_params == 16 and CuaLayer.identity(SIGN, np.eye(4), 4).n_params == 6


# -- ablations ------------------------------------------------------------


def test_ablation_identity():
    assert np.array_equal(make_ablation(AblationKind.IDENTITY, 4, seed=7), np.eye(4))


def test_ablation_signed_diagonal():
    D = make_ablation(AblationKind.SIGNED_DIAGONAL, 16, seed=1)
    assert np.array_equal(D, np.diag(np.diag(D)))
    assert set(np.diag(D)) <= {-1.0, 1.0}


@pytest.mark.parametrize("seed", range(5))
def test_ablation_random_unitary_orthogonal(seed):
    A = make_ablation(AblationKind.RANDOM_UNITARY, 32, seed)
    assert np.linalg.norm(A.T @ A - np.eye(32)) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_ablation_permutation(seed):
    P = make_ablation(AblationKind.RANDOM_PERMUTATION, 16, seed)
    assert np.array_equal(P.sum(axis=0), np.ones(16))
    assert np.array_equal(P.sum(axis=1), np.ones(16))
    assert set(np.unique(P)) == {0.0, 1.0}


def test_ablation_gaussian_variance():
    A = make_ablation(AblationKind.RANDOM_GAUSSIAN, 256, seed=0)
    assert abs(A.var() * 256 - 1.0) < 0.02


@pytest.mark.parametrize("kind", list(AblationKind))
def test_ablation_deterministic(kind):
    assert np.array_equal(make_ablation(kind, 8, 3), make_ablation(kind, 8, 3))


def test_stochastic_set():
    assert set(STOCHASTIC_ABLATIONS) == {AblationKind.RANDOM_GAUSSIAN, AblationKind.RANDOM_UNITARY,
                                         AblationKind.RANDOM_PERMUTATION}


# -- backward -------------------------------------------------------------


def _loss(mode, params, W, x, g):
    return float(np.sum(g * forward(CuaLayer.from_params(mode, params, W), x)))


def test_backward_zero_upstream(rng):
    layer = CuaLayer.from_params(SIGN, SkewBlockParams.random(8, 4, 1.0, 0), rng.standard_normal((3, 8)))
    assert np.array_equal(adapter_backward(layer, rng.standard_normal(8), np.zeros(3)), np.zeros(12))


def test_backward_zero_input(rng):
    layer = CuaLayer.from_params(SIGN, SkewBlockParams.random(8, 4, 1.0, 0), rng.standard_normal((3, 8)))
    assert np.array_equal(adapter_backward(layer, np.zeros(8), rng.standard_normal(3)), np.zeros(12))


@pytest.mark.parametrize("mode", [SIGN, ORTH])
@pytest.mark.parametrize("seed", range(10))
def test_backward_finite_differences(mode, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((5, 8))
    params = SkewBlockParams.random(8, 4, 0.7, seed)
    X = rng.standard_normal((6, 8))
    G = rng.standard_normal((6, 5))
    layer = CuaLayer.from_params(mode, params, W)
    if mode is SIGN:
        # stay away from the |u| kink
        u = np.abs(X @ layer.transform.to_dense().T)
        if u.min() < 1e-4:
            pytest.skip("sample too close to a kink")
    analytic = adapter_backward(layer, X, G)
    h = 1e-6
    numeric = np.zeros_like(analytic)
    for j in range(params.n_params):
        vp, vm = params.values.copy(), params.values.copy()
        vp[j] += h
        vm[j] -= h
        numeric[j] = (_loss(mode, SkewBlockParams(4, 2, vp), W, X, G)
                      - _loss(mode, SkewBlockParams(4, 2, vm), W, X, G)) / (2 * h)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


def test_backward_unconstrained_matrix_gradient(rng):
    A = rng.standard_normal((4, 4))
    W = rng.standard_normal((2, 4))
    x = rng.standard_normal(4)
    g = rng.standard_normal(2)
    grad = adapter_backward(CuaLayer(FREE, A, W), x, g)
    np.testing.assert_allclose(grad, np.outer(W.T @ g, x), atol=1e-14)


# -- persistence ----------------------------------------------------------


def test_checksum_stable_and_sensitive(rng):
    W = rng.standard_normal((4, 4))
    assert weight_checksum(W) == weight_checksum(W.copy())
    W2 = W.copy()
    W2[0, 0] = np.nextafter(W2[0, 0], np.inf)
    assert weight_checksum(W) != weight_checksum(W2)


def test_layer_save_load_round_trip(tmp_path, rng):
    W = rng.standard_normal((3, 8))
    layer = CuaLayer.from_params(SIGN, SkewBlockParams.random(8, 4, 1.0, 5), W)
    manifest = save_layer(layer, tmp_path, "layers.0.v_proj")
    doc = read_manifest(manifest)
    assert doc["mode"] is SIGN and doc["block_dim"] == 4 and doc["site"] == "layers.0.v_proj"
    again = load_layer(manifest, W)
    x = rng.standard_normal(8)
    assert np.array_equal(forward(again, x), forward(layer, x))
    assert again.checksum() == layer.checksum()


def test_manifest_missing_keys(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"mode": "orthogonal"}')
    with pytest.raises(ValueError):
        read_manifest(p)
