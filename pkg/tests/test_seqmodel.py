import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgrnn import diffcore as dc
from pgrnn.seqmodel import (
    AnnParams,
    LstmParams,
    LstmState,
    Normalizer,
    ann_forward,
    ann_predict,
    head,
    load_checkpoint,
    lstm_cell,
    predict_profile,
    save_checkpoint,
    unroll,
)


def zero_params(D=2, H=3, n_out=4):
    p = LstmParams.init(D, H, n_out, seed=0)
    return p.with_weights({k: np.zeros_like(v) for k, v in p.weights().items()})


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_cell(x, h, c, p):
    """Straight-line reimplementation of one LSTM step with Python floats."""
    H, D = len(h), len(x)

    def affine(Wh, Wx, b, i):
        s = b[i]
        for j in range(H):
            s += Wh[i][j] * h[j]
        for j in range(D):
            s += Wx[i][j] * x[j]
        return s

    h_new, c_new = [], []
    for i in range(H):
        cand = math.tanh(affine(p.Wc_h, p.Wc_x, p.bc, i))
        f = sig(affine(p.Wf_h, p.Wf_x, p.bf, i))
        g = sig(affine(p.Wg_h, p.Wg_x, p.bg, i))
        o = sig(affine(p.Wo_h, p.Wo_x, p.bo, i))
        ci = f * c[i] + g * cand
        c_new.append(ci)
        h_new.append(o * math.tanh(ci))
    return np.array(h_new), np.array(c_new)


def test_zero_params_zero_state():
    s = lstm_cell(np.ones(2), LstmState.zeros(3), zero_params())
    np.testing.assert_array_equal(s.h, 0.0)
    np.testing.assert_array_equal(s.c, 0.0)


def test_zero_params_carry_half_the_cell():
    v = np.array([0.4, -1.0, 2.0])
    s = lstm_cell(np.ones(2), LstmState(np.zeros(3), v), zero_params())
    np.testing.assert_allclose(s.c, 0.5 * v, rtol=1e-15)
    np.testing.assert_allclose(s.h, 0.5 * np.tanh(0.5 * v), rtol=1e-15)


def test_cell_matches_scalar_oracle():
    rng = np.random.default_rng(42)
    p = LstmParams.init(2, 3, 1, seed=7)
    p = p.with_weights({k: rng.normal(size=np.shape(v)) for k, v in p.weights().items()})
    x, h, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    s = lstm_cell(x, LstmState(h, c), p)
    h_ref, c_ref = scalar_cell(x, h, c, p)
    np.testing.assert_allclose(s.h, h_ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.c, c_ref, rtol=0, atol=1e-12)


def test_dimension_mismatch_rejected():
    p = LstmParams.init(2, 3, 1)
    with pytest.raises(dc.ShapeError):
        lstm_cell(np.ones(5), LstmState.zeros(3), p)
    with pytest.raises(dc.ShapeError):
        lstm_cell(np.ones(2), LstmState.zeros(4), p)


def test_param_shapes_validated():
    p = LstmParams.init(2, 3, 1)
    with pytest.raises(dc.ShapeError):
        p.with_weights({"Wf_h": np.zeros((3, 4))})
    with pytest.raises(ValueError):
        p.with_weights({"bc": np.array([0.0, np.inf, 0.0])})


def test_unroll_single_step_equals_cell():
    p = LstmParams.init(2, 3, 1, seed=1)
    x = np.random.default_rng(0).normal(size=(1, 2))
    s = lstm_cell(x[0], LstmState.zeros(3), p)
    np.testing.assert_array_equal(unroll(x, p)[0], s.h)


def test_unroll_zero_params_all_zero():
    X = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_array_equal(unroll(X, zero_params()), 0.0)


def test_unroll_requires_a_step():
    with pytest.raises(ValueError):
        unroll(np.zeros((0, 2)), LstmParams.init(2, 3, 1))


def test_unroll_batched_equals_individual():
    p = LstmParams.init(2, 4, 1, seed=3)
    X = np.random.default_rng(1).normal(size=(3, 15, 2))
    batched = unroll(X, p)
    for b in range(3):
        np.testing.assert_allclose(batched[b], unroll(X[b], p), rtol=1e-14, atol=1e-15)


def test_unroll_gradients_pass_grad_check():
    rng = np.random.default_rng(5)
    p = LstmParams.init(3, 4, 2, seed=5)
    X = rng.normal(size=(50, 3))
    g = dc.Graph()
    bound = p.bind(g)
    hs = unroll(X, bound)
    loss = dc.mean(hs[-1])
    assert dc.grad_check(g, loss) < 1e-5


def test_memory_carry_with_saturated_gates():
    p = LstmParams.init(2, 3, 1, seed=2)
    p = p.with_weights({
        "Wf_h": np.zeros((3, 3)), "Wf_x": np.zeros((3, 2)), "bf": np.full(3, 50.0),
        "Wg_h": np.zeros((3, 3)), "Wg_x": np.zeros((3, 2)), "bg": np.full(3, -50.0),
    })
    c0 = np.array([0.3, -0.7, 1.1])
    X = np.random.default_rng(0).normal(size=(30, 2))
    _, last = unroll(X, p, LstmState(np.zeros(3), c0), return_state=True)
    np.testing.assert_allclose(last.c, c0, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 19))
def test_unroll_is_causal(seed, t):
    rng = np.random.default_rng(seed)
    p = LstmParams.init(2, 3, 1, seed=seed % 1000)
    X = rng.normal(size=(20, 2))
    Y = X.copy()
    Y[t] += 1.0
    np.testing.assert_array_equal(unroll(X, p)[:t], unroll(Y, p)[:t])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_gates_and_activations_in_range(seed, scale):
    rng = np.random.default_rng(seed)
    p = LstmParams.init(2, 3, 1, seed=seed % 1000)
    x = rng.normal(size=2) * scale
    s = lstm_cell(x, LstmState(rng.normal(size=3), rng.normal(size=3)), p)
    assert np.all(np.abs(s.h) <= 1.0)
    assert np.all(np.abs(s.h) <= np.abs(np.tanh(s.c)) + 1e-15)


def test_lstm_depends_on_order():
    p = LstmParams.init(2, 4, 3, seed=0)
    X = np.random.default_rng(0).normal(size=(10, 2))
    perm = np.random.default_rng(1).permutation(10)
    a = head(unroll(X, p), p)[perm]
    b = head(unroll(X[perm], p), p)
    assert np.max(np.abs(a - b)) > 1e-6


def test_head_output_length_independent_of_hidden():
    for H in (1, 3, 8):
        p = LstmParams.init(2, H, 26)
        assert head(np.zeros(H), p).shape == (26,)


def unit_norm(n_in, n_out):
    return Normalizer(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))


def test_predict_profile_constant_with_zero_head():
    p = LstmParams.init(2, 3, 2)
    norm = Normalizer(np.zeros(2), np.ones(2), np.array([10.0, 5.0]), np.array([2.0, 4.0]))
    p = p.with_weights({"Whead": np.zeros((2, 3)), "bhead": np.array([1.0, -0.5])})
    p = LstmParams(**p.weights(), norm=norm)
    out = predict_profile(np.random.default_rng(0).normal(size=3), p)
    np.testing.assert_allclose(out, [12.0, 3.0])


def test_predict_profile_hand_case():
    p = LstmParams.init(2, 2, 2)
    p = LstmParams(**{**p.weights(), "Whead": np.array([[1.0, 0.0], [0.0, 2.0]]),
                      "bhead": np.array([0.5, 0.0])}, norm=unit_norm(2, 2))
    np.testing.assert_allclose(predict_profile(np.array([0.25, -0.5]), p), [0.75, -1.0])


def test_predict_profile_needs_statistics():
    with pytest.raises(ValueError):
        predict_profile(np.zeros(3), LstmParams.init(2, 3, 1))


def test_ann_zero_params_zero_output():
    p = AnnParams.init(4, 5, 3)
    p = p.with_weights({k: np.zeros_like(v) for k, v in p.weights().items()})
    np.testing.assert_array_equal(ann_forward(np.ones(4), p), 0.0)


def test_ann_matches_scalar_oracle():
    rng = np.random.default_rng(8)
    p = AnnParams.init(3, 4, 2, seed=8)
    x = rng.normal(size=3)
    hidden = [math.tanh(sum(p.W1[i][j] * x[j] for j in range(3)) + p.b1[i]) for i in range(4)]
    ref = [sum(p.W2[k][i] * hidden[i] for i in range(4)) + p.b2[k] for k in range(2)]
    np.testing.assert_allclose(ann_forward(x, p), ref, rtol=0, atol=1e-12)


def test_ann_is_permutation_equivariant():
    p = AnnParams.init(3, 4, 2, seed=1)
    X = np.random.default_rng(2).normal(size=(12, 3))
    perm = np.random.default_rng(3).permutation(12)
    np.testing.assert_array_equal(ann_forward(X, p)[perm], ann_forward(X[perm], p))


def test_ann_dimension_mismatch():
    with pytest.raises(dc.ShapeError):
        ann_forward(np.ones(5), AnnParams.init(3, 4, 2))
    with pytest.raises(ValueError):
        ann_predict(np.ones(3), AnnParams.init(3, 4, 2))


def test_normalizer_uses_supervised_cells_only():
    X = np.arange(12.0).reshape(6, 2)
    Y = np.array([[1.0], [3.0], [100.0], [5.0], [100.0], [7.0]])
    w = np.array([[1], [1], [0], [1], [0], [1]])
    n = Normalizer.fit(X, Y, w)
    assert n.y_mean[0] == 4.0
    np.testing.assert_allclose(n.restore(n.targets(Y)), Y)


@pytest.mark.parametrize("cls", [LstmParams, AnnParams])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, cls):
    rng = np.random.default_rng(0)
    p = cls.init(3, 4, 2, seed=9)
    p = p.with_weights({k: rng.normal(size=np.shape(v)) * 10.0 ** rng.integers(-8, 8) for k, v in p.weights().items()})
    norm = Normalizer(rng.normal(size=3), rng.random(3) + 0.1, rng.normal(size=2), rng.random(2) + 0.1)
    p = cls(**p.weights(), norm=norm)
    path = tmp_path / "ck.json"
    save_checkpoint(path, p, {"variant": "RNN", "seed": 3})
    q, meta = load_checkpoint(path)
    assert type(q) is cls and meta == {"variant": "RNN", "seed": 3}
    for k, v in p.weights().items():
        assert np.asarray(v).tobytes() == q.weights()[k].tobytes()
    for k in ("x_mean", "x_std", "y_mean", "y_std"):
        assert getattr(p.norm, k).tobytes() == getattr(q.norm, k).tobytes()
    save_checkpoint(tmp_path / "again.json", q, meta)
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
