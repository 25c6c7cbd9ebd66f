import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modfab import core_math as cm
from modfab.core_math import Tape
from modfab.errors import ContractError, EncodingError, MissingModuleError
from modfab.stage_modules import (Batch, ModelDims, ModelOptions, ModelTensors, build_selector,
                                  classify_single, forward, init_model,
                                  inter_prototype_weights, sequence_forward, stage_forward)


# numpy oracles built from the textbook formulas -----------------------------

def softmax_cols(z):
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def weights_oracle(model, j, x, h):
    v, d = model.values, model.dims
    k = 0 if model.options.shared_stage_module else j
    hid = np.tanh(v["stage.W1"][k] @ np.concatenate([x, h]) + v["stage.b1"][k])
    return softmax_cols((v["stage.W2"][k] @ hid + v["stage.b2"][k]).reshape(d.I, d.M))


def bank_oracle(model, x, h):
    v = model.values
    return np.stack([np.tanh(v["proto.W"][i] @ np.concatenate([x * v["proto.mask"][i], h])
                             + v["proto.b"][i]) for i in range(model.dims.I)])


def stage_oracle(model, j, mods, x, h_prev):
    Wp = weights_oracle(model, j, x, h_prev)
    h = h_prev
    for m in mods:
        h = np.tanh(Wp[:, m] @ bank_oracle(model, x, h))
    return h


def classify_oracle(model, h):
    z = model.values["clf.W"] @ h + model.values["clf.b"]
    return 1.0 / (1.0 + np.exp(-z))


def toy(seed=0, **kw):
    dims = dict(D=2, H=3, I=2, M=2, K=2, J=3)
    dims.update(kw)
    model = init_model(ModelDims(**dims), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for key in ("proto.b", "stage.b1", "stage.b2", "clf.b"):
        model.values[key] = rng.normal(size=model.values[key].shape) * 0.3
    return model


# selector ----------------------------------------------------------------------

@pytest.mark.parametrize("mods, M, cols", [
    ([0], 2, [0]),
    ([1, 0, 1], 2, [1, 0, 1]),
])
def test_selector_examples(mods, M, cols):
    S = build_selector(mods, M).S
    np.testing.assert_array_equal(S, np.eye(M)[:, cols])


def test_selector_repeated_mod_case():
    vocab = {"MOD02": 0, "MOD04": 1}
    S = build_selector([vocab[m] for m in ["MOD02", "MOD04", "MOD02"]], 2).S
    np.testing.assert_array_equal(S, [[1, 0, 1], [0, 1, 0]])


def test_selector_rejects_out_of_vocab():
    with pytest.raises(EncodingError):
        build_selector([0, 2], 2)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=8))
def test_selector_columns_are_one_hot(mods):
    S = build_selector(mods, 5).S
    assert S.shape == (5, len(mods))
    assert np.all(S.sum(axis=0) == 1.0)
    assert set(np.unique(S)) <= {0.0, 1.0}


# inter-prototype weights -----------------------------------------------------------

def weights_of(model, j, x, h):
    tape = Tape()
    mt = ModelTensors(model, tape)
    return inter_prototype_weights(mt, np.array([j]), tape.const(np.asarray(x, float)[None]),
                                   tape.const(np.asarray(h, float)[None])).value[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_weight_columns_are_distributions(seed):
    model = toy(seed)
    rng = np.random.default_rng(seed)
    w = weights_of(model, 1, rng.normal(size=2) * 5, rng.uniform(-1, 1, 3))
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-12)


def test_zero_final_layer_gives_uniform_weights():
    model = toy(I=4, M=3)
    model.values["stage.W2"][:] = 0
    model.values["stage.b2"][:] = 0
    np.testing.assert_allclose(weights_of(model, 0, [1.0, 2.0], np.zeros(3)), 0.25, atol=1e-15)


def test_weights_match_composed_oracle():
    model = toy(0, D=1)
    np.testing.assert_allclose(weights_of(model, 2, [1.0], np.zeros(3)),
                               weights_oracle(model, 2, np.array([1.0]), np.zeros(3)), atol=1e-13)


# stage forward -------------------------------------------------------------------

def test_single_prototype_single_mod():
    model = toy(0, I=1, M=1, K=1)
    x, h = np.array([0.3, -0.7]), np.array([0.1, 0.2, -0.1])
    out = stage_forward(model, 0, [0], x, h).value
    np.testing.assert_allclose(out, np.tanh(bank_oracle(model, x, h)[0]), atol=1e-14)


def test_fixed_point_when_prototypes_ignore_hidden():
    model = toy(0)
    D = model.dims.D
    model.values["proto.W"][:, :, D:] = 0.0
    x, h = np.array([0.3, -0.7]), np.zeros(3)
    one = stage_forward(model, 1, [1], x, h).value
    two = stage_forward(model, 1, [1, 1], x, h).value
    np.testing.assert_allclose(two, one, atol=1e-15)


@pytest.mark.parametrize("mods", [[0, 1], [1, 1, 0], [0]])
def test_stage_matches_unrolled_oracle(mods):
    model = toy(0)
    rng = np.random.default_rng(0)
    x, h = rng.normal(size=2), rng.uniform(-1, 1, 3)
    out = stage_forward(model, 2, mods, x, h).value
    np.testing.assert_allclose(out, stage_oracle(model, 2, mods, x, h), atol=1e-13)


def test_literal_variant_evaluates_prototypes_once():
    model = toy(0)
    model.options = ModelOptions(modstep_recompute=False)
    rng = np.random.default_rng(1)
    x, h = rng.normal(size=2), rng.uniform(-1, 1, 3)
    Wp = weights_oracle(model, 0, x, h)
    P = bank_oracle(model, x, h)
    # the second step reuses prototype outputs computed at the stage's entry state
    expected = np.tanh(Wp[:, 0] @ P)
    out = stage_forward(model, 0, [1, 0], x, h).value
    np.testing.assert_allclose(out, expected, atol=1e-13)


def test_empty_mod_sequence_rejected():
    with pytest.raises(ContractError):
        stage_forward(toy(), 0, [], np.zeros(2), np.zeros(3))


def test_missing_module_names_stage_type():
    with pytest.raises(MissingModuleError, match="7"):
        stage_forward(toy(), 7, [0], np.zeros(2), np.zeros(3))
    with pytest.raises(MissingModuleError, match="stage index 1"):
        sequence_forward(toy(), [0, 9], [[0], [0]], np.zeros((2, 2)))


def test_stage_grad_check_three_mods():
    model = toy(1)

    def f(tape, p):
        mt = ModelTensors(model, tape, p)
        x = tape.const(np.array([[0.4, -1.1]]))
        h0 = tape.const(np.array([[0.2, 0.0, -0.3]]))
        from modfab.stage_modules import stage_step
        h, _, _ = stage_step(mt, x, h0, np.array([2]), np.array([[0, 1, 0]]), np.ones((1, 3)))
        return cm.tsum(cm.square(h))
    assert cm.grad_check(f, model.values, 1e-5) < 1e-4


# classify and sequences ----------------------------------------------------------------

def test_zero_classifier_gives_half():
    model = toy()
    model.values["clf.W"][:] = 0
    model.values["clf.b"][:] = 0
    np.testing.assert_array_equal(classify_single(model, [0.3, -0.2, 0.9]).value, [0.5, 0.5])


def test_large_logit_saturates():
    model = toy(K=1)
    model.values["clf.W"][:] = 0
    model.values["clf.b"][:] = 50.0
    assert abs(classify_single(model, np.zeros(3)).value[0] - 1.0) < 1e-12


def test_classify_matches_oracle():
    model = toy(0, H=2)
    h = np.array([0.1, -0.2])
    np.testing.assert_allclose(classify_single(model, h).value, classify_oracle(model, h),
                               atol=1e-15)


def test_sequence_single_stage_is_stage_plus_classify():
    model = toy(0)
    x = np.array([[0.5, -0.5]])
    probs, hidden = sequence_forward(model, [1], [[1, 0]], x)
    h = stage_forward(model, 1, [1, 0], x[0], np.zeros(3)).value
    np.testing.assert_allclose(hidden[0], h, atol=1e-15)
    np.testing.assert_allclose(probs[0], classify_single(model, h).value, atol=1e-15)


def test_sequence_matches_composed_oracle():
    model = toy(0)
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(3, 2))
    stages, mods = [0, 2, 0], [[1], [0, 1, 1], [0, 0]]
    probs, hidden = sequence_forward(model, stages, mods, xs)
    h = np.zeros(3)
    for t in range(3):
        h = stage_oracle(model, stages[t], mods[t], xs[t], h)
        np.testing.assert_allclose(hidden[t], h, atol=1e-13)
        np.testing.assert_allclose(probs[t], classify_oracle(model, h), atol=1e-13)


def test_sequence_is_deterministic():
    model = toy(2)
    xs = np.random.default_rng(2).normal(size=(4, 2))
    args = ([0, 1, 2, 1], [[0], [1, 0], [1], [0, 0, 1]], xs)
    a = sequence_forward(model, *args)
    b = sequence_forward(model, *args)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def random_batch(rng, B, T, R, D, J, M):
    mods = rng.integers(0, M, size=(B, T, R))
    lens = rng.integers(1, R + 1, size=(B, T))
    mod_mask = (np.arange(R)[None, None, :] < lens[..., None]).astype(float)
    K = 2
    return Batch(rng.normal(size=(B, T, D)) * 3, rng.integers(0, J, size=(B, T)), mods,
                 mod_mask, rng.integers(0, 2, size=(B, T, K)).astype(float),
                 np.ones((B, T, K)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_batched_forward_matches_per_sample_oracle(seed):
    rng = np.random.default_rng(seed)
    model = toy(seed % 7)
    batch = random_batch(rng, 3, 3, 3, 2, 3, 2)
    trace = forward(ModelTensors(model, Tape()), batch)
    h = trace.hidden.value
    assert np.all(np.abs(h) < 1.0)
    for b in range(3):
        hb = np.zeros(3)
        for t in range(3):
            mods = batch.mods[b, t][batch.mod_mask[b, t] > 0]
            hb = stage_oracle(model, batch.stage[b, t], mods, batch.x[b, t], hb)
            np.testing.assert_allclose(h[b, t], hb, atol=1e-12)


def test_one_module_per_stage_type_is_shared():
    model = toy(0)
    assert model.values["stage.W1"].shape[0] == model.dims.J
    xs = np.array([[0.2, 0.1], [0.3, -0.4]])
    before, _ = sequence_forward(model, [1, 1], [[0], [0]], xs)
    model.values["stage.W2"][1] += np.random.default_rng(5).normal(size=model.values["stage.W2"][1].shape)
    after, _ = sequence_forward(model, [1, 1], [[0], [0]], xs)
    assert np.all(after[0] != before[0]) and np.all(after[1] != before[1])


def test_shared_module_option_uses_one_module():
    model = init_model(ModelDims(2, 3, 2, 2, 2, 3), ModelOptions(shared_stage_module=True))
    assert model.values["stage.W1"].shape[0] == 1
    xs = np.array([[0.2, 0.1]])
    a, _ = sequence_forward(model, [0], [[0]], xs)
    b, _ = sequence_forward(model, [2], [[0]], xs)
    np.testing.assert_array_equal(a, b)
