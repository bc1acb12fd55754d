import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclingnet import tensor_autograd as ta
from cyclingnet.network import (GOLDEN_LAYERS, GOLDEN_NON_TRAINABLE, GOLDEN_TRAINABLE, VARIANTS, AttentionParams,
                                LstmParams, ModelConfig, WeightFormatError, WeightMismatchError, bilstm,
                                build_model, forward, golden_diff, load_weights, lstm_cell,
                                lstm_param_count, save_weights, self_attention, summary)
from cyclingnet.tensor_autograd import Tensor


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig())


def test_default_totals(default_model):
    assert default_model.trainable_count == 4_383_902 == GOLDEN_TRAINABLE
    assert default_model.non_trainable_count == 456 == GOLDEN_NON_TRAINABLE


def test_golden_table_matches(default_model):
    assert golden_diff(default_model) == []
    rows = {r.name: r for r in default_model.rows}
    for name, shape, params in GOLDEN_LAYERS:
        assert tuple(rows[name].shape) == shape and rows[name].params == params


def test_table_arithmetic():
    # conv k*k*C*F + F, dense n*m + m, batch norm 4*C
    assert 5 * 5 * 3 * 24 + 24 == 1824
    assert 3 * 3 * 48 * 64 + 64 == 27712
    assert 2048 * 256 + 256 == 524_544 and 64 * 1 + 1 == 65
    assert 4 * 36 == 144 and 2 * (36 + 64 + 128) == 456
    assert lstm_param_count(128, 512) * 2 == 2_625_536 == 2 * 4 * 512 * (128 + 512 + 1)
    assert 1024 * 1024 + 1 == 1_048_577


@pytest.mark.parametrize("name,shape,params", [
    ("conv2d_2", (57, 77, 36), 21636), ("conv2d_5", (3, 5, 128), 73856), ("dense_2", (64,), 16448),
    ("batch_normalization_1", (28, 38, 36), 144), ("attention", (2, 1024), 1_048_577),
])
def test_summary_rows(default_model, name, shape, params):
    line = next(l for l in summary(default_model).splitlines() if l.startswith(name + "\t"))
    fields = line.split("\t")
    assert fields[2] == "(None, " + ", ".join(map(str, shape)) + ")"
    assert int(fields[3]) == params


def test_hidden_128_breaks_golden():
    diffs = golden_diff(build_model(ModelConfig(lstm_hidden=128)))
    assert any(d.startswith("bidirectional_1: params 263168") for d in diffs)


def test_variant_ladder():
    layer_sets = [{l.name for l in build_model(ModelConfig(variant=v)).layers} for v in VARIANTS]
    cnn, cnn_lstm, sa, full = layer_sets
    assert "bidirectional_1" not in cnn and "attention" not in cnn and "reshape" not in cnn
    assert cnn_lstm - cnn == {"reshape", "lstm_1", "dropout_1"}
    assert sa - cnn_lstm == {"attention"}
    assert full - sa == {"bidirectional_1"} and sa - full == {"lstm_1"}
    counts = [build_model(ModelConfig(variant=v)).trainable_count for v in VARIANTS]
    assert counts == sorted(counts)


def test_block3_shape_and_outputs_in_unit_interval(default_model, rng):
    x = rng.random((2, 240, 320, 3)).astype(np.float32)
    probs, shapes = default_model.forward(x, return_intermediates=True)
    assert shapes["batch_normalization_3"] == (1, 2, 128)
    assert shapes["flatten"] == (2048,)
    assert probs.shape == (2,) and np.all((probs.data > 0) & (probs.data < 1))


def test_infer_is_deterministic(default_model, rng):
    x = rng.random((1, 240, 320, 3)).astype(np.float32)
    a = forward(default_model, x, "infer").data
    b = forward(default_model, x, "infer").data
    np.testing.assert_array_equal(a, b)


def test_wrong_input_shape(default_model):
    with pytest.raises(ValueError):
        default_model.forward(np.zeros((1, 24, 32, 3), np.float32))
    with pytest.raises(ValueError):
        forward(default_model, np.zeros((1, 240, 320, 3)), "eval")


def test_build_is_seeded():
    a = build_model(ModelConfig.shrunken(seed=4)).state()
    b = build_model(ModelConfig.shrunken(seed=4)).state()
    c = build_model(ModelConfig.shrunken(seed=5)).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("kwargs", [dict(variant="rnn"), dict(attention_mode="dot"),
                                    dict(lstm_candidate="relu"), dict(dropout=1.0),
                                    dict(conv_filters=(1, 2, 3))])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_shrunken_model_counts():
    m = build_model(ModelConfig.shrunken())
    assert m.config.input_shape == (24, 32, 3)
    assert m.trainable_count == 2094 and m.non_trainable_count == 36


# recurrent primitives

def zero_cell(candidate, forget_bias=0.0):
    params = LstmParams.zeros(3, 4, dtype=np.float64)
    params.b_f.data[:] = forget_bias
    x = Tensor(np.ones((1, 3)))
    return params, x


def test_lstm_zero_weights_tanh():
    params, x = zero_cell("tanh")
    h, s = lstm_cell(x, Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), params, "tanh")
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(s.data, 0.0)


def test_lstm_zero_weights_sigmoid_candidate():
    params, x = zero_cell("sigmoid")
    h, s = lstm_cell(x, Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), params, "sigmoid")
    np.testing.assert_allclose(s.data, 0.25)
    np.testing.assert_allclose(h.data, np.tanh(0.25) * 0.5)
    assert h.data[0, 0] == pytest.approx(0.12245, abs=1e-5)


def test_lstm_pure_memory():
    params, x = zero_cell("tanh", forget_bias=20.0)
    s_prev = Tensor(np.array([[0.3, -0.7, 1.5, 0.0]]))
    _, s = lstm_cell(x, Tensor(np.zeros((1, 4))), s_prev, params, "tanh")
    np.testing.assert_allclose(s.data, s_prev.data, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lstm_state_bound(seed):
    r = np.random.default_rng(seed)
    params = LstmParams.create(3, 5, r, dtype=np.float64)
    seq = r.standard_normal((2, 6, 3)) * 3
    h, s = Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 5)))
    for t in range(6):
        h, s = lstm_cell(Tensor(seq[:, t]), h, s, params, "tanh")
        assert np.abs(s.data).max() <= t + 1
        assert np.abs(h.data).max() < 1


def test_bilstm_palindrome_symmetry(rng):
    params = LstmParams.create(3, 4, rng, dtype=np.float64)
    half = rng.standard_normal((1, 3, 3))
    seq = np.concatenate([half, half[:, ::-1]], axis=1)
    out = bilstm(Tensor(seq), params, params).data
    steps = seq.shape[1]
    for t in range(steps):
        mirrored = out[0, steps - 1 - t]
        np.testing.assert_allclose(out[0, t], np.concatenate([mirrored[4:], mirrored[:4]]), atol=1e-12)


def test_bilstm_zero_params():
    z = LstmParams.zeros(3, 4, dtype=np.float64)
    out = bilstm(Tensor(np.ones((2, 5, 3))), z, z)
    assert out.shape == (2, 5, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def test_bilstm_param_count():
    assert lstm_param_count(128, 512) == 4 * 512 * (128 + 512 + 1)


# attention

@pytest.mark.parametrize("mode", ["table_count", "additive"])
def test_attention_singleton(mode, rng):
    params = AttentionParams.create(6, mode, 5, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((3, 1, 6)))
    ctx, weights = self_attention(x, params, return_weights=True)
    np.testing.assert_array_equal(weights.data, 1.0)
    np.testing.assert_allclose(ctx.data, x.data)


@pytest.mark.parametrize("mode", ["table_count", "additive"])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 6))
def test_attention_rows_sum_to_one(mode, seed, steps):
    r = np.random.default_rng(seed)
    params = AttentionParams.create(4, mode, 3, r, dtype=np.float64)
    _, weights = self_attention(Tensor(r.standard_normal((2, steps, 4)) * 3), params, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-6)


def test_attention_table_count_size(rng):
    params = AttentionParams.create(1024, "table_count", 512, rng)
    assert sum(t.size for t in params.tensors()) == 1_048_577


# weights

def test_weights_roundtrip_bitwise(tmp_path, rng):
    model = build_model(ModelConfig.shrunken(seed=1))
    x = rng.random((3, 24, 32, 3)).astype(np.float32)
    before = model.forward(x).data
    save_weights(model, tmp_path / "w.cynw")
    fresh = build_model(ModelConfig.shrunken(seed=2))
    load_weights(fresh, tmp_path / "w.cynw")
    np.testing.assert_array_equal(fresh.forward(x).data, before)


def test_weights_variant_mismatch(tmp_path):
    save_weights(build_model(ModelConfig.shrunken()), tmp_path / "w.cynw")
    with pytest.raises(WeightMismatchError):
        load_weights(build_model(ModelConfig.shrunken(variant="cnn")), tmp_path / "w.cynw")
    with pytest.raises(WeightMismatchError, match="shape"):
        load_weights(build_model(ModelConfig.shrunken(lstm_hidden=7)), tmp_path / "w.cynw")


@pytest.mark.parametrize("corrupt", ["magic", "version", "truncate"])
def test_weights_corruption_leaves_model_untouched(tmp_path, corrupt):
    path = tmp_path / "w.cynw"
    save_weights(build_model(ModelConfig.shrunken(seed=1)), path)
    blob = bytearray(path.read_bytes())
    if corrupt == "magic":
        blob[:4] = b"XXXX"
    elif corrupt == "version":
        blob[4] = 9
    else:
        blob = blob[:-10]
    path.write_bytes(bytes(blob))
    model = build_model(ModelConfig.shrunken(seed=2))
    before = model.state()
    with pytest.raises(WeightFormatError):
        load_weights(model, path)
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())


def test_dropout_only_in_train_mode(rng):
    model = build_model(ModelConfig.shrunken(dropout=0.5))
    x = rng.random((4, 24, 32, 3)).astype(np.float32)
    a = model.forward(x, training=True, rng=np.random.default_rng(0)).data
    b = model.forward(x, training=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


def test_batch_norm_moving_stats_update_in_training(rng):
    model = build_model(ModelConfig.shrunken())
    bn = model.layer("batch_normalization_1")
    before = [p.data.copy() for p in bn.parameters() if not p.trainable]
    model.forward(rng.random((2, 24, 32, 3)).astype(np.float32), training=True)
    after = [p.data.copy() for p in bn.parameters() if not p.trainable]
    assert len(before) == 2 and not np.array_equal(before[0], after[0])
    model.forward(rng.random((2, 24, 32, 3)).astype(np.float32), training=False)
    final = [p.data for p in bn.parameters() if not p.trainable]
    np.testing.assert_array_equal(after[0], final[0])
    np.testing.assert_array_equal(after[1], final[1])
