import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lczmap.errors import ConfigError, ModelFormatError, TrainingDivergenceError
from lczmap.nn import (
    COMPONENTS,
    AdamState,
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    EarlyStopping,
    Mscnn,
    MscnnConfig,
    TrainConfig,
    adam_step,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    gradient_check,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
    train_mscnn,
)
from lczmap.nn.serialize import MAGIC, model_from_bytes, model_to_bytes
from lczmap.sampling import SampleSet

TINY = MscnnConfig(in_channels=2, input_size=8, branch_channels=4, block_channels=(6, 8), hidden=12)


def naive_conv(x, w, b):
    """Direct loop cross-correlation with zero same-padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, o, h, wd))
    for i in range(h):
        for j in range(wd):
            out[:, :, i, j] = np.einsum("nckl,ockl->no", xp[:, :, i:i + k, j:j + k], w)
    return out + (0 if b is None else b[None, :, None, None])


# -- convolution ---------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
    layer = ConvLayer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(conv2d_forward(x, layer), x)


def test_conv_padding_arithmetic():
    out = conv2d_forward(np.ones((1, 1, 5, 5), np.float32), ConvLayer(np.ones((1, 1, 3, 3), np.float32)))
    assert out[0, 0, 2, 2] == 9 and out[0, 0, 0, 0] == 4 and out[0, 0, 0, 2] == 6


def test_conv_bias_only():
    layer = ConvLayer(np.zeros((2, 3, 3, 3), np.float32), np.array([1.5, -2.0], np.float32))
    out = conv2d_forward(np.random.default_rng(0).random((1, 3, 4, 4)).astype(np.float32), layer)
    assert (out[0, 0] == 1.5).all() and (out[0, 1] == -2.0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 999))
def test_conv_matches_direct_loop(n, c, o, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, 6, 6))
    w, b = rng.standard_normal((o, c, k, k)), rng.standard_normal(o)
    assert np.allclose(conv2d_forward(x, ConvLayer(w, b)), naive_conv(x, w, b), atol=1e-10)


def test_conv_preserves_spatial_dims(rng):
    for k in (3, 5, 7):
        out = conv2d_forward(rng.random((1, 2, 8, 8)), ConvLayer(rng.random((3, 2, k, k))))
        assert out.shape == (1, 3, 8, 8)


def test_conv_errors(rng):
    layer = ConvLayer(rng.random((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        conv2d_forward(rng.random((1, 2, 4, 4)), layer)
    with pytest.raises(ValueError):
        conv2d_backward(rng.random((1, 3, 4, 4)), layer, np.zeros((1, 2, 5, 5)))
    with pytest.raises(ValueError):
        ConvLayer(np.zeros((1, 1, 2, 2)))


def test_conv_backward_bias_and_zero(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    layer = ConvLayer(rng.standard_normal((4, 3, 3, 3)), np.zeros(4))
    g = rng.standard_normal((2, 4, 6, 6))
    _, _, gb = conv2d_backward(x, layer, g)
    assert np.allclose(gb, g.sum(axis=(0, 2, 3)))
    gx, gw, gb = conv2d_backward(x, layer, np.zeros_like(g))
    assert not gx.any() and not gw.any() and not gb.any()


# -- pooling, activations, dense, dropout ---------------------------------------------


def test_maxpool_example():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    out, arg = maxpool2_forward(x)
    assert out.item() == 4
    assert maxpool2_backward(np.ones_like(out), arg)[0, 0].tolist() == [[0, 0], [0, 1]]
    same = np.full((1, 1, 2, 2), 7.0, np.float32)
    out, arg = maxpool2_forward(same)
    assert maxpool2_backward(np.ones_like(out), arg)[0, 0].tolist() == [[1, 0], [0, 0]]
    with pytest.raises(ValueError):
        maxpool2_forward(np.zeros((1, 1, 3, 4), np.float32))


def test_relu():
    x = np.array([-1.0, 0.0, 2.0])
    assert relu_forward(x).tolist() == [0, 0, 2]
    assert relu_backward(np.ones(3), x).tolist() == [0, 0, 1]


def test_dense_identity_and_bias_grad(rng):
    x = rng.standard_normal((4, 3))
    layer = DenseLayer(np.eye(3), np.zeros(3))
    assert np.array_equal(dense_forward(x, layer), x)
    g = rng.standard_normal((4, 3))
    assert np.allclose(dense_backward(x, layer, g)[2], g.sum(axis=0))


def test_dropout_modes(rng):
    x = rng.standard_normal((3, 4))
    assert dropout_forward(x, 0.25, rng, "eval")[0] is x
    assert dropout_forward(x, 0.0, rng, "train")[0] is x
    with pytest.raises(ValueError):
        dropout_forward(x, 1.0, rng)


def test_dropout_keep_fraction():
    x = np.ones(10 ** 6, np.float32)
    out, mask = dropout_forward(x, 0.25, np.random.default_rng(7))
    assert abs((out != 0).mean() - 0.75) <= 0.005
    assert set(np.unique(out)) == {0.0, np.float32(1 / 0.75)}
    assert np.array_equal(dropout_backward(np.ones_like(x), mask), mask)


def test_batchnorm_constant_and_normalised(rng):
    layer = BatchNormLayer.fresh(3, np.float64)
    layer.beta[:] = [0.5, -1.0, 2.0]
    out, _ = batchnorm_forward(np.full((4, 3, 2, 2), 3.0), layer)
    assert np.allclose(out, layer.beta[None, :, None, None])
    out, _ = batchnorm_forward(rng.standard_normal((8, 3, 4, 4)) * 5 + 2, BatchNormLayer.fresh(3, np.float64))
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_running_stats_and_errors(rng):
    layer = BatchNormLayer.fresh(2, np.float64)
    x = rng.standard_normal((5, 2, 3, 3)) + 4
    batchnorm_forward(x, layer)
    assert np.allclose(layer.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(layer.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    with pytest.raises(ValueError):
        batchnorm_forward(x[:1], layer)
    before = layer.running_mean.copy()
    batchnorm_forward(x[:1], layer, mode="eval")
    assert np.array_equal(before, layer.running_mean)


# -- loss and optimiser ----------------------------------------------------------------


def test_softmax_uniform_and_saturated():
    loss, grad = softmax_cross_entropy(np.zeros((3, 17)), [0, 5, 16])
    assert loss == pytest.approx(math.log(17)) and round(loss, 6) == 2.833213
    logits = np.zeros((2, 17))
    logits[[0, 1], [4, 9]] = 1000
    assert softmax_cross_entropy(logits, [4, 9])[0] < 1e-6
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 17)), [17])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32))
def test_softmax_grad_rows_sum_to_zero(n, seed):
    rng = np.random.default_rng(seed)
    _, grad = softmax_cross_entropy(rng.standard_normal((n, 17)) * 10, rng.integers(0, 17, n))
    assert np.abs(grad.sum(axis=1)).max() <= 1e-7


def test_adam_first_step():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    state = AdamState.for_params(params)
    adam_step(params, {"a": np.ones(1), "b": np.ones(1)}, state)
    assert state.m["a"][0] == pytest.approx(0.1) and state.v["a"][0] == pytest.approx(0.001)
    # hand-evaluated: -lr / (1 + decay) with both bias corrections equal to 1
    assert params["a"][0] == pytest.approx(-0.002 / 1.004, abs=1e-8)
    assert params["a"][0] == pytest.approx(-0.00199203, abs=1e-8)
    assert params["a"][0] == params["b"][0]


def test_adam_zero_gradient_identity_and_errors(rng):
    params = {"w": rng.standard_normal((3, 2))}
    original = params["w"].copy()
    state = AdamState.for_params(params)
    for _ in range(3):
        adam_step(params, {"w": np.zeros((3, 2))}, state)
    assert np.array_equal(params["w"], original)
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(2)}, state)
    with pytest.raises(KeyError):
        adam_step(params, {"z": np.zeros(2)}, state)


def test_adam_weight_decay_mode():
    state = AdamState(decay_mode="weight")
    assert state.current_lr(100) == state.lr
    with pytest.raises(ValueError):
        AdamState(decay_mode="cosine")


# -- gradient checks -----------------------------------------------------------------


@pytest.mark.parametrize("component", COMPONENTS)
def test_gradient_check_components(component):
    err, _ = gradient_check(component)[component]
    assert err < (1e-5 if component == "mscnn" else 1e-6)


def test_model_gradient_independent_probe():
    """Own central differences on a handful of parameters of the tiny network."""
    model = Mscnn(TINY, seed=3, dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 2, 8, 8))
    y = rng.integers(0, 17, 4)

    def loss():
        logits, _ = model.forward(x, "train", np.random.default_rng(9))
        return softmax_cross_entropy(logits, y)[0]

    logits, cache = model.forward(x, "train", np.random.default_rng(9))
    grads = model.backward(cache, softmax_cross_entropy(logits, y)[1])
    state = model.state()
    params = model.parameters()
    for name in ("branch5.weight", "block1.bn.gamma", "block2.conv.weight", "fc1.bias", "fc2.weight"):
        flat = params[name].reshape(-1)
        for i in (0, flat.size // 2, flat.size - 1):
            old = flat[i]
            flat[i] = old + 1e-6
            fp = loss()
            flat[i] = old - 1e-6
            fm = loss()
            flat[i] = old
            model.load_state(state)
            num = (fp - fm) / 2e-6
            a = grads[name].reshape(-1)[i]
            assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-5, name


def test_gradient_check_unknown():
    with pytest.raises(ValueError):
        gradient_check("attention")


# -- model -----------------------------------------------------------------------------


def test_mscnn_default_shapes():
    cfg = MscnnConfig()
    assert cfg.concat_channels == 96 and cfg.final_spatial == 1 and cfg.flatten_dim == 256
    model = Mscnn(cfg, seed=0)
    logits, cache = model.forward(np.random.default_rng(0).random((2, 10, 32, 32), np.float32), "eval")
    assert logits.shape == (2, 17)
    assert cache["blocks"][0][0].shape == (2, 96, 32, 32) and cache["pooled_shape"] == (2, 256, 1, 1)
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 10, 16, 16), np.float32))


def test_config_validation():
    with pytest.raises(ConfigError):
        MscnnConfig(input_size=20)
    with pytest.raises(ConfigError):
        MscnnConfig(branch_kernels=(3, 4))
    with pytest.raises(ConfigError):
        MscnnConfig.from_dict({"width": 3})


def test_eval_is_pure(rng):
    model = Mscnn(TINY, seed=1)
    x = rng.random((3, 2, 8, 8)).astype(np.float32)
    a = model.forward(x, "eval")[0]
    b = model.forward(x, "eval")[0]
    assert a.tobytes() == b.tobytes()


def test_batch_permutation_leaves_gradient_unchanged(rng):
    model = Mscnn(MscnnConfig(**{**TINY.to_dict(), "dropout": 0.0}), seed=2, dtype=np.float64)
    x = rng.standard_normal((6, 2, 8, 8))
    y = rng.integers(0, 17, 6)
    perm = rng.permutation(6)

    def grads(xb, yb):
        m = model.copy()
        logits, cache = m.forward(xb, "train")
        return m.backward(cache, softmax_cross_entropy(logits, yb)[1])

    g1, g2 = grads(x, y), grads(x[perm], y[perm])
    for name in g1:
        assert np.allclose(g1[name], g2[name], atol=1e-6)


def test_zero_loss_gradient_gives_zero_update(rng):
    model = Mscnn(TINY, seed=0)
    before = model.checksum()
    logits, cache = model.forward(rng.random((2, 2, 8, 8)).astype(np.float32), "train", rng)
    grads = model.backward(cache, np.zeros_like(logits))
    adam_step(model.parameters(), grads, AdamState.for_params(model.parameters()))
    # batch-norm running stats moved in the forward pass; parameters did not
    assert model.checksum(list(model.parameters())) == Mscnn(TINY, seed=0).checksum(list(model.parameters()))
    assert before != model.checksum()


def test_serialisation_round_trip(tmp_path, rng):
    model = Mscnn(TINY, seed=4, freeze_through=1)
    raw = model_to_bytes(model)
    assert raw[:5] == MAGIC and int.from_bytes(raw[5:9], "little") == 1
    back = model_from_bytes(raw)
    assert back.checksum() == model.checksum() and back.freeze_through == 1
    x = rng.random((2, 2, 8, 8)).astype(np.float32)
    assert np.array_equal(back.forward(x, "eval")[0], model.forward(x, "eval")[0])
    assert model_to_bytes(back) == raw
    for bad in (raw[:-4], raw + b"\0\0\0\0", b"LCZNX" + raw[5:], raw[:3]):
        with pytest.raises(ModelFormatError):
            model_from_bytes(bad)


# -- training --------------------------------------------------------------------------


def toy_sets(n=24, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    patches = rng.standard_normal((n, 2, 8, 8)).astype(np.float32) * 0.1
    patches[labels == 1, 0, ::2, ::2] += 1.0
    return SampleSet(patches, labels * 3)


def test_training_deterministic_and_learns():
    cfg = TrainConfig(batch_size=8, max_epochs=6, seed=5)
    _, h1 = train_mscnn(Mscnn(TINY, seed=0), toy_sets(), toy_sets(seed=1), cfg)
    model, h2 = train_mscnn(Mscnn(TINY, seed=0), toy_sets(), toy_sets(seed=1), cfg)
    assert h1.to_dict() == h2.to_dict() and len(h1) <= 6
    assert h1.epochs[-1].train_loss < h1.epochs[0].train_loss


def test_early_stopping_patience_and_restore():
    scripted = [1.0] + [1.0 + 0.01 * i for i in range(20)]
    snapshots = {}

    def fake_eval(model, ds):
        return scripted[len(snapshots)], 0.5

    def remember(epoch, model, history):
        snapshots[epoch] = model.checksum()

    cfg = TrainConfig(batch_size=8, max_epochs=40, early_stop_patience=15)
    model, hist = train_mscnn(Mscnn(TINY, seed=0), toy_sets(), toy_sets(1), cfg,
                              evaluate_fn=fake_eval, on_epoch_end=remember)
    assert len(hist) == 16 and hist.stopped_early and hist.best_epoch == 1
    assert model.checksum() == snapshots[1]


def test_early_stopper_unit():
    s = EarlyStopping(2)
    assert s.update(1, 1.0) == (True, False)
    assert s.update(2, 1.0) == (False, False)
    assert s.update(3, 0.5) == (True, False)
    assert s.update(4, 0.6) == (False, False) and s.update(5, 0.7) == (False, True)


@pytest.mark.filterwarnings("ignore:invalid value")
def test_training_errors():
    with pytest.raises(ValueError):
        train_mscnn(Mscnn(TINY), SampleSet.empty(2, 8), toy_sets())
    bad = toy_sets()
    bad.patches[0, 0, 0, 0] = np.inf
    with pytest.raises(TrainingDivergenceError):
        train_mscnn(Mscnn(TINY), bad, toy_sets(), TrainConfig(batch_size=24, max_epochs=1))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})


def test_batch_bounds():
    from lczmap.nn.train import batch_bounds

    assert batch_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert batch_bounds(9, 4) == [(0, 4), (4, 9)]
    assert batch_bounds(3, 96) == [(0, 3)]
    with pytest.raises(ValueError):
        batch_bounds(1, 4)
