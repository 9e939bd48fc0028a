import numpy as np
import pytest

from rbfmap import autodiff as ad
from rbfmap.autodiff import Tensor, grad_check
from rbfmap.errors import ConfigError, DimensionError
from rbfmap.metrics import separability
from rbfmap.models import (
    LayerSpec,
    Model,
    build_orig,
    build_prop,
    feature_tap,
    forward_logits,
    input_gradient,
    orig_spec,
    prop_spec,
)

TOY_CHANNELS = (3, 4, 4)


def toy_orig(seed=0):
    return Model(orig_spec(2, TOY_CHANNELS, "same"), (8, 8, 1), seed, name="orig")


def toy_prop(seed=0, P=(2, 2, 2)):
    return Model(prop_spec(2, P, channels=TOY_CHANNELS, padding="same"), (8, 8, 1), seed, name="prop")


def test_logit_shapes():
    x = np.random.default_rng(0).uniform(size=(3, 28, 28, 1))
    assert forward_logits(build_orig(), x).shape == (3, 10)
    assert forward_logits(build_prop(), x).shape == (3, 10)


def test_builds_are_deterministic():
    a, b = build_prop(seed=4), build_prop(seed=4)
    assert a.checksum() == b.checksum()
    assert build_orig(seed=4).checksum() != build_orig(seed=5).checksum()


def test_forward_is_pure():
    m = build_prop(seed=1)
    x = np.random.default_rng(1).uniform(size=(4, 28, 28, 1))
    assert np.array_equal(m.logits(x), m.logits(x))


def test_zero_image_gives_dense_bias():
    m = build_orig(seed=2)
    m.params["dense1.bias"].data[...] = np.arange(10.0)
    np.testing.assert_array_equal(m.logits(np.zeros((2, 28, 28, 1))), np.tile(np.arange(10.0), (2, 1)))


def test_orig_layer_sizes():
    m = build_orig()
    assert m.params["dense1.weights"].shape == (576, 10)
    assert [l.kind for l in m.spec] == [
        "conv", "relu", "maxpool", "conv", "relu", "maxpool", "conv", "relu", "flatten", "dense",
    ]


def test_prop_tap_channels():
    m = build_prop(P_per_block=(8, 8, 8))
    x = np.random.default_rng(3).uniform(size=(2, 28, 28, 1))
    _, taps = m.forward(Tensor(x), taps=True)
    assert [t.shape[-1] for t in taps] == [40, 72, 72]
    assert feature_tap(m, x, -1).shape == (2, 3 * 3 * 72)


def test_prop_last_only():
    m = build_prop(last_only=True)
    assert len(m.rbf_blocks) == 1 and m.rbf_blocks[0].K == 64


def test_prop_invalid_P():
    with pytest.raises(ConfigError):
        build_prop(P_per_block=(8, 0, 8))
    with pytest.raises(ConfigError):
        build_prop(P_per_block=(8, 8))
    with pytest.raises(ConfigError):
        build_orig(num_classes=1)


def test_bad_input_shape():
    with pytest.raises(DimensionError):
        build_orig().logits(np.zeros((1, 27, 28, 1)))


def _share_weights(orig, prop):
    """Copy ORIG's weights into PROP and embed the dense layer so the RBF columns carry zero weight."""
    for name, p in orig.params.items():
        if name.startswith("conv"):
            prop.params[name].data[...] = p.data
    prop.params["dense1.bias"].data[...] = orig.params["dense1.bias"].data
    K = orig.output_shape  # unused; readability
    del K
    last = prop.rbf_blocks[-1]
    h, w = 3, 3
    wp = prop.params["dense1.weights"].data
    wp[...] = 0.0
    wo = orig.params["dense1.weights"].data.reshape(h, w, last.K, -1)
    wp.reshape(h, w, last.P + last.K, -1)[:, :, last.P:, :] = wo


def test_embedding_property():
    rng = np.random.default_rng(5)
    orig = build_orig(seed=5)
    for p in orig.params.values():
        p.data[...] = rng.normal(scale=0.1, size=p.shape)
    prop = build_prop(seed=6, last_only=True)
    for block in prop.rbf_blocks:
        block.weights.data[...] = 0.0
        block.bias.data[...] = 0.0
        block.weights.trainable = block.bias.trainable = False
    _share_weights(orig, prop)
    x = rng.uniform(size=(5, 28, 28, 1))
    np.testing.assert_array_equal(prop.logits(x), orig.logits(x))


def test_embedding_property_every_layer():
    # with all blocks present, zero RBF channels still feed later convs; zero the kernel
    # slices that read them and the logits coincide with ORIG's
    rng = np.random.default_rng(7)
    orig = build_orig(seed=7)
    for p in orig.params.values():
        p.data[...] = rng.normal(scale=0.1, size=p.shape)
    prop = build_prop(seed=8)
    for block in prop.rbf_blocks:
        block.weights.data[...] = 0.0
        block.bias.data[...] = 0.0
    for i, name in ((0, "conv1"), (1, "conv2"), (2, "conv3")):
        ko = orig.params[f"{name}.kernel"].data
        kp = prop.params[f"{name}.kernel"].data
        kp[...] = 0.0
        if i == 0:
            kp[...] = ko
        else:
            P = prop.rbf_blocks[i - 1].P
            kp[:, :, P:, :] = ko
        prop.params[f"{name}.bias"].data[...] = orig.params[f"{name}.bias"].data
    prop.params["dense1.bias"].data[...] = orig.params["dense1.bias"].data
    last = prop.rbf_blocks[-1]
    wp = prop.params["dense1.weights"].data
    wp[...] = 0.0
    wp.reshape(3, 3, last.P + last.K, -1)[:, :, last.P:, :] = orig.params["dense1.weights"].data.reshape(3, 3, last.K, -1)
    x = rng.uniform(size=(4, 28, 28, 1))
    np.testing.assert_allclose(prop.logits(x), orig.logits(x), rtol=0, atol=1e-12)


def test_zero_rbf_blocks_only_change_dense_width():
    orig, prop = build_orig(seed=0), build_prop(seed=0)
    for block in prop.rbf_blocks:
        block.weights.data[...] = 0.0
    x = np.random.default_rng(9).uniform(size=(2, 28, 28, 1))
    _, taps = prop.forward(Tensor(x), taps=True)
    for t, block in zip(taps, prop.rbf_blocks):
        assert not t.data[..., :block.P].any()
    assert prop.params["dense1.weights"].shape[0] == 3 * 3 * 72
    assert orig.params["dense1.weights"].shape[0] == 3 * 3 * 64


def test_feature_tap_matches_forward_and_feeds_metrics():
    m = build_prop(seed=1)
    rng = np.random.default_rng(10)
    x = rng.uniform(size=(12, 28, 28, 1))
    _, taps = m.forward(Tensor(x), taps=True)
    for i in range(3):
        np.testing.assert_array_equal(feature_tap(m, x, i), taps[i].data.reshape(12, -1))
    y = np.arange(12) % 3
    for model in (m, build_orig(seed=1)):
        separability(feature_tap(model, x, -1), y, model.predict(x))
    with pytest.raises(IndexError):
        feature_tap(m, x, 3)


def test_input_gradient_shape_and_zero_model():
    m = build_orig(seed=3)
    x = np.random.default_rng(11).uniform(size=(3, 28, 28, 1))
    assert input_gradient(m, x, [0, 1, 2]).shape == x.shape
    for p in m.params.values():
        p.data[...] = 0.0
    assert not input_gradient(m, x, [0, 1, 2]).any()


def test_chunked_input_gradient_matches_single_pass():
    m = build_prop(seed=2)
    x = np.random.default_rng(12).uniform(size=(7, 28, 28, 1))
    y = np.arange(7) % 10
    np.testing.assert_allclose(m.input_gradient(x, y, batch_size=3), input_gradient(m, x, y), atol=1e-14)


def test_input_gradient_finite_differences_4x4():
    spec = [LayerSpec("conv", out=2, kernel=3, padding="same"), LayerSpec("relu"),
            LayerSpec("rbf-map", out=2), LayerSpec("flatten"), LayerSpec("dense", out=3)]
    m = Model(spec, (4, 4, 1), seed=0)
    x = Tensor(np.random.default_rng(13).uniform(size=(2, 4, 4, 1)), requires_grad=True)
    build = lambda: ad.softmax_cross_entropy(m.forward(x), [0, 2])
    assert ad.kink_margin(build, [x]) > 1e-4
    assert grad_check(build, [x]) <= 1e-4


@pytest.mark.parametrize("factory", [toy_orig, toy_prop])
def test_end_to_end_gradcheck_toy(factory):
    m = factory()
    rng = np.random.default_rng(14)
    for p in m.params.values():
        if p.name.endswith(".bias"):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    x = Tensor(rng.uniform(size=(2, 8, 8, 1)), requires_grad=True)
    build = lambda: ad.softmax_cross_entropy(m.forward(x), [0, 1])
    assert ad.kink_margin(build, [x, *m.parameters()]) > 1e-5
    err = grad_check(build, [x, *m.parameters()], max_coords=10, rng=np.random.default_rng(0))
    assert err <= 1e-4
