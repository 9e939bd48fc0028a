import itertools

import numpy as np
import pytest

from rbfmap import attacks as atk
from rbfmap.attacks import AttackConfig
from rbfmap.autodiff import backward_call_count
from rbfmap.errors import ConfigError, DimensionError
from rbfmap.models import Model, prop_spec, orig_spec


class LinearLoss:
    """Loss ``g . x`` per sample with a fixed gradient ``g``; predicts label 0 iff loss < threshold."""

    input_shape = (2,)
    name = "linear"

    def __init__(self, g, threshold=np.inf):
        self.g = np.asarray(g, dtype=float)
        self.threshold = threshold
        self.gradient_calls = 0

    def loss_per_sample(self, x, labels):
        return x.reshape(len(x), -1) @ self.g.reshape(-1)

    def input_gradient(self, x, labels):
        self.gradient_calls += 1
        return np.broadcast_to(self.g, x.shape).copy() / len(x)

    def predict(self, x):
        return (self.loss_per_sample(x, None) >= self.threshold).astype(int)


def toy_model(seed=0, kind="orig"):
    if kind == "orig":
        spec = orig_spec(3, (3, 4, 4), "same")
    else:
        spec = prop_spec(3, (2, 2, 2), channels=(3, 4, 4), padding="same")
    return Model(spec, (8, 8, 1), seed, name=kind)


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(0)
    return rng.uniform(size=(20, 8, 8, 1)), rng.integers(0, 3, 20)


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig("cw", 0.1)
    with pytest.raises(ConfigError):
        AttackConfig("fgsm", -0.1)
    with pytest.raises(ConfigError):
        AttackConfig("bim", 0.1, iterations=0)
    assert atk.MNIST_ATTACKS["pgd"].epsilon == 0.1 and atk.MNIST_ATTACKS["pgd"].iterations == 40
    assert atk.MNIST_ATTACKS["mim"].decay == 1.0 and atk.MNIST_ATTACKS["gn"].epsilon == 20


def test_fgsm_sign_rule_and_clip():
    m = LinearLoss([0.2, -0.3])
    adv = atk.fgsm(m, np.array([[0.5, 0.5]]), [0], 0.1)
    np.testing.assert_allclose(adv.perturbed, [[0.6, 0.4]], atol=1e-15)
    adv = atk.fgsm(LinearLoss([1.0, 0.0]), np.array([[0.95, 0.5]]), [0], 0.1)
    assert adv.perturbed[0, 0] == 1.0 and adv.perturbed[0, 1] == 0.5  # sign(0) = 0


def test_fgsm_zero_budget(batch):
    x, y = batch
    m = toy_model()
    adv = atk.fgsm(m, x, y, 0.0)
    assert np.array_equal(adv.perturbed, x)
    assert adv.accuracy == adv.clean_accuracy


def test_bim_accumulation_closed_form():
    m = LinearLoss([1.0, -1.0])
    x = np.full((1, 2), 0.5)
    for iters, step, eps in [(5, 0.02, 0.3), (5, 0.1, 0.3), (3, 0.05, 0.1)]:
        adv = atk.bim(m, x, [0], eps, iters, step)
        np.testing.assert_allclose(np.abs(adv.perturbed - x), min(iters * step, eps), atol=1e-12)


def test_bim_single_step_equals_fgsm(batch):
    x, y = batch
    m = toy_model(1)
    assert np.array_equal(atk.bim(m, x, y, 0.2, 1, 0.2).perturbed, atk.fgsm(m, x, y, 0.2).perturbed)


def test_pgd_without_random_start_equals_bim(batch):
    x, y = batch
    m = toy_model(2)
    a = atk.pgd(m, x, y, 0.1, 4, 0.03, random_start=False)
    b = atk.bim(m, x, y, 0.1, 4, 0.03)
    assert np.array_equal(a.perturbed, b.perturbed)


def test_pgd_start_inside_ball(batch, monkeypatch):
    x, y = batch
    starts = []
    real = atk._iterate

    def spy(model, x0, start, *rest):
        starts.append(start)
        return real(model, x0, start, *rest)

    monkeypatch.setattr(atk, "_iterate", spy)
    atk.pgd(toy_model(3), x, y, 0.1, 2, seed=5)
    assert np.abs(starts[0] - x).max() <= 0.1 + 1e-12
    assert not np.array_equal(starts[0], x)


def test_mim_no_momentum_reduces_to_bim(batch):
    x, y = batch
    m = toy_model(4)
    a = atk.mim(m, x, y, 0.3, 10, decay=0.0)
    b = atk.bim(m, x, y, 0.3, 10, 0.03)
    assert np.array_equal(a.perturbed, b.perturbed)


def test_mim_constant_direction_keeps_sign():
    m = LinearLoss([0.5, -2.0])
    x = np.full((1, 2), 0.5)
    adv = atk.mim(m, x, [0], 0.3, 10, decay=1.0)
    np.testing.assert_allclose(adv.perturbed - x, [[0.3, -0.3]], atol=1e-12)


def test_mim_zero_gradient_sample_keeps_momentum():
    class Split(LinearLoss):
        def input_gradient(self, x, labels):
            g = np.zeros_like(x)
            g[0] = [1.0, -1.0]
            return g

    adv = atk.mim(Split([0, 0]), np.full((2, 2), 0.5), [0, 0], 0.2, 4)
    np.testing.assert_allclose(adv.perturbed[0], [0.7, 0.3], atol=1e-12)
    np.testing.assert_array_equal(adv.perturbed[1], [0.5, 0.5])


def test_gaussian_noise():
    x = np.full((1000, 10, 10, 1), 0.5)
    labels = np.zeros(1000, dtype=int)
    m = LinearLoss(np.zeros(100))
    assert np.array_equal(atk.gaussian_noise(m, x, labels, 0.0).perturbed, x)
    a = atk.gaussian_noise(m, x, labels, 20.0, seed=3)
    b = atk.gaussian_noise(m, x, labels, 20.0, seed=3)
    assert np.array_equal(a.perturbed, b.perturbed)
    noise = a.perturbed - x
    sigma = 20.0 / 255.0
    assert abs(noise.mean()) <= 3 * sigma / np.sqrt(noise.size)
    assert noise.std() == pytest.approx(sigma, rel=0.01)


def test_spsa_enumerates_all_sign_vectors():
    g = np.array([0.7, -1.3])
    loss = lambda batch: batch @ g
    estimates = []
    for u in itertools.product([-1.0, 1.0], repeat=2):
        u = np.array(u)

        class Fixed:
            def choice(self, values, size):
                return u.reshape(size)

        estimates.append(atk.spsa_gradient(loss, np.array([0.2, 0.4]), 0.01, 1, Fixed()))
    np.testing.assert_allclose(np.mean(estimates, axis=0), g, atol=1e-12)


def test_spsa_flat_loss_leaves_input():
    m = LinearLoss(np.zeros(2))
    x = np.array([[0.3, 0.6]])
    adv = atk.spsa(m, x, [0], 0.3, iterations=3, spsa_samples=4)
    assert np.array_equal(adv.perturbed, x)


def test_spsa_uses_no_gradients(batch):
    x, y = batch
    m = toy_model(5, "prop")
    before = backward_call_count()
    adv = atk.spsa(m, x[:3], y[:3], 0.3, iterations=2, spsa_samples=8)
    assert backward_call_count() == before
    assert np.abs(adv.perturbed - x[:3]).max() <= 0.3 + 1e-9


def test_spsa_ascends_linear_loss():
    m = LinearLoss([1.0, -1.0])
    adv = atk.spsa(m, np.full((1, 2), 0.5), [0], 0.2, iterations=5, spsa_samples=16)
    np.testing.assert_allclose(adv.perturbed, [[0.7, 0.3]], atol=1e-12)


@pytest.mark.parametrize("kind", atk.LINF_KINDS)
def test_linf_constraints_and_no_parameter_mutation(batch, kind):
    x, y = batch
    m = toy_model(6, "prop")
    before = m.checksum()
    cfg = AttackConfig(kind, 0.15, iterations=3, spsa_samples=4)
    n = 3 if kind == "spsa" else len(y)
    adv = atk.run_attack(m, x[:n], y[:n], cfg)
    assert adv.linf.max() <= 0.15 + 1e-9
    assert adv.perturbed.min() >= 0.0 and adv.perturbed.max() <= 1.0
    assert m.checksum() == before


def test_targeted_mode_lowers_target_loss(batch):
    x, y = batch
    m = toy_model(7)
    target = np.full(len(y), 2)
    adv = atk.run_attack(m, x, y, AttackConfig("pgd", 0.1, iterations=5, target=2))
    assert m.loss_per_sample(adv.perturbed, target).mean() < m.loss_per_sample(x, target).mean()


def test_transfer_reductions(batch):
    x, y = batch
    a, b = toy_model(8), toy_model(9, "prop")
    cfg = AttackConfig("fgsm", 0.1)
    same = atk.transfer_attack(a, a, x, y, cfg)
    assert same.target_accuracy == atk.run_attack(a, x, y, cfg).accuracy
    zero = atk.transfer_attack(a, b, x, y, AttackConfig("fgsm", 0.0))
    assert zero.target_accuracy == zero.target_clean_accuracy
    other = Model(orig_spec(3, (3, 4, 4), "same"), (10, 10, 1), 0)
    with pytest.raises(DimensionError):
        atk.transfer_attack(a, other, x, y, cfg)


def test_export(tmp_path, batch):
    x, y = batch
    adv = atk.fgsm(toy_model(), x, y, 0.1)
    adv.export(tmp_path)
    assert np.array_equal(np.load(tmp_path / "perturbed.npy"), adv.perturbed)
    assert len((tmp_path / "norms.csv").read_text().splitlines()) == len(y) + 1
