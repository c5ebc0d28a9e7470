import numpy as np
import pytest

from manigrad import autodiff as ad
from manigrad.data import gen_blob
from manigrad.errors import ShapeError, UntrainedModelError
from manigrad.models import (Adam, ClassLogit, TrainConfig, build_vae, classify_grad, identity_vae,
                             kl_divergence, load_classifier, load_vae, predicted_class, save_classifier,
                             train_classifier, train_vae)


class TestNetwork:
    def test_weights_are_read_only(self, tiny_classifier):
        w, _ = tiny_classifier.params[0]
        with pytest.raises(ValueError):
            w[0, 0] = 1.0

    def test_modes_share_weights(self, tiny_classifier):
        soft = tiny_classifier.with_mode("softplus")
        guided = tiny_classifier.with_mode("guided")
        assert soft.params is tiny_classifier.params and guided.params is tiny_classifier.params
        x = np.random.default_rng(0).uniform(-1, 1, (4, 64))
        np.testing.assert_array_equal(guided.predict(x), tiny_classifier.predict(x))

    def test_softplus_swap_approaches_relu(self, tiny_classifier):
        x = np.random.default_rng(1).uniform(-1, 1, (8, 64))
        native = tiny_classifier.predict(x)
        err = [np.abs(tiny_classifier.with_mode("softplus", beta=b).predict(x) - native).max()
               for b in (10.0, 100.0, 1000.0)]
        assert err[0] > err[1] > err[2]
        assert err[2] < 1e-2

    def test_bad_mode(self, tiny_classifier):
        with pytest.raises(ValueError):
            tiny_classifier.with_mode("sideways")

    def test_input_shape_checked(self, tiny_classifier):
        with pytest.raises(ShapeError):
            tiny_classifier.predict(np.ones((2, 10)))

    def test_guided_gradient_is_nonnegative_through_relus(self, tiny_classifier):
        # with a positive upstream signal only, the last hidden layer passes positive
        # signal; overall the map differs from the plain gradient
        x = np.random.default_rng(2).uniform(-1, 1, 64)
        plain = classify_grad(tiny_classifier, x, 0)
        guided = classify_grad(tiny_classifier, x, 0, mode="guided")
        assert not np.allclose(plain, guided)

    def test_class_logit(self, tiny_classifier):
        x = np.random.default_rng(3).uniform(-1, 1, (3, 64))
        out = ClassLogit(tiny_classifier, 2)(ad.Tensor(x)).data
        np.testing.assert_array_equal(out, tiny_classifier.predict(x)[:, 2])
        assert predicted_class(tiny_classifier, x[0]) == tiny_classifier.predict(x[0]).argmax()


class TestVae:
    def test_untrained_raises(self):
        vae = build_vae(data_dim=16, latent_dim=2, hidden=(8,), n_features=4)
        with pytest.raises(UntrainedModelError):
            vae.encode_mean(np.zeros(16))

    def test_encode_is_deterministic_and_decode_bounded(self, tiny_vae):
        x = np.random.default_rng(0).uniform(-1, 1, 64)
        np.testing.assert_array_equal(tiny_vae.encode_mean(x), tiny_vae.encode_mean(x))
        rec = tiny_vae.decode(np.array([50.0, -50.0]))
        assert rec.min() >= -1.0 and rec.max() <= 1.0

    def test_decode_checks_latent_dim(self, tiny_vae):
        with pytest.raises(ShapeError):
            tiny_vae.decode(np.zeros(3))

    def test_identity_vae(self):
        vae = identity_vae(3)
        z = np.array([0.1, -0.2, 0.3])
        np.testing.assert_array_equal(vae.encode_mean(z), z)
        np.testing.assert_array_equal(vae.decode(z), z)

    def test_kl_closed_form(self):
        mu = np.array([[0.5, -1.0]])
        logvar = np.array([[0.2, -0.3]])
        expected = 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1 - logvar)
        assert kl_divergence(ad.Tensor(mu), ad.Tensor(logvar)).item() == pytest.approx(expected, rel=1e-14)

    def test_training_lowers_loss_and_is_reproducible(self):
        ds = gen_blob(64, seed=0)
        cfg = TrainConfig(epochs=4, batch_size=16, learning_rate=3e-3, seed=1)
        vae1, hist1 = train_vae(ds.inputs, cfg, latent_dim=1, hidden=(32,))
        vae2, hist2 = train_vae(ds.inputs, cfg, latent_dim=1, hidden=(32,))
        assert hist1[-1] < hist1[0]
        assert hist1 == hist2
        for (a, b), (c, d) in zip(vae1.decoder.params, vae2.decoder.params):
            np.testing.assert_array_equal(a, c)
            np.testing.assert_array_equal(b, d)

    def test_save_load(self, tiny_vae, tmp_path):
        tiny_vae.save(tmp_path / "v.mgm")
        back = load_vae(tmp_path / "v.mgm")
        z = np.array([0.3, -0.7])
        np.testing.assert_array_equal(back.decode(z), tiny_vae.decode(z))
        with pytest.raises(ValueError):
            load_classifier(tmp_path / "v.mgm")


class TestClassifier:
    def test_training_fits_blobs(self):
        ds = gen_blob(80, seed=2)
        net, hist = train_classifier(ds.inputs, ds.labels, 2, TrainConfig(epochs=5, batch_size=16, seed=0),
                                     hidden=(16,))
        assert hist[-1] < hist[0]
        assert np.mean(net.predict(ds.inputs).argmax(axis=1) == ds.labels) >= 0.9

    def test_label_checks(self):
        with pytest.raises(ValueError):
            train_classifier(np.zeros((2, 4)), np.array([0, 3]), 2, TrainConfig(epochs=1))
        with pytest.raises(ValueError):
            train_classifier(np.zeros((2, 4)), np.array([0]), 2, TrainConfig(epochs=1))

    def test_save_load(self, tiny_classifier, tmp_path):
        save_classifier(tmp_path / "c.mgm", tiny_classifier)
        back = load_classifier(tmp_path / "c.mgm")
        x = np.ones((1, 64))
        np.testing.assert_array_equal(back.predict(x), tiny_classifier.predict(x))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(lr_schedule="step").validate()
        cfg = TrainConfig(epochs=10, learning_rate=1.0)
        assert cfg.lr_at(0) == 1.0 and cfg.lr_at(5) == pytest.approx(0.5)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        opt = Adam([np.zeros(3)], lr=0.1)
        out = opt.step([np.zeros(3)], [np.array([2.0, -0.5, 1e-3])])
        np.testing.assert_allclose(out[0], [-0.1, 0.1, -0.1], rtol=1e-4)


class TestWorkedExamples:
    def test_shape_contracts(self, tiny_vae, tiny_classifier):
        assert tiny_vae.encode_mean(np.zeros(64)).shape == (2,)
        assert tiny_vae.decode(np.zeros(2)).shape == (64,)
        assert tiny_classifier.predict(np.zeros(64)).shape == (1, 3)

    def test_decoder_directional_derivative(self, tiny_vae, rng):
        h = 1e-5
        for _ in range(10):
            z, u = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
            fd = (tiny_vae.decode(z + h * u) - tiny_vae.decode(z - h * u)) / (2 * h)
            assert np.linalg.norm(ad.jvp(tiny_vae.decoder, z, u) - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_sphere_decoder_closed_form(self, rng):
        from manigrad.data import sphere_decoder

        z = rng.uniform(0, 3, (5, 2))
        th, ph = z[:, 0], z[:, 1]
        expected = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=1)
        np.testing.assert_array_equal(sphere_decoder()(ad.Tensor(z)).data, expected)

    def test_vae_loss_terms(self, rng):
        from manigrad.models import VaeOutput, vae_loss

        x = ad.Tensor(rng.uniform(-1, 1, (3, 4)))
        zero = ad.Tensor(np.zeros((3, 2)))
        proj = rng.normal(size=(4, 2))
        assert vae_loss(x, VaeOutput(zero, zero, x), 1.0, 1.0, proj).item() == 0.0
        assert kl_divergence(ad.Tensor(np.ones((1, 1))), ad.Tensor(np.zeros((1, 1)))).item() == 0.5
        rec = ad.Tensor(rng.uniform(-1, 1, (3, 4)))
        plain = vae_loss(x, VaeOutput(zero, zero, rec), 0.3, 0.0).item()
        assert plain == pytest.approx(np.mean((rec.data - x.data) ** 2))
        with pytest.raises(ValueError):
            vae_loss(x, VaeOutput(zero, zero, rec), -1.0)

    def test_zero_learning_rate_keeps_weights(self):
        ds = gen_blob(16, seed=0)
        init = build_vae(1024, 1, (8,), seed=4, n_features=4)
        cfg = TrainConfig(epochs=1, learning_rate=0.0, kl_weight=0.0, seed=4)
        vae, _ = train_vae(ds.inputs, cfg, latent_dim=1, hidden=(8,), vae=init)
        for (a, b), (c, d) in zip(vae.encoder.params + vae.decoder.params, init.encoder.params + init.decoder.params):
            np.testing.assert_array_equal(a, c)
            np.testing.assert_array_equal(b, d)

    def test_separable_two_class_set(self, rng):
        x = np.concatenate([rng.normal(-1, 0.3, (50, 4)), rng.normal(1, 0.3, (50, 4))])
        y = np.repeat([0, 1], 50)
        cfg = TrainConfig(epochs=10, batch_size=10, learning_rate=1e-2, seed=0)
        net, _ = train_classifier(x, y, 2, cfg, hidden=(8,))
        net2, _ = train_classifier(x, y, 2, cfg, hidden=(8,))
        assert np.mean(net.predict(x).argmax(axis=1) == y) >= 0.99
        for (a, _), (b, _) in zip(net.params, net2.params):
            np.testing.assert_array_equal(a, b)

    def test_linear_classifier_gradient(self, rng):
        from manigrad.models import LayerSpec, Network

        w = rng.normal(size=(5, 1))
        net = Network([LayerSpec(5, 1)], [(w, np.zeros(1))])
        np.testing.assert_array_equal(classify_grad(net, rng.normal(size=5), 0), w[:, 0])

    def test_softplus_swap_far_from_kink(self, rng):
        from manigrad.models import LayerSpec, Network

        # positive weights and inputs: every pre-activation exceeds 5
        W1 = rng.uniform(1, 2, (6, 10))
        W2 = rng.uniform(1, 2, (10, 2))
        net = Network([LayerSpec(6, 10, "relu"), LayerSpec(10, 2)], [(W1, np.full(10, 5.0)), (W2, np.zeros(2))])
        x = rng.uniform(0, 1, 6)
        native = classify_grad(net, x, 0)
        soft = classify_grad(net, x, 0, mode="softplus")
        assert np.linalg.norm(soft - native) < 1e-2 * np.linalg.norm(native)
        # guided masking is inert when all activations and upstream signals are positive
        np.testing.assert_array_equal(classify_grad(net, x, 0, mode="guided"), native)

    def test_modes_leave_weights_bit_identical(self, tiny_classifier):
        before = [w.tobytes() for w, _ in tiny_classifier.params]
        for mode in ("softplus", "guided", "native"):
            tiny_classifier.with_mode(mode).predict(np.zeros(64))
        assert before == [w.tobytes() for w, _ in tiny_classifier.params]

    def test_decoder_vjp_finite_everywhere(self, tiny_vae, rng):
        z = rng.normal(scale=3.0, size=(1000, 2))
        assert np.all(np.isfinite(ad.vjp(tiny_vae.decoder, z, np.ones((1000, 64)))))

    def test_round_trip_after_training_on_one_factor_set(self):
        ds = gen_blob(256, seed=0)
        cfg = TrainConfig(epochs=150, batch_size=32, learning_rate=3e-3, kl_weight=3e-2, feature_weight=0.0)
        vae, _ = train_vae(ds.inputs, cfg, latent_dim=1, hidden=(64,))
        z = np.random.default_rng(5).normal(size=(200, 1))
        # measured 0.19 for this seed and configuration
        assert np.mean(np.abs(vae.encode_mean(vae.decode(z)) - z)) <= 0.3
