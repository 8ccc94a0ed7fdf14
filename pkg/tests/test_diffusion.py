import numpy as np
import pytest

from prognosisex import diffusion as Df
from prognosisex import tensor as T
from prognosisex.data import SyntheticConfig, generate_dataset
from prognosisex.rng import make_rng


def oracle_denoiser(x0, schedule):
    """Returns the exact noise consistent with x_t and the known clean image."""
    def f(x_t, t, z):
        ab = schedule.alpha_bar(t)
        return (np.asarray(x_t, dtype=np.float64) - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    return f


def test_schedule_is_monotone_and_nearly_destroys_signal():
    s = Df.make_schedule(100, 1e-3, 0.13)
    ab = s.alpha_bar(np.arange(101))
    assert ab[0] == 1.0 and np.all(np.diff(ab) < 0)
    assert ab[-1] < 2e-3
    with pytest.raises(ValueError):
        s.alpha_bar(101)
    with pytest.raises(ValueError):
        Df.make_schedule(10, 0.2, 0.1)


def test_q_sample_endpoints():
    s = Df.make_schedule(100, 1e-3, 0.13)
    x0 = np.ones((2, 1, 4, 4))
    eps = np.zeros_like(x0)
    np.testing.assert_allclose(Df.q_sample(x0, 1, eps, s), np.sqrt(s.alpha_bar(1)))
    per = Df.q_sample(x0, np.array([1, 100]), eps, s)
    assert per[0].mean() > 0.99 and per[1].mean() < 0.05
    with pytest.raises(ValueError):
        Df.q_sample(x0, 0, eps, s)


def test_single_step_with_true_noise_recovers_image():
    s = Df.make_schedule(100, 1e-3, 0.13)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (3, 1, 8, 8))
    for t in range(1, 101):
        eps = rng.standard_normal(x0.shape)
        xt = Df.q_sample(x0, t, eps, s)
        rec = Df.ddim_step(xt, t, None, s, lambda x, tt, z: eps, t_prev=0)
        assert np.abs(rec - x0).max() <= 1e-5


def test_strided_chain_with_oracle_denoiser_recovers_image():
    s = Df.make_schedule(100, 1e-3, 0.13)
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    xT = Df.q_sample(x0, 100, rng.standard_normal(x0.shape), s)
    rec = Df.reconstruct(None, xT, s, oracle_denoiser(x0, s), stride=5)
    assert np.abs(rec - x0).max() <= 1e-8


def test_timestep_sequence_ends_at_one():
    assert Df.timestep_sequence(100, 5)[:3] == [100, 95, 90]
    assert Df.timestep_sequence(100, 5)[-2:] == [5, 1]
    assert Df.timestep_sequence(10, 1) == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        Df.timestep_sequence(10, 0)


def test_ddim_step_rejects_bad_inputs():
    s = Df.make_schedule(10, 1e-3, 0.1)
    x = np.zeros((1, 1, 4, 4))
    with pytest.raises(ValueError):
        Df.ddim_step(x, 0, None, s, lambda *a: x)
    with pytest.raises(Df.SamplingError):
        Df.ddim_step(x, 3, None, s, lambda *a: np.full_like(x, np.nan))


def test_zero_denoiser_loss_is_mean_abs_normal():
    s = Df.make_schedule(100, 1e-3, 0.13)
    rng = make_rng(0, "zero-loss")
    x0 = np.zeros((64, 1, 16, 16), dtype=np.float32)      # 16384 noise samples
    t = rng.integers(1, 101, size=64)
    eps = rng.standard_normal(x0.shape).astype(np.float32)

    def zero(xt, tt, z):
        return T.Tensor(np.zeros(xt.shape, dtype=np.float32))

    loss = Df.diffusion_loss(x0, t, eps, lambda x: None, zero, s).item()
    assert abs(loss - np.sqrt(2 / np.pi)) <= 0.05


def test_networks_produce_expected_shapes():
    rng = make_rng(0, "nets")
    enc = Df.Encoder(rng, 16, 8, width=4)
    den = Df.Denoiser(rng, 8, width=8, emb_dim=16)
    x = T.Tensor(np.zeros((3, 1, 16, 16), dtype=np.float32))
    z = enc(x)
    assert z.shape == (3, 8)
    assert den(x, np.array([1, 5, 9]), z).shape == (3, 1, 16, 16)


def test_latent_reaches_denoiser_output():
    # gradient of the prediction with respect to z must be non-zero: z conditions every step
    rng = make_rng(0, "cond")
    den = Df.Denoiser(rng, 4, width=8, emb_dim=16)
    z = T.Tensor(np.ones((1, 4), dtype=np.float32), requires_grad=True)
    out = den(T.Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)), 10, z)
    T.backward(T.tsum(out))
    assert np.abs(z.grad).max() > 0


@pytest.fixture(scope="module")
def tiny_model():
    cases = generate_dataset(0, SyntheticConfig(n_cases=8))
    X = np.concatenate([c.slices for c in cases])
    model = Df.DiffusionAutoencoder(latent_dim=8, encoder_width=4, base_width=8, n_timesteps=20,
                                    sampling_stride=4, batch_size=8, n_steps=40, random_state=3)
    return model.fit(X), X


def test_training_reduces_loss(tiny_model):
    model, _ = tiny_model
    h = model.loss_history_
    assert len(h) == 40 and np.mean(h[-10:]) < np.mean(h[:10])


def test_fit_is_deterministic(tiny_model):
    model, X = tiny_model
    again = Df.DiffusionAutoencoder(**model.get_params()).fit(X)
    assert again.loss_history_ == model.loss_history_
    np.testing.assert_array_equal(again.transform(X[:4]), model.transform(X[:4]))


def test_save_load_round_trip(tiny_model, tmp_path):
    model, X = tiny_model
    model.save(tmp_path / "ae.pgxc")
    back = Df.DiffusionAutoencoder.load(tmp_path / "ae.pgxc")
    Z = model.transform(X[:4])
    np.testing.assert_array_equal(back.transform(X[:4]), Z)
    np.testing.assert_array_equal(back.schedule_.alphas_cum, model.schedule_.alphas_cum)
    np.testing.assert_array_equal(back.inverse_transform(Z, seed=1), model.inverse_transform(Z, seed=1))


def test_decoding_depends_on_latent_and_code(tiny_model):
    model, X = tiny_model
    Z = model.transform(X[:2])
    xT = model.stochastic_code(2, seed=5)
    a = model.inverse_transform(Z, x_T=xT)
    np.testing.assert_array_equal(a, model.inverse_transform(Z, x_T=xT))
    assert not np.array_equal(a, model.inverse_transform(Z[::-1], x_T=xT))
    with pytest.raises(T.ShapeError):
        model.inverse_transform(Z, x_T=xT[:1])


def test_input_validation(tiny_model):
    model, _ = tiny_model
    with pytest.raises(ValueError):
        model.transform(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        model.inverse_transform(np.zeros((2, 5)))


def test_inversion_with_constant_noise_is_exact():
    # a denoiser that always predicts the same eps makes encoding and decoding exact inverses
    s = Df.make_schedule(50, 1e-3, 0.2)
    rng = np.random.default_rng(7)
    x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
    eps = rng.standard_normal(x0.shape)

    def den(x, t, z):
        return eps
    xT = Df.invert(x0, None, s, den, stride=5)
    np.testing.assert_allclose(xT, Df.q_sample(x0, 50, eps, s), atol=1e-12)
    np.testing.assert_allclose(Df.reconstruct(None, xT, s, den, stride=5), x0, atol=1e-12)


def test_model_inversion_round_trip_is_close(tiny_model):
    model, X = tiny_model
    Z = model.transform(X[:3])
    xT = model.invert(X[:3], Z)
    assert xT.shape == (3, 1, 16, 16) and np.all(np.isfinite(xT))
    np.testing.assert_array_equal(xT, model.invert(X[:3]))
