import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednids import autodiff as ad
from fednids.data import synth_dataset
from fednids.models import (
    AnomalyAutoencoder,
    GanPair,
    MlpClassifier,
    accuracy,
    anomaly_score,
    calibrate_threshold,
    ce_loss,
    classify,
    cross_entropy,
    gan_train,
    load_checkpoint,
    param_count,
    param_grads,
    save_checkpoint,
    train_autoencoder,
    train_centralized,
)
from fednids.autodiff.tensor import ShapeError


def test_architecture_and_param_count():
    m = MlpClassifier.create(dim=5, n_classes=3, seed=0)
    assert m.dims == [5, 10, 15, 3]
    assert [p.shape for p in m.params[:2]] == [(10, 5), (10,)]
    assert sum(p.size for p in m.params) == param_count(m.dims) == 10 * 5 + 10 + 15 * 10 + 15 + 3 * 15 + 3


def test_init_is_seeded_and_bounded():
    a = MlpClassifier.create(6, 2, seed=3)
    b = MlpClassifier.create(6, 2, seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert np.all(np.abs(a.params[0]) <= 1 / np.sqrt(6))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_classify_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    m = MlpClassifier.create(4, 5, seed=seed % 1000)
    p = classify(m, rng.uniform(size=(7, 4)))
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9)


def test_zero_model_is_uniform():
    m = MlpClassifier.create(4, 5, seed=0)
    m = m.with_params([np.zeros_like(p) for p in m.params])
    assert np.allclose(classify(m, np.random.default_rng(0).uniform(size=(3, 4))), 0.2)


def test_classify_dim_mismatch():
    with pytest.raises(ShapeError):
        classify(MlpClassifier.create(4, 2, seed=0), np.zeros((2, 5)))


def test_trained_model_separates_synthetic_classes():
    data = synth_dataset(dim=8, n_classes=2, rows=600, seed=1)
    X_before = data.X.copy()
    tr, te = data.subset(range(420)), data.subset(range(420, 600))
    m = train_centralized(MlpClassifier.create(8, 2, seed=0), tr.X, tr.Y, epochs=5, lr=1e-2, batch_size=32)
    assert accuracy(m, te.X, te.Y) > 0.9
    assert np.array_equal(data.X, X_before)


def test_ce_peaked_logits_near_zero():
    z = ad.Tensor(np.array([[10.0, 0.0, 0.0]]))
    assert cross_entropy(z, np.array([[1.0, 0, 0]])).item() < 0.01


def test_ce_uniform_logits_is_ln_n():
    assert cross_entropy(ad.Tensor(np.zeros((1, 4))), np.eye(4)[[1]]).item() == pytest.approx(np.log(4), abs=1e-12)


def test_ce_zero_target_is_zero():
    assert cross_entropy(ad.Tensor(np.random.default_rng(0).normal(size=(2, 3))), np.zeros((2, 3))).item() == 0.0


def test_ce_logit_gradient_is_softmax_minus_target():
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(1, 5))
    y = np.eye(5)[[3]]
    z = ad.Tensor(z0, requires_grad=True)
    (g,) = ad.grad(cross_entropy(z, y), [z])
    p = np.exp(z0) / np.exp(z0).sum()
    assert np.max(np.abs(g.data - (p - y))) <= 1e-9


def test_param_grads_shapes():
    m = MlpClassifier.create(3, 2, seed=0)
    gs = param_grads(m, np.full((2, 3), 0.5), np.eye(2))
    assert [g.shape for g in gs] == [p.shape for p in m.params]
    assert ce_loss(m, np.full((2, 3), 0.5), np.eye(2)).item() > 0


# -- autoencoder --------------------------------------------------------------


def test_identity_reconstruction_scores_zero():
    # hand-built identity net; inputs are non-negative so relu passes them through
    ae =AnomalyAutoencoder([4, 4, 4], [np.eye(4), np.zeros(4), np.eye(4), np.zeros(4)])
    assert np.all(anomaly_score(ae, np.random.default_rng(0).uniform(size=(5, 4))) == 0)


def test_threshold_quantile_one_is_max():
    ae = AnomalyAutoencoder.create(6, seed=1)
    benign = np.random.default_rng(2).uniform(size=(50, 6))
    assert calibrate_threshold(ae, benign, 1.0) == pytest.approx(anomaly_score(ae, benign).max())


def test_threshold_empty_benign_rejected():
    with pytest.raises(ValueError):
        calibrate_threshold(AnomalyAutoencoder.create(3, seed=0), np.zeros((0, 3)))


def test_score_permutation_equivariant():
    ae = AnomalyAutoencoder.create(5, seed=0)
    x = np.random.default_rng(3).uniform(size=(9, 5))
    perm = np.random.default_rng(4).permutation(9)
    assert np.array_equal(anomaly_score(ae, x)[perm], anomaly_score(ae, x[perm]))


def test_injected_outliers_exceed_threshold():
    benign = synth_dataset(dim=8, n_classes=2, rows=800, seed=5).X[:400]
    ae = train_autoencoder(AnomalyAutoencoder.create(8, seed=0), benign, epochs=60, seed=0)
    calibrate_threshold(ae, benign, 0.99)
    rng = np.random.default_rng(6)
    outliers = rng.choice([0.0, 1.0], size=(200, 8))
    flagged = anomaly_score(ae, outliers) > ae.threshold
    assert flagged.mean() >= 0.9


# -- GAN ----------------------------------------------------------------------


def test_gan_zero_epochs_is_untrained_generator():
    gan = GanPair.create(4, seed=0)
    trained, hist = gan_train(gan, np.random.default_rng(0).uniform(size=(10, 4)), epochs=0)
    z = gan.noise(5, np.random.default_rng(1))
    assert hist == []
    assert np.array_equal(trained.generate(z).data, gan.generate(z).data)


def test_gan_needs_two_samples():
    with pytest.raises(ValueError):
        gan_train(GanPair.create(3, seed=0), np.zeros((1, 3)), epochs=1)


def test_gan_samples_in_unit_box():
    gan = GanPair.create(6, seed=2, hidden=(16,))
    s = gan.sample(200, np.random.default_rng(0))
    assert np.all((s >= 0) & (s <= 1))


def test_gan_point_mass_convergence():
    c = np.array([0.2, 0.8, 0.5, 0.1])
    benign = np.tile(c, (64, 1))
    gan = GanPair.create(4, seed=0, noise_dim=8, hidden=(32, 32))
    _, hist = gan_train(
        gan, benign, epochs=20, seed=0, batch_size=16, lr=5e-4,
        monitor=lambda s: {"dist": float(np.mean(np.linalg.norm(s - c, axis=1)))},
    )  # fmt: skip
    # the descent phase; near equilibrium the adversarial game oscillates
    dist = np.array([h.metrics["dist"] for h in hist])
    smooth = np.convolve(dist, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) < 0), smooth


# -- checkpoints --------------------------------------------------------------


@pytest.mark.parametrize(
    "model",
    [
        MlpClassifier.create(3, 2, seed=9),
        AnomalyAutoencoder(*AnomalyAutoencoder.create(4, seed=1).__dict__.values()),
        GanPair.create(3, seed=2, noise_dim=4, hidden=(5, 6)),
    ],
)
def test_checkpoint_round_trip_bit_exact(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    a = model.__dict__
    b = back.__dict__
    for key in a:
        if isinstance(a[key], list) and a[key] and isinstance(a[key][0], np.ndarray):
            assert all(x.tobytes() == y.tobytes() for x, y in zip(a[key], b[key]))
        else:
            assert a[key] == b[key]


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"nope\n{}\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
