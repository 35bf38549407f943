import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednids import defenses as D
from fednids.data import Dataset, Feature, FeatureSchema, load_dataset
from fednids.fl import (
    FlConfig,
    FlError,
    aggregate,
    local_update,
    sample_clients,
    train,
    train_centralized_reference,
    write_rounds_csv,
)
from fednids.models import MlpClassifier


def _schema(dim):
    return FeatureSchema(tuple(Feature(f"f{i}", "continuous", 0.0, 1.0) for i in range(dim)))


def test_config_validation():
    with pytest.raises(ValueError):
        FlConfig(k=0)
    with pytest.raises(ValueError):
        FlConfig(local_steps=0)
    with pytest.raises(ValueError):
        FlConfig(n_clients=2, weights=[0.5, 0.4])
    FlConfig(n_clients=2, weights=[0.25, 0.75])


def test_lr_schedule_exact():
    cfg = FlConfig(lr=0.03, decay=0.9)
    for r in (0, 19, 20, 39, 40, 299):
        assert cfg.lr_at(r) == 0.03 * 0.9 ** (r // 20)


def test_zero_lr_leaves_model_unchanged():
    split = load_dataset("synth", 200, seed=0, dim=4)
    model = MlpClassifier.create(4, 2, seed=0)
    for defense in (D.NoDefense(), D.DpNoise(), D.GradientPruning(), D.FedDef(D.FedDefConfig(steps=2))):
        for opt in ("sgd", "adam"):
            params, _ = local_update(model, split.train, defense, 1, 0.0, 16, np.random.default_rng(0), opt)
            for p, q in zip(params, model.params):
                np.testing.assert_array_equal(p, q)


def test_plain_step_matches_least_squares_hand_computation():
    # one dense layer, 1 input, 2 classes: the cross-entropy gradient has a closed form
    x = np.array([[0.2], [0.8], [0.5]])
    y = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    data = Dataset(x, y, _schema(1), ["a", "b"])
    model = MlpClassifier.from_dims([1, 2], seed=0)
    W, b = model.params
    z = x @ W.T + b
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    err = (p - y) / len(x)
    lr = 0.1
    expected = [W - lr * err.T @ x, b - lr * err.sum(axis=0)]
    params, _ = local_update(model, data, D.NoDefense(), 1, lr, 3, np.random.default_rng(0), "sgd")
    for got, want in zip(params, expected):
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_empty_shard_rejected():
    empty = Dataset(np.zeros((0, 3)), np.zeros((0, 2)), _schema(3), ["a", "b"])
    with pytest.raises(FlError):
        local_update(MlpClassifier.create(3, 2, 0), empty, D.NoDefense(), 1, 0.1, 4, np.random.default_rng(0))


def test_aggregate_examples():
    a = [np.array([0.0]), np.array([[1.0, 2.0]])]
    b = [np.array([2.0]), np.array([[3.0, 4.0]])]
    out = aggregate([a, b])
    np.testing.assert_array_equal(out[0], [1.0])
    np.testing.assert_array_equal(out[1], [[2.0, 3.0]])
    same = aggregate([a, a, a])
    for p, q in zip(same, a):
        np.testing.assert_array_equal(p, q)
    with pytest.raises(ValueError):
        aggregate([a, [np.zeros(2), np.zeros((1, 2))]])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_aggregate_permutation_invariant_bitwise(k, seed):
    rng = np.random.default_rng(seed)
    models = [[rng.normal(size=(3, 2)) * 10.0 ** rng.integers(-8, 8), rng.normal(size=3)] for _ in range(k)]
    perm = rng.permutation(k)
    for p, q in zip(aggregate(models), aggregate([models[i] for i in perm])):
        np.testing.assert_array_equal(p, q)


def test_sampling_frequency_within_three_sigma():
    w = np.array([0.5, 0.3, 0.15, 0.05])
    draws = sample_clients(w, 10_000, np.random.default_rng(42))
    freq = np.bincount(draws, minlength=4) / 10_000
    sigma = np.sqrt(w * (1 - w) / 10_000)
    assert np.all(np.abs(freq - w) <= 3 * sigma)


def test_single_client_equals_centralized_training():
    split = load_dataset("synth", 300, seed=4, dim=5)
    cfg = FlConfig(
        n_clients=1, k=1, rounds=15, local_steps=2, local_bs=32, lr=1e-2, decay=0.5, decay_every=5, norm="global", seed=4
    )
    model = MlpClassifier.create(5, 2, seed=4)
    fed = train(cfg, split, model=model).model
    central = train_centralized_reference(cfg, split.train, model)
    for p, q in zip(fed.params, central.params):
        np.testing.assert_array_equal(p, q)


def test_training_deterministic_and_records():
    split = load_dataset("synth", 300, seed=2, dim=4)
    cfg = FlConfig(n_clients=3, k=2, rounds=6, local_bs=16, seed=2, eval_every=3)
    a, b = train(cfg, split), train(cfg, split)
    for p, q in zip(a.model.params, b.model.params):
        np.testing.assert_array_equal(p, q)
    assert [len(r.sampled) for r in a.records] == [2] * 6
    assert [r.accuracy is not None for r in a.records] == [False, False, True, False, False, True]


def test_rounds_csv(tmp_path):
    split = load_dataset("synth", 200, seed=0, dim=4)
    res = train(FlConfig(n_clients=2, k=2, rounds=3, local_bs=8), split)
    path = tmp_path / "rounds.csv"
    write_rounds_csv(path, res.records)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,accuracy,loss,lr" and len(lines) == 4


def test_synth_two_class_converges():
    split = load_dataset("synth", 2000, seed=0, dim=8)
    res = train(FlConfig(n_clients=10, k=10, rounds=40, local_bs=64, seed=0, eval_every=40), split)
    assert res.final_accuracy >= 0.95


def test_too_many_clients():
    split = load_dataset("synth", 20, seed=0, dim=3)
    with pytest.raises(FlError):
        train(FlConfig(n_clients=50, k=5), split)
