import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from fednids import defenses as D
from fednids.data import Feature, FeatureSchema, load_dataset
from fednids.models import MlpClassifier, param_grads
from fednids.reconstruction import (
    InversionConfig,
    LeakedUpdate,
    ReconstructionError,
    UnsupportedArchitecture,
    extract_single,
    invert,
    invert_labels,
    reconstruct,
    write_reconstructions,
)


def _update(model, x, y):
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    return LeakedUpdate(param_grads(model, x, y), batch_size=len(x))


def test_extraction_exact_for_single_rows():
    rng = np.random.default_rng(0)
    for i in range(50):
        model = MlpClassifier.create(6, 3, seed=i)
        x = rng.uniform(size=(1, 6))
        y = np.eye(3)[[rng.integers(3)]]
        ext = extract_single(_update(model, x, y))
        assert ext.ok
        assert np.max(np.abs(ext.x - x)) <= 1e-6


def test_extraction_fails_for_batches():
    rng = np.random.default_rng(1)
    model = MlpClassifier.create(5, 2, seed=1)
    for b in (2, 3, 8):
        ext = extract_single(_update(model, rng.uniform(size=(b, 5)), np.eye(2)[rng.integers(2, size=b)]))
        assert not ext.ok and ext.x is None


def test_extraction_fails_on_vanished_gradient():
    model = MlpClassifier.create(4, 2, seed=0)
    up = _update(model, np.full((1, 4), 0.3), np.eye(2)[[0]])
    tiny = LeakedUpdate([g * 1e-16 / np.max(np.abs(g)) for g in up.grads], 1)
    ext = extract_single(tiny)
    assert not ext.ok and "vanished" in ext.reason


def test_extraction_needs_weight_and_bias():
    with pytest.raises(UnsupportedArchitecture):
        extract_single(LeakedUpdate([np.zeros((3, 2)), np.zeros((4, 3))]))
    with pytest.raises(UnsupportedArchitecture):
        extract_single(LeakedUpdate([np.zeros((3, 2)), np.zeros(4)]))


def test_update_from_model_delta():
    model = MlpClassifier.create(3, 2, seed=0)
    g = param_grads(model, np.full((1, 3), 0.5), np.eye(2)[[1]])
    after = [p - 0.01 * gi for p, gi in zip(model.params, g)]
    up = LeakedUpdate.from_model_delta(model.params, after, 0.01)
    for a, b in zip(up.grads, g):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_inversion_fixed_point():
    model = MlpClassifier.create(4, 3, seed=2)
    x, y = np.full((1, 4), 0.4), np.eye(3)[[2]]
    inv = invert(model, _update(model, x, y), InversionConfig(steps=5, restarts=1), np.random.default_rng(0), init=(x, y))
    assert inv.objective == 0.0
    np.testing.assert_array_equal(inv.x, x)
    np.testing.assert_array_equal(inv.y, y)
    assert inv.labels.tolist() == [2]


def test_inversion_matches_grid_search_minimizer():
    model = MlpClassifier.from_dims([2, 4, 2], seed=5)
    x_true, y_true = np.array([[0.37, 0.81]]), np.eye(2)[[1]]
    target = param_grads(model, x_true, y_true)
    flat_target = np.concatenate([g.reshape(-1) for g in target])

    # for fixed x the gradient is linear in y, so min over y is least squares
    def best_over_labels(x):
        cols = [np.concatenate([g.reshape(-1) for g in param_grads(model, x, e[None])]) for e in np.eye(2)]
        A = np.stack(cols, axis=1)
        y, *_ = np.linalg.lstsq(A, flat_target, rcond=None)
        return np.linalg.norm(A @ y - flat_target)

    grid = np.round(np.arange(0, 1.0001, 0.01), 2)
    values = np.array([[best_over_labels(np.array([[a, b]])) for b in grid] for a in grid])
    ia, ib = np.unravel_index(np.argmin(values), values.shape)
    grid_min = np.array([grid[ia], grid[ib]])
    inv = invert(model, LeakedUpdate(target, 1), InversionConfig(), np.random.default_rng(3))
    print(f"grid minimiser {grid_min}, inversion {inv.x[0]}")
    assert np.max(np.abs(inv.x[0] - grid_min)) <= 0.05
    assert inv.labels.tolist() == [1]


def test_inversion_trace_is_non_increasing():
    model = MlpClassifier.create(4, 2, seed=1)
    up = _update(model, np.full((1, 4), 0.6), np.eye(2)[[0]])
    inv = invert(model, up, InversionConfig(steps=60, restarts=1), np.random.default_rng(1))
    assert all(b <= a for a, b in zip(inv.trace, inv.trace[1:]))


def test_inversion_cosine_metric_recovers_row():
    # some starts sit near the antipode and stall; restarts recover
    model = MlpClassifier.create(4, 2, seed=1)
    up = _update(model, np.full((1, 4), 0.6), np.eye(2)[[0]])
    inv = invert(model, up, InversionConfig(metric="cosine"), np.random.default_rng(1))
    assert 0.0 <= inv.objective < 1e-6
    np.testing.assert_allclose(inv.x, 0.6, atol=1e-3)


def _hungarian_error(truth, recovered):
    cost = np.linalg.norm(truth[:, None, :] - recovered[None, :, :], axis=2)
    r, c = linear_sum_assignment(cost)
    return cost[r, c].mean()


def test_batch_reconstruction_degrades_with_batch_size():
    split = load_dataset("synth", 200, seed=8, dim=5)
    model = MlpClassifier.create(5, 2, seed=8)
    cfg = InversionConfig(steps=150, restarts=1)
    errors = {}
    for b in (5, 10):
        x, y = split.train.X[:b], split.train.Y[:b]
        inv = invert(model, _update(model, x, y), cfg, np.random.default_rng(8))
        assert inv.x.shape == (b, 5)
        assert np.all((inv.x >= 0) & (inv.x <= 1))
        errors[b] = _hungarian_error(x, inv.x)
    print(f"mean matched row error: batch 5 {errors[5]:.4f}, batch 10 {errors[10]:.4f}")
    assert errors[5] < errors[10]


def test_canonicalized_output_is_schema_legal():
    schema = FeatureSchema(
        (
            Feature("a", "continuous", 0.0, 10.0),
            Feature("b", "discrete", 0.0, 4.0),
            Feature("c", "continuous", 0.0, 1.0),
        )
    )
    model = MlpClassifier.create(3, 2, seed=0)
    up = _update(model, np.array([[0.2, 0.5, 0.9]]), np.eye(2)[[1]])
    inv = invert(model, LeakedUpdate(up.grads, 2), InversionConfig(steps=20, restarts=1), np.random.default_rng(0), schema)
    assert np.all((inv.x >= 0) & (inv.x <= 1))
    levels = inv.x[:, 1] * 4
    np.testing.assert_allclose(levels, np.round(levels), atol=1e-12)


def test_label_inversion_with_fixed_rows():
    rng = np.random.default_rng(4)
    model = MlpClassifier.create(6, 5, seed=4)
    hits = 0
    for i in range(10):
        x = rng.uniform(size=(1, 6))
        y = np.eye(5)[[rng.integers(5)]]
        yhat, value = invert_labels(model, _update(model, x, y), x, InversionConfig(), rng)
        hits += int(yhat.argmax() == y.argmax())
        assert value >= 0
    assert hits == 10


def test_reconstruct_method_precedence():
    rng = np.random.default_rng(0)
    model = MlpClassifier.create(4, 3, seed=0)
    cfg = InversionConfig(steps=30, restarts=1)
    x, y = rng.uniform(size=(1, 4)), np.eye(3)[[1]]
    rec = reconstruct(model, _update(model, x, y), cfg, rng)
    assert rec.method == "extraction"
    np.testing.assert_allclose(rec.x, x, atol=1e-9)
    assert rec.labels.tolist() == [1]

    vanished = LeakedUpdate([np.zeros_like(p) for p in model.params], 1)
    rec = reconstruct(model, vanished, cfg, rng)
    assert rec.method == "inversion" and "vanished" in rec.note

    xb, yb = rng.uniform(size=(10, 4)), np.eye(3)[rng.integers(3, size=10)]
    rec = reconstruct(model, _update(model, xb, yb), InversionConfig(steps=3, restarts=1), rng)
    assert rec.method == "inversion" and rec.x.shape == (10, 4)


def test_feddef_early_stop_forces_inversion():
    rng = np.random.default_rng(0)
    model = MlpClassifier.create(4, 2, seed=0)
    x, y = rng.uniform(size=(1, 4)), np.eye(2)[[0]]
    cfg = D.FedDefConfig()
    shared = D.FedDef(cfg).shared_gradient(model, x, y, rng)
    # an early stop means every pseudo-gradient entry is at most g_value
    peak = max(np.max(np.abs(g)) for g in shared)
    shared = [g * (cfg.g_value / peak) for g in shared]
    rec = reconstruct(model, LeakedUpdate(shared, 1), InversionConfig(steps=5, restarts=1), rng)
    assert rec.method == "inversion"


def test_dual_failure_is_reported():
    model = MlpClassifier.create(3, 2, seed=0)
    broken = LeakedUpdate([np.full_like(p, np.nan) for p in model.params], 1)
    with pytest.raises(ReconstructionError, match="extraction failed"):
        reconstruct(model, broken, InversionConfig(steps=3, restarts=2), np.random.default_rng(0))


def test_write_reconstructions(tmp_path):
    model = MlpClassifier.create(3, 2, seed=0)
    rng = np.random.default_rng(0)
    rec = reconstruct(model, _update(model, np.full((1, 3), 0.5), np.eye(2)[[0]]), InversionConfig(steps=5, restarts=1), rng)
    path = tmp_path / "rec.csv"
    write_reconstructions(path, [rec, rec])
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:5] == ["sample", "row", "method", "objective", "label"]
    assert len(lines) == 3
