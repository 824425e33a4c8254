"""Scaler, the three classifier families, and grid search."""

import numpy as np
import pytest

from sevkit.baselines import (
    BaselineError,
    GridSpec,
    apply_scaler,
    default_grid,
    fit_scaler,
    grid_search,
    load_classifier,
    predict,
    predict_batch,
    save_classifier,
    train_family,
    train_gbdt,
    train_mlp,
    train_svm,
)
from sevkit.features import FeatureVector
from sevkit.gbdt import best_split_exact, fit_gbdt


def fv(values, set_id="acoustic"):
    values = np.asarray(values, dtype=float)
    return FeatureVector(values=values, names=tuple(f"f{i}" for i in range(values.size)), set_id=set_id)


class TestScaler:
    def test_hand_z_score(self):
        scaler = fit_scaler([fv([0.0]), fv([2.0])])
        assert scaler.mean[0] == 1.0
        assert scaler.std[0] == 1.0
        out = apply_scaler(scaler, fv([2.0]))
        assert out.values[0] == 1.0

    def test_constant_dimension_maps_to_zero(self):
        scaler = fit_scaler([fv([3.0, 1.0]), fv([3.0, 5.0])])
        out = apply_scaler(scaler, fv([3.0, 9.0]))
        assert out.values[0] == 0.0

    def test_dimension_mismatch_rejected(self):
        scaler = fit_scaler([fv([0.0, 1.0, 2.0])])
        with pytest.raises(BaselineError, match="dim"):
            apply_scaler(scaler, fv([0.0, 1.0]))

    def test_train_statistics_only(self):
        rng = np.random.default_rng(0)
        train = [fv(rng.normal(5, 2, size=4)) for _ in range(50)]
        scaler = fit_scaler(train)
        transformed = np.stack([apply_scaler(scaler, f).values for f in train])
        assert np.all(np.abs(transformed.mean(axis=0)) < 1e-9)
        np.testing.assert_allclose(transformed.std(axis=0), 1.0, atol=1e-9)
        # refit reproduces identical transforms bit for bit
        again = fit_scaler(train)
        test_vec = fv(rng.normal(size=4))
        assert np.array_equal(apply_scaler(scaler, test_vec).values, apply_scaler(again, test_vec).values)


XOR_X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_Y = np.array([0, 1, 1, 0])


class TestSvm:
    def test_separable_two_point_classes(self):
        X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
        y = np.array([0, 0, 1, 1])
        model = train_svm(X, y, C=1.0, gamma=1.0)
        assert np.array_equal(predict_batch(model, X), y)

    def test_grid_endpoints_accepted(self):
        X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
        y = np.array([0, 0, 1, 1])
        for c in (1e-4, 1e4):
            for g in (1e-4, 1e4):
                train_svm(X, y, C=c, gamma=g)

    def test_xor_with_rbf_nonlinearity(self):
        model = train_svm(XOR_X, XOR_Y, C=100.0, gamma=10.0)
        # exhaustive prediction check over the four training points
        assert [predict(model, x) for x in XOR_X] == list(XOR_Y)

    def test_single_class_rejected(self):
        with pytest.raises(BaselineError, match="2 classes"):
            train_svm(np.zeros((3, 2)), np.zeros(3, dtype=int), C=1.0, gamma=1.0)

    def test_kkt_conditions_at_convergence(self):
        """Soft-margin dual KKT: alpha=0 -> margin >= 1, 0<alpha<C ->
        margin ~ 1, alpha=C -> margin <= 1, all within tolerance."""
        rng = np.random.default_rng(3)
        X = np.vstack([rng.normal(0, 1, (25, 3)), rng.normal(2.0, 1, (25, 3))])
        y = np.array([0] * 25 + [1] * 25)
        C = 10.0
        model = train_svm(X, y, C=C, gamma=0.5)
        # with two classes one-vs-rest fits a single "is class 1" machine
        binary = model.payload.estimators_[0]
        y_signed = np.where(y == 1, 1.0, -1.0)
        margins = y_signed * binary.decision_function(X)
        alphas = np.zeros(len(X))
        alphas[binary.support_] = np.abs(binary.dual_coef_[0])
        tol = 5e-3
        for i in range(len(X)):
            if alphas[i] < 1e-9:
                assert margins[i] >= 1.0 - tol
            elif alphas[i] < C - 1e-9:
                assert abs(margins[i] - 1.0) <= tol
            else:
                assert margins[i] <= 1.0 + tol

    def test_perturbation_below_margin_keeps_decision(self):
        X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
        y = np.array([0, 0, 1, 1])
        model = train_svm(X, y, C=1.0, gamma=1.0)
        point = np.array([0.05, 0.0])
        assert predict(model, point) == predict(model, point + 1e-12)


class TestMlp:
    def test_separable_toy_set_reaches_full_accuracy(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(0, 0.3, (10, 2)), rng.normal(4, 0.3, (10, 2))])
        y = np.array([0] * 10 + [1] * 10)
        model = train_mlp(X, y, hidden_layers=1, activation="relu", optimizer="adam", lr=1e-2, seed=0)
        assert np.mean(predict_batch(model, X) == y) == 1.0

    def test_layer_count_bounds(self):
        with pytest.raises(BaselineError, match=r"\[1, 10\]"):
            train_mlp(XOR_X, XOR_Y, hidden_layers=0)
        with pytest.raises(BaselineError, match=r"\[1, 10\]"):
            train_mlp(XOR_X, XOR_Y, hidden_layers=11)

    def test_identity_activation_is_linear_on_xor(self):
        """Oracle: enumerate linear separators over dense angle/offset
        grids; no linear rule exceeds 3/4 on the XOR pattern."""
        best = 0.0
        for theta in np.linspace(0, 2 * np.pi, 721):
            w = np.array([np.cos(theta), np.sin(theta)])
            projections = XOR_X @ w
            for b in np.unique(np.concatenate([projections - 1e-6, projections + 1e-6])):
                acc = np.mean((projections > b).astype(int) == XOR_Y)
                best = max(best, acc)
        assert best == pytest.approx(0.75)

        model = train_mlp(
            XOR_X, XOR_Y, hidden_layers=2, activation="identity", optimizer="adam", lr=1e-2, seed=0
        )
        accuracy = np.mean(predict_batch(model, XOR_X) == XOR_Y)
        assert accuracy <= 0.75

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(30, 4))
        y = rng.integers(0, 3, size=30)
        a = train_mlp(X, y, hidden_layers=2, activation="tanh", optimizer="sgd", lr=1e-2, seed=5)
        b = train_mlp(X, y, hidden_layers=2, activation="tanh", optimizer="sgd", lr=1e-2, seed=5)
        for wa, wb in zip(a.payload.weights, b.payload.weights):
            assert np.array_equal(wa, wb)


class TestGbdt:
    def test_axis_aligned_separable(self):
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        y = np.array([0, 0, 1, 1])
        model = train_gbdt(X, y, max_depth=3)
        assert np.array_equal(predict_batch(model, X), y)

    def test_depth_bounds(self):
        X, y = np.zeros((4, 2)), np.array([0, 1, 0, 1])
        with pytest.raises(BaselineError, match=r"\[3, 5\]"):
            train_gbdt(X, y, max_depth=6)
        with pytest.raises(BaselineError, match=r"\[3, 5\]"):
            train_gbdt(X, y, max_depth=2)

    def test_first_root_split_matches_exhaustive_oracle(self):
        """The scan-based split finder agrees with brute-force threshold
        enumeration recomputing gains from scratch."""
        rng = np.random.default_rng(7)
        x = np.sort(rng.normal(size=25))
        grad = rng.normal(size=25)
        hess = rng.uniform(0.1, 1.0, size=25)

        got = best_split_exact(x, grad, hess)
        lam = 1.0
        best_gain, best_thr = -np.inf, None
        parent = grad.sum() ** 2 / (hess.sum() + lam)
        for i in range(24):
            if x[i] == x[i + 1]:
                continue
            thr = 0.5 * (x[i] + x[i + 1])
            left = x <= thr
            gl, hl = grad[left].sum(), hess[left].sum()
            gr, hr = grad[~left].sum(), hess[~left].sum()
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
            if gain > best_gain:
                best_gain, best_thr = gain, thr
        assert got is not None
        assert got[1] == pytest.approx(best_thr)
        assert got[0] == pytest.approx(best_gain)

    def test_single_feature_monotone_first_tree_threshold(self):
        """First boosting round's root threshold equals the brute-force
        optimal split of the initial softmax gradients."""
        x = np.arange(10, dtype=float)
        y = np.array([0] * 5 + [1] * 5)
        booster = fit_gbdt(x[:, None], y, num_classes=2, max_depth=3, n_rounds=1)
        root = booster.trees[0][0]
        # uniform initial scores -> grad = p - onehot with p = 0.5
        grad = np.where(y == 0, -0.5, 0.5)
        hess = np.full(10, 0.25)
        want = best_split_exact(x, grad, hess)
        assert root.feature == 0
        assert root.threshold == pytest.approx(want[1])
        assert root.threshold == pytest.approx(4.5)

    def test_training_loss_non_increasing(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(60, 5))
        y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int) + (X[:, 2] > 1).astype(int)
        booster = fit_gbdt(X, y, num_classes=3, max_depth=3, n_rounds=30)
        losses = np.array(booster.train_losses)
        assert np.all(np.diff(losses) <= 1e-12)

    def test_early_stopping_on_validation(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(40, 3))
        y = rng.integers(0, 2, size=40)  # noise: must overfit quickly
        Xv = rng.normal(size=(20, 3))
        yv = rng.integers(0, 2, size=20)
        model = train_gbdt(X, y, max_depth=3, eval_set=(Xv, yv))
        assert len(model.payload.trees) < 100


class TestGridSearch:
    def _toy_data(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(0, 0.5, (20, 2)), rng.normal(3, 0.5, (20, 2))])
        y = np.array([0] * 20 + [1] * 20)
        Xv = np.vstack([rng.normal(0, 0.5, (10, 2)), rng.normal(3, 0.5, (10, 2))])
        yv = np.array([0] * 10 + [1] * 10)
        return (X, y), (Xv, yv)

    def test_selection_equals_exhaustive_enumeration(self):
        train_data, valid_data = self._toy_data()
        grid = GridSpec("svm", {"C": (0.01, 1.0, 100.0), "gamma": (0.1, 1.0)})
        outcome = grid_search("svm", grid, train_data, valid_data, metric="accuracy")

        from sevkit.evaluation import confusion, macro_metrics

        best_score, best_config = -1.0, None
        for config in grid.configurations():
            model = train_family("svm", *train_data, config)
            report = macro_metrics(confusion(valid_data[1], predict_batch(model, valid_data[0])))
            if report.accuracy > best_score:
                best_score, best_config = report.accuracy, config
        assert outcome.best_config == best_config
        assert outcome.best_metric == pytest.approx(best_score)

    def test_single_config_grid_is_identity(self):
        train_data, valid_data = self._toy_data()
        grid = GridSpec("gbdt", {"max_depth": (4,)})
        outcome = grid_search("gbdt", grid, train_data, valid_data)
        assert outcome.best_config == {"max_depth": 4}

    def test_default_svm_grid_is_9x9_decades(self):
        grid = default_grid("svm")
        configs = list(grid.configurations())
        assert len(configs) == 81
        cs = sorted({c["C"] for c in configs})
        assert cs[0] == 1e-4 and cs[-1] == 1e4
        assert len(cs) == 9

    def test_failing_configs_recorded_and_skipped(self):
        train_data, valid_data = self._toy_data()
        grid = GridSpec("gbdt", {"max_depth": (3, 9)})  # 9 is out of range
        outcome = grid_search("gbdt", grid, train_data, valid_data)
        failures = [r for r in outcome.table if r.error]
        assert len(failures) == 1
        assert outcome.best_config == {"max_depth": 3}

    def test_all_failing_errors(self):
        train_data, valid_data = self._toy_data()
        grid = GridSpec("gbdt", {"max_depth": (9, 10)})
        with pytest.raises(BaselineError, match="every grid configuration failed"):
            grid_search("gbdt", grid, train_data, valid_data)

    def test_tie_break_lexicographic(self):
        """Two configs that both reach 100% validation accuracy: the
        first in lexicographic order wins."""
        train_data, valid_data = self._toy_data()
        grid = GridSpec("svm", {"C": (1.0, 10.0), "gamma": (1.0,)})
        outcome = grid_search("svm", grid, train_data, valid_data, metric="accuracy")
        scores = [r.metrics["accuracy"] for r in outcome.table]
        assert scores[0] == scores[1]
        assert outcome.best_config == {"C": 1.0, "gamma": 1.0}


def test_predict_determinism_and_dim_check():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    y = np.array([0, 0, 1, 1])
    model = train_svm(X, y, C=1.0, gamma=1.0)
    assert predict(model, X[0]) == predict(model, X[0])
    with pytest.raises(BaselineError, match="features"):
        predict(model, np.zeros(3))


def test_classifier_round_trip(tmp_path):
    X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    y = np.array([0, 0, 1, 1])
    model = train_svm(X, y, C=1.0, gamma=1.0)
    scaler = fit_scaler([fv(row) for row in X])
    path = tmp_path / "clf.pkl"
    save_classifier(path, model, scaler)
    loaded, loaded_scaler = load_classifier(path)
    assert loaded.family == "svm"
    assert np.array_equal(predict_batch(loaded, X), predict_batch(model, X))
    assert np.array_equal(loaded_scaler.mean, scaler.mean)
