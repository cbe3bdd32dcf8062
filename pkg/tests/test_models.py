import numpy as np
import pytest

from llptraffic import models, neuralnet as nn
from llptraffic.models import KnnStore, VariantUsageError, knn_fit, knn_predict
from conftest import finite_diff_check


def build(variant="todense", w=5, bins=4, channels=2, hidden=4, seed=0, **kw):
    return models.build_model(
        variant, w, bins, channels, hidden, np.random.default_rng(seed), **kw
    )


class TestForward:
    def test_variant_usage_errors(self, rng):
        local = build("local")
        todense = build("todense")
        x = rng.normal(size=(1, 5, 2))
        hist = rng.uniform(size=(1, 4, 2))
        with pytest.raises(VariantUsageError):
            models.forward(local, x, hist)
        with pytest.raises(VariantUsageError):
            models.forward(todense, x, None)

    def test_deterministic(self, rng):
        m = build()
        x = rng.normal(size=(3, 5, 2))
        hist = rng.uniform(size=(3, 4, 2))
        a, _ = models.forward(m, x, hist)
        b, _ = models.forward(m, x, hist)
        assert np.array_equal(a, b)

    def test_reduction_todense_to_local(self, rng):
        # zeroed histogram weights: todense output == local output, bitwise
        for seed in range(10):
            r = np.random.default_rng(seed)
            todense = build("todense", seed=seed)
            todense.params["dense/weight"][:, 5:] = 0.0
            local = build("local", seed=seed)
            local.params = {k: v.copy() for k, v in todense.params.items()}
            x = r.normal(size=(2, 5, 2))
            hist = r.uniform(size=(2, 4, 2))
            a, _ = models.forward(todense, x, hist)
            b, _ = models.forward(local, x, None)
            assert np.array_equal(a, b)

    def test_fresh_local_linear_passes_relu_outputs_through(self, rng):
        # at init the local linear layer is the identity, so the dense
        # time-feature input equals relu(lstm projections) exactly
        m = build("local")
        x = rng.normal(size=(2, 5, 2))
        _, cache = models.forward(m, x, None)
        assert np.array_equal(
            cache["dense_inputs"][:, :5, :], nn.relu(cache["proj"])
        )

    def test_shared_lstm_flag(self, rng):
        m = build("local", share_lstm=True)
        assert "lstm1/w_i" not in m.params
        x = rng.normal(size=(2, 5, 2))
        preds, cache = models.forward(m, x, None)
        grads = models.backward(m, cache, np.ones_like(preds))
        assert "lstm0/w_i" in grads

    @pytest.mark.parametrize("seed", range(20))
    def test_composite_gradients(self, seed):
        r = np.random.default_rng(seed)
        m = build("todense", seed=seed)
        x = r.normal(size=(2, 5, 2))
        hist = r.uniform(size=(2, 4, 2))
        target = r.normal(size=(2, 2))

        def loss(params):
            m.params = params
            preds, _ = models.forward(m, x, hist)
            return nn.mse_loss(preds, target)[0]

        preds, cache = models.forward(m, x, hist)
        _, d_preds = nn.mse_loss(preds, target)
        grads = models.backward(m, cache, d_preds)
        full = {k: grads.get(k, np.zeros_like(v)) for k, v in m.params.items()}
        finite_diff_check(loss, dict(m.params), full)


class TestTrain:
    def windows_from_series(self, series, w):
        return [
            (t, series[t : t + w][:, None], series[t + w : t + w + 1])
            for t in range(len(series) - w)
        ]

    def test_local_hist_gradient_exactly_zero(self, rng):
        m = build("local")
        x = rng.normal(size=(4, 5, 2))
        preds, cache = models.forward(m, x, None)
        grads = models.backward(m, cache, np.ones_like(preds))
        assert np.all(grads["dense/weight"][:, 5:] == 0.0)

    def test_learns_constant_series(self):
        rng = np.random.default_rng(0)
        m = models.build_model("local", 5, 4, 1, 8, rng)
        series = np.full(40, 55.0)
        series += np.sin(np.arange(40)) * 1e-6  # not exactly constant
        wins = self.windows_from_series(series, 5)
        loss = None
        for _ in range(50):
            loss = models.train_epoch(m, wins, None, 8, rng)
        assert loss < 1e-3

    def test_empty_windows_rejected(self, rng):
        m = build("local", channels=1)
        with pytest.raises(ValueError):
            models.train_epoch(m, [], None, 4, np.random.default_rng(0))

    def test_sinusoid_overfit(self):
        rng = np.random.default_rng(1)
        m = models.build_model("local", 12, 4, 1, 8, rng)
        t = np.arange(400)
        series = 60 + 10 * np.sin(2 * np.pi * t / 50)
        wins = self.windows_from_series(series, 12)
        for _ in range(200):
            loss = models.train_epoch(m, wins, None, 32, rng)
        assert loss < 0.05


class TestPredict:
    def test_constant_window_finite(self, rng):
        m = build("local", channels=1)
        window = np.full((5, 1), 42.0)
        out = models.predict(m, window, None)
        assert np.all(np.isfinite(out))

    def test_denormalization_identity_model(self):
        # a model that emits the last normalized input value inverts exactly
        rng = np.random.default_rng(2)
        m = build("local", channels=1, w=5, bins=3)
        m.params["dense/weight"] = np.zeros_like(m.params["dense/weight"])
        for k in list(m.params):
            if k.startswith("lstm"):
                m.params[k] = np.zeros_like(m.params[k])
        window = rng.normal(60, 5, size=(5, 1))
        normed, mean, std = nn.instance_norm(window, axis=0)
        m.params["dense/bias"] = np.array([normed[-1, 0]])
        out = models.predict(m, window, None)
        assert abs(out[0] - window[-1, 0]) < 1e-9

    def test_periodic_series_prediction(self):
        rng = np.random.default_rng(3)
        m = models.build_model("local", 12, 4, 1, 8, rng)
        t = np.arange(600)
        series = 60 + 10 * np.sin(2 * np.pi * t / 48)
        wins = [
            (i, series[i : i + 12][:, None], series[i + 12 : i + 13])
            for i in range(500)
        ]
        for _ in range(150):
            models.train_epoch(m, wins, None, 32, rng)
        t0 = 520
        pred = models.predict(m, series[t0 : t0 + 12][:, None], None)
        truth = series[t0 + 12]
        assert abs(pred[0] - truth) / abs(truth) < 0.05


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        m = build("todense")
        path = tmp_path / "model.json"
        models.save_checkpoint(m, path)
        loaded = models.load_checkpoint(path)
        assert loaded.variant == m.variant
        x = rng.normal(size=(2, 5, 2))
        hist = rng.uniform(size=(2, 4, 2))
        a, _ = models.forward(m, x, hist)
        b, _ = models.forward(loaded, x, hist)
        assert np.array_equal(a, b)

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError, match="format"):
            models.load_checkpoint(path)


class TestKnn:
    def test_fit_minimal(self):
        values = np.arange(2 * 1 * 13, dtype=float).reshape(2, 1, 13)
        store = knn_fit(KnnStore(window=12), values, [(0, 13)])
        assert len(store) == 1

    def test_store_size(self):
        values = np.zeros((3, 2, 60))
        store = knn_fit(KnnStore(window=12), values, [(0, 60)])
        assert len(store) == 48

    def test_refit_idempotent(self):
        values = np.random.default_rng(0).normal(size=(2, 1, 30))
        store = KnnStore(window=12)
        knn_fit(store, values, [(0, 30)])
        first = len(store)
        knn_fit(store, values, [(0, 30)])
        assert len(store) == first

    def test_too_short(self):
        with pytest.raises(ValueError, match="too short"):
            knn_fit(KnnStore(window=12), np.zeros((2, 1, 12)), [(0, 12)])

    def test_exact_match_returns_stored_label(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=(2, 1, 30))
        store = knn_fit(KnnStore(window=12), values, [(0, 30)])
        query = values[:, :, 3:15]
        assert np.array_equal(knn_predict(store, query), values[:, :, 15])

    def test_empty_store(self):
        with pytest.raises(ValueError, match="empty"):
            knn_predict(KnnStore(window=12), np.zeros((2, 1, 12)))

    def test_tie_lowest_index_wins(self):
        # two identical stored windows with different labels
        store = KnnStore(window=2)
        store.windows = [np.zeros(4), np.zeros(4)]
        store.labels = [np.array([[1.0]]), np.array([[2.0]])]
        assert knn_predict(store, np.zeros(4))[0, 0] == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n_nodes = int(rng.integers(1, 6))
            n_channels = int(rng.integers(1, 3))
            T = int(rng.integers(14, 61))
            values = np.round(rng.normal(size=(n_nodes, n_channels, T)), 1)
            store = knn_fit(KnnStore(window=12), values, [(0, T)])
            query = np.round(rng.normal(size=(n_nodes, n_channels, 12)), 1)
            got = knn_predict(store, query)
            # independent exhaustive scan
            best, best_d = None, None
            q = query.reshape(-1)
            for i, win in enumerate(store.windows):
                d = float(np.sum((win - q) ** 2))
                if best_d is None or d < best_d:
                    best, best_d = i, d
            assert np.array_equal(got, store.labels[best])
