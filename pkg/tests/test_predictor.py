import threading

import numpy as np
import pytest
from scipy.special import expit

from causal_fuzz.data import build_dataset
from causal_fuzz.errors import BudgetExhausted, ConfigError, DataError, SchemaMismatch
from causal_fuzz.predictor import (
    Hyper,
    LinearPredictor,
    QueryMeter,
    load_model,
    parse_model,
    save_model,
    train_builtin,
)


def logistic_data(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (rng.random(n) < expit(0.3 + 1.5 * x[:, 0] - 1.0 * x[:, 1])).astype(float)
    return build_dataset(["a", "b", "y"], {"a": "continuous", "b": "continuous", "y": "binary"}, np.column_stack([x, y]))


def test_manual_predictor_scores():
    predictor = LinearPredictor.manual(["a", "b"], [2.0, -1.0], intercept=0.5)
    rows = np.array([[1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_allclose(predictor.predict(rows, kind="raw"), [1.5, 0.5])
    np.testing.assert_allclose(predictor.predict(rows), expit([1.5, 0.5]))


def test_predict_aligns_named_columns():
    predictor = LinearPredictor.manual(["a", "b"], [2.0, -1.0])
    out = predictor.predict(np.array([[10.0, 1.0, 0.0]]), kind="raw", columns=["b", "extra", "a"])
    assert out.tolist() == [-10.0]
    with pytest.raises(SchemaMismatch, match="lack schema columns"):
        predictor.predict(np.array([[1.0]]), columns=["a"])
    with pytest.raises(SchemaMismatch):
        predictor.predict(np.ones((2, 3)))


def test_predict_edge_cases():
    predictor = LinearPredictor.manual(["a"], [1.0])
    assert predictor.predict(np.empty((0, 1))).shape == (0,)
    assert predictor.predict(np.array([3.0]), kind="raw").tolist() == [3.0]
    with pytest.raises(ConfigError, match="unknown score kind"):
        predictor.predict(np.ones((1, 1)), kind="logit")


def test_meter_charges_per_row():
    predictor = LinearPredictor.manual(["a"], [1.0])
    meter = QueryMeter(5)
    predictor.predict(np.ones((3, 1)), meter=meter)
    assert meter.used == 3
    assert meter.remaining == 2
    with pytest.raises(BudgetExhausted) as info:
        predictor.predict(np.ones((3, 1)), meter=meter)
    assert info.value.requested == 3
    assert info.value.remaining == 2
    assert meter.used == 3
    predictor.predict(np.ones((2, 1)), meter=meter)
    assert meter.remaining == 0


def test_meter_refunds_failed_calls():
    meter = QueryMeter(10)
    with pytest.raises(RuntimeError):
        with meter.reserve(4):
            raise RuntimeError("transport down")
    assert meter.used == 0
    assert meter.remaining == 10


def test_meter_never_overruns_under_threads():
    meter = QueryMeter(100)
    predictor = LinearPredictor.manual(["a"], [1.0])
    refused = []

    def worker():
        for _ in range(20):
            try:
                predictor.predict(np.ones((3, 1)), meter=meter)
            except BudgetExhausted:
                refused.append(1)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert meter.used == 99
    assert len(refused) == 8 * 20 - 33


def test_train_builtin_recovers_direction():
    predictor = train_builtin(logistic_data(), "y", ["a", "b"], seed=1)
    weights = predictor.model.weights
    assert weights[0] == pytest.approx(1.5, abs=0.25)
    assert weights[1] == pytest.approx(-1.0, abs=0.25)
    assert predictor.backing == "builtin"
    assert predictor.model_id.startswith("builtin:")


def test_train_is_deterministic():
    data = logistic_data()
    a = train_builtin(data, "y", ["a", "b"], seed=3, hyper=Hyper(iterations=50))
    b = train_builtin(data, "y", ["a", "b"], seed=3, hyper=Hyper(iterations=50))
    assert a.model == b.model
    assert a.model_id == b.model_id


@pytest.mark.parametrize(
    "outcome,features,rows,message",
    [
        ("a", ["b"], 100, "binary"),
        ("y", ["a", "y"], 100, "among the features"),
        ("y", ["a"], 10, "at least 20 rows"),
    ],
)
def test_train_rejects(outcome, features, rows, message):
    data = logistic_data().take(range(rows))
    with pytest.raises(DataError, match=message):
        train_builtin(data, outcome, features)


def test_train_rejects_single_class():
    data = build_dataset(["a", "y"], {"a": "continuous", "y": "binary"}, np.column_stack([np.arange(30.0), np.ones(30)]))
    with pytest.raises(DataError, match="single class"):
        train_builtin(data, "y", ["a"])


def test_model_file_round_trip(tmp_path):
    predictor = train_builtin(logistic_data(), "y", ["a", "b"], hyper=Hyper(iterations=100))
    path = tmp_path / "model.json"
    save_model(predictor, path)
    assert '"schema"' in path.read_text()
    loaded = load_model(path)
    assert loaded.model_id == predictor.model_id
    rows = logistic_data(10, seed=5).matrix(["a", "b"])
    np.testing.assert_array_equal(loaded.predict(rows), predictor.predict(rows))


def test_parse_model_errors():
    with pytest.raises(ConfigError):
        parse_model('{"schema": ["a"], "weights": [1, 2]}')
    with pytest.raises(ConfigError):
        parse_model("not json")
