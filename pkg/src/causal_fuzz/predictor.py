"""Black-box scoring behind a uniform interface, with query metering."""
import abc
import hashlib
import logging
import threading
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError, root_validator, validator
from scipy.special import expit
from typing_extensions import Literal

from causal_fuzz.data import Dataset
from causal_fuzz.errors import BudgetExhausted, ConfigError, DataError, SchemaMismatch, read_text
from causal_fuzz.logistic import fit_logistic

logger = logging.getLogger(__name__)

ScoreKind = Literal["probability", "raw"]
SCORE_KINDS = ("probability", "raw")
MIN_TRAIN_ROWS = 20


class QueryMeter:
    """Synchronized query counter; `used` never exceeds `budget`.

    Calls reserve their batch size up front. A reservation that would overrun the
    budget fails before anything is charged, and a failed call is refunded.
    """

    def __init__(self, budget: int):
        if budget < 0:
            raise ConfigError("budget must be >= 0")
        self.budget = budget
        self._used = 0
        self._pending = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        with self._lock:
            return self.budget - self._used - self._pending

    @contextmanager
    def reserve(self, n: int) -> Iterator[None]:
        with self._lock:
            remaining = self.budget - self._used - self._pending
            if n > remaining:
                raise BudgetExhausted(n, remaining)
            self._pending += n
        try:
            yield
        except BaseException:
            with self._lock:
                self._pending -= n
            raise
        with self._lock:
            self._pending -= n
            self._used += n


class Predictor(abc.ABC):
    schema: List[str]
    backing: str

    @property
    @abc.abstractmethod
    def model_id(self) -> str:
        ...

    @abc.abstractmethod
    def _score(self, rows: np.ndarray, kind: str) -> np.ndarray:
        ...

    def align(self, rows: np.ndarray, columns: Optional[Sequence[str]] = None) -> np.ndarray:
        """Reorders `rows` (laid out as `columns`) into schema order."""
        rows = np.asarray(rows, dtype=float)
        if rows.size == 0:
            return np.empty((0, len(self.schema)))
        if rows.ndim == 1:
            rows = rows.reshape(1, -1)
        if columns is None:
            if rows.shape[1] != len(self.schema):
                raise SchemaMismatch(f"rows have {rows.shape[1]} columns, schema has {len(self.schema)}")
            return rows
        index = {name: j for j, name in enumerate(columns)}
        missing = [name for name in self.schema if name not in index]
        if missing:
            raise SchemaMismatch(f"rows lack schema columns {missing}")
        return rows[:, [index[name] for name in self.schema]]

    def predict(
        self,
        rows: np.ndarray,
        kind: str = "probability",
        meter: Optional[QueryMeter] = None,
        columns: Optional[Sequence[str]] = None,
    ) -> np.ndarray:
        """Scores a batch; `meter` is charged exactly len(rows) on success."""
        if kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score kind {kind!r}")
        rows = self.align(rows, columns)
        if rows.shape[0] == 0:
            return np.empty(0)
        if meter is None:
            return self._score(rows, kind)
        with meter.reserve(rows.shape[0]):
            return self._score(rows, kind)


class Hyper(BaseModel):
    # None picks a stable step from the data
    lr: Optional[float] = None
    iterations: int = 2000
    l2: float = 1e-4

    @validator("iterations")
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("iterations must be >= 1")
        return value


class LinearModel(BaseModel):
    """Persisted logistic-regression model."""

    schema_: List[str] = Field(alias="schema")
    weights: List[float]
    intercept: float = 0.0
    hyper: Optional[Hyper] = None
    seed: Optional[int] = None
    backing: Literal["builtin", "manual"] = "manual"

    class Config:
        allow_mutation = False
        allow_population_by_field_name = True
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _aligned(cls, values):
        if len(values["weights"]) != len(values["schema_"]):
            raise ValueError(f"{len(values['weights'])} weights for {len(values['schema_'])} schema columns")
        if len(set(values["schema_"])) != len(values["schema_"]):
            raise ValueError("duplicate schema column")
        return values

    def dump(self) -> str:
        return self.json(by_alias=True, indent=2)


class LinearPredictor(Predictor):
    """Logistic regression; the raw score is the pre-link linear predictor."""

    def __init__(self, model: LinearModel):
        self.model = model
        self.schema = list(model.schema_)
        self.backing = model.backing
        self._weights = np.asarray(model.weights, dtype=float)

    @classmethod
    def manual(cls, schema: Sequence[str], weights: Sequence[float], intercept: float = 0.0) -> "LinearPredictor":
        return cls(LinearModel(schema=list(schema), weights=list(weights), intercept=intercept, backing="manual"))

    @property
    def model_id(self) -> str:
        digest = hashlib.sha256(self.model.dump().encode()).hexdigest()
        return f"{self.backing}:{digest[:12]}"

    def _score(self, rows: np.ndarray, kind: str) -> np.ndarray:
        raw = self.model.intercept + rows @ self._weights
        return raw if kind == "raw" else expit(raw)


def train_builtin(
    data: Dataset,
    outcome: str,
    features: Sequence[str],
    hyper: Optional[Hyper] = None,
    seed: int = 0,
) -> LinearPredictor:
    hyper = hyper or Hyper()
    features = list(features)
    if outcome in features:
        raise DataError(f"outcome {outcome!r} listed among the features")
    if data.kinds.get(outcome) != "binary":
        raise DataError(f"outcome {outcome!r} must be a binary column")
    if data.n_rows < MIN_TRAIN_ROWS:
        raise DataError(f"need at least {MIN_TRAIN_ROWS} rows to train, got {data.n_rows}")
    y = data.column(outcome)
    if np.all(y == y[0]):
        raise DataError(f"outcome {outcome!r} has a single class")
    X = data.matrix(features)

    init = np.random.default_rng(seed).normal(0.0, 0.01, len(features) + 1)
    fit = fit_logistic(X, y, lr=hyper.lr, max_iter=hyper.iterations, l2=hyper.l2, tol=1e-8, init=init)
    logger.info(
        "trained builtin model on %d rows, %d features (converged=%s after %d iterations)",
        data.n_rows,
        len(features),
        fit.converged,
        fit.iterations,
    )
    model = LinearModel(
        schema=features,
        weights=fit.weights.tolist(),
        intercept=fit.intercept,
        hyper=hyper,
        seed=seed,
        backing="builtin",
    )
    return LinearPredictor(model)


def save_model(predictor: LinearPredictor, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(predictor.model.dump())
        f.write("\n")


def parse_model(text: str) -> LinearPredictor:
    try:
        return LinearPredictor(LinearModel.parse_raw(text))
    except ValidationError as e:
        raise ConfigError(f"invalid model file: {e.errors()[0]['msg']}") from e


def load_model(path) -> LinearPredictor:
    return parse_model(read_text(path, ConfigError))
