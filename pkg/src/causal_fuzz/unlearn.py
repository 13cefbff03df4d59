import logging
from typing import Optional

from causal_fuzz.data import Dataset
from causal_fuzz.errors import DataError
from causal_fuzz.predictor import Hyper, LinearPredictor, train_builtin

logger = logging.getLogger(__name__)


def unlearn_feature_removal(
    data: Dataset,
    target: str,
    outcome: str,
    hyper: Optional[Hyper] = None,
    seed: int = 0,
) -> LinearPredictor:
    """Retrains from scratch on every feature except `target`."""
    if target == outcome:
        raise DataError(f"target {target!r} is the outcome column")
    if target not in data.columns:
        raise DataError(f"target column {target!r} missing from dataset")
    features = [c for c in data.columns if c not in (target, outcome)]
    logger.info("unlearning %s: retraining on %s", target, features)
    return train_builtin(data, outcome, features, hyper=hyper, seed=seed)
