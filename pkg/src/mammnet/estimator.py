"""scikit-learn style wrapper around training and prediction."""

from __future__ import annotations

import dataclasses

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig
from .evaluation import evaluate
from .trainer import predict, train
from .validation import check_cases, check_pairs


class MammNetDetector(BaseEstimator):
    """Dual-view lesion detector with ``fit`` / ``predict`` / ``score``.

    ``X`` is a sequence of :class:`~mammnet.types.ImagePair` with the
    matching :class:`~mammnet.types.CaseAnnotation` list as ``y``, or a
    sequence of ``(pair, annotation)`` tuples with ``y=None``.

    >>> det = MammNetDetector(train_config=TrainConfig(max_steps=2))
    >>> det.get_params()["ablation"]
    'full'
    """

    def __init__(self, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
                 ablation: str = "full", score_floor: float = 0.05, pair_threshold: float = 0.5):
        self.model_config = model_config
        self.train_config = train_config
        self.ablation = ablation
        self.score_floor = score_floor
        self.pair_threshold = pair_threshold

    def fit(self, X, y=None):
        cases = check_cases(X, y)
        model_cfg = self.model_config or ModelConfig(image_size=cases[0][0].shape[0])
        train_cfg = self.train_config or TrainConfig()
        train_cfg = dataclasses.replace(train_cfg, score_floor=self.score_floor,
                                        pair_threshold=self.pair_threshold)
        result = train(model_cfg, train_cfg, cases, ablation=self.ablation)
        self.model_ = result.model
        self.n_steps_ = result.step
        self.loss_curve_ = result.losses
        return self

    def predict(self, X):
        """Per-case :class:`~mammnet.predictions.CasePrediction` list."""
        check_is_fitted(self, "model_")
        return predict(self.model_, check_pairs(X), score_floor=self.score_floor,
                       pair_threshold=self.pair_threshold)

    def score(self, X, y=None, fpi: float = 0.5):
        """Recall at ``fpi`` false positives per image."""
        cases = check_cases(X, y)
        report = evaluate(self.predict([p for p, _ in cases]), cases, fpis=(fpi,))
        return report.recall_at(fpi)
