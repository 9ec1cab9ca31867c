"""Numerical substrate: linear classifiers and random forests."""
from __future__ import annotations

from cqa.learners.config import SolverConfig
from cqa.learners.forest import ForestModel, train_forest
from cqa.learners.linear import (
    LinearModel,
    count_nonzero,
    enet_kkt_residuals,
    logistic_objective,
    svm_objective,
    train_elastic_net_linear,
    train_linear_svm,
    train_logistic,
)


def predict(model, X):
    """Labels (argmax, ties to the lower class id) and scores for any learner."""
    return model.predict(X)


__all__ = [
    "SolverConfig", "LinearModel", "ForestModel", "train_linear_svm", "train_logistic",
    "train_elastic_net_linear", "train_forest", "predict", "svm_objective",
    "logistic_objective", "enet_kkt_residuals", "count_nonzero",
]
