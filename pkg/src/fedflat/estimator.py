"""scikit-learn estimator facade over the federated trainer.

`FederatedClassifier` partitions (X, y) across simulated devices, runs the
configured federated algorithm, and exposes the resulting global model
through the usual fit/predict/predict_proba/score surface, so the simulator
composes with pipelines, grid search and cross-validation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, dirichlet_partition, pathological_partition
from .federated import AlgoConfig, run_training
from .models import ModelSpec, predict_proba

__all__ = ["FederatedClassifier"]


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained by simulated federated optimization.

    Parameters mirror the trainer's hyperparameters; `fit` splits the training
    data across ``n_devices`` simulated devices using the chosen partition
    scheme and runs ``rounds`` communication rounds.
    """

    def __init__(
        self,
        algorithm: str = "fedvssam",
        model: str = "logistic-regression",
        hidden_dim: int = 16,
        l2_coeff: float = 0.0,
        n_devices: int = 10,
        devices_per_round: int = 5,
        rounds: int = 50,
        local_steps: int = 10,
        rho: float = 0.05,
        local_lr: float = 0.05,
        global_lr: float = 1.0,
        gamma_l: float = 0.4,
        gamma_g: float = 0.6,
        batch_size: int = 32,
        partition: str = "dirichlet",
        alpha: float = 0.3,
        classes_per_device: int = 2,
        seed: int = 0,
    ):
        self.algorithm = algorithm
        self.model = model
        self.hidden_dim = hidden_dim
        self.l2_coeff = l2_coeff
        self.n_devices = n_devices
        self.devices_per_round = devices_per_round
        self.rounds = rounds
        self.local_steps = local_steps
        self.rho = rho
        self.local_lr = local_lr
        self.global_lr = global_lr
        self.gamma_l = gamma_l
        self.gamma_g = gamma_g
        self.batch_size = batch_size
        self.partition = partition
        self.alpha = alpha
        self.classes_per_device = classes_per_device
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        if self.model not in ("logistic-regression", "mlp2"):
            raise ValueError(f"model must be a classifier kind, got {self.model!r}")

        dataset = Dataset(X, encoded, int(self.classes_.shape[0]))
        if self.partition == "dirichlet":
            part = dirichlet_partition(dataset, self.alpha, self.n_devices, self.seed)
        elif self.partition == "pathological":
            part = pathological_partition(dataset, self.classes_per_device, self.n_devices, self.seed)
        else:
            raise ValueError(f"unknown partition scheme {self.partition!r}")

        self.spec_ = ModelSpec(
            kind=self.model,
            input_dim=X.shape[1],
            num_classes=int(self.classes_.shape[0]),
            hidden_dim=self.hidden_dim,
            l2_coeff=self.l2_coeff,
        )
        config = AlgoConfig(
            algorithm=self.algorithm,
            rounds=self.rounds,
            local_steps=self.local_steps,
            n_devices=self.n_devices,
            devices_per_round=self.devices_per_round,
            rho=self.rho,
            local_lr=self.local_lr,
            global_lr=self.global_lr,
            gamma_l=self.gamma_l,
            gamma_g=self.gamma_g,
            batch_size=self.batch_size,
            master_seed=self.seed,
        )
        state, transcripts = run_training(self.spec_, dataset, part, config)
        self.theta_ = state.theta
        self.server_state_ = state
        self.history_ = transcripts
        self.n_iter_ = state.round
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but the model was fitted with {self.n_features_in_}"
            )
        return predict_proba(self.spec_, self.theta_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
