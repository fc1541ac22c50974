"""scikit-learn style wrapper around training, prediction and binarization."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_architecture, check_binary, check_images
from .morphology import BinarySet
from .network import binarize_network, execute_binarized, threshold
from .training import TrainConfig, init_model, mean_dice, predict, train


class BiMoNN(TransformerMixin, BaseEstimator):
    """Binary morphological network learned from image pairs.

    Parameters
    ----------
    architecture : sequence of (in_channels, out_channels, kernel_side)
        Layer shapes; adjacent channel counts must agree.
    loss : {"bce", "dice", "mse"}
    learning_rate, batch_size, max_steps : training schedule.
    random_state : int
        Seeds the initialization and the batch order.
    early_stop_dice : float or None
        Stop once the batch DICE stayed at or above this value for ``patience`` steps.

    Attributes
    ----------
    model_ : BimonnModel
    report_ : TrainReport
    border_ : int
        Pixels on each side excluded from losses and scores.
    """

    def __init__(self, architecture=((1, 1, 7),), loss="bce", learning_rate=1e-2,
                 batch_size=32, max_steps=3000, random_state=0, early_stop_dice=None,
                 patience=100):
        self.architecture = architecture
        self.loss = loss
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.random_state = random_state
        self.early_stop_dice = early_stop_dice
        self.patience = patience

    def _config(self) -> TrainConfig:
        return TrainConfig(loss=self.loss, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, max_steps=self.max_steps,
                           seed=int(self.random_state), early_stop_dice=self.early_stop_dice,
                           patience=self.patience)

    def fit(self, X, y):
        arch = check_architecture(self.architecture)
        X = check_images(X, n_channels=arch[0][0])
        y = check_binary(y)
        if y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[2:]:
            raise ValueError(f"X {X.shape} and y {y.shape} do not pair up")
        config = self._config()
        model = init_model(arch, seed=config.seed)
        self.report_ = train(model, X, y, config)
        self.model_ = model
        self.border_ = model.border
        self.n_channels_in_ = arch[0][0]
        self.n_channels_out_ = arch[-1][1]
        self.certificate_ = None
        return self

    def transform(self, X):
        """Float network outputs, ``(M, K, H, W)``."""
        check_is_fitted(self, "model_")
        X = check_images(X, n_channels=self.n_channels_in_)
        return predict(self.model_, X)

    def predict(self, X):
        """Thresholded outputs (``> 1/2``) as booleans."""
        return threshold(self.transform(X))

    def binarize(self):
        """Certify the fitted network; the result is cached in ``certificate_``."""
        check_is_fitted(self, "model_")
        self.certificate_ = binarize_network(self.model_)
        return self.certificate_

    def predict_binarized(self, X):
        """Run the certified set-operation program on the bit-packed backend."""
        check_is_fitted(self, "model_")
        if self.certificate_ is None:
            self.binarize()
        X = check_images(X, n_channels=self.n_channels_in_) > 0.5
        out = []
        for sample in X:
            channels = execute_binarized(self.certificate_, [BinarySet.from_array(c) for c in sample])
            out.append(np.stack([c.to_array() for c in channels]))
        return np.stack(out)

    def score(self, X, y, binarized=False):
        """Mean per-image DICE on the border-excluded interior."""
        y = check_binary(y)
        pred = self.predict_binarized(X) if binarized else self.predict(X)
        return mean_dice(pred, y, self.border_)
