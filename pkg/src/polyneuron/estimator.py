"""scikit-learn compatible image classifier over the benchmark networks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from polyneuron.activations import ActivationSpec, RegularizerConfig
from polyneuron.data import AugmentConfig, Dataset, batches, channel_stats, normalize
from polyneuron.models import ARCHITECTURES, ModelSpec, build
from polyneuron.train import Trainer


def check_images(X, architecture="lenet5"):
    """Validate pixel data and return uint8 images shaped ``(n, H, W, C)``.

    Accepts ``(n, H, W)``, ``(n, H, W, C)`` or flat ``(n, H*W*C)`` arrays with
    intensities in ``[0, 255]``.
    """
    c, h, w = ARCHITECTURES[architecture]
    X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True)
    n = X.shape[0]
    if X.ndim == 2 and X.shape[1] == h * w * c:
        X = X.reshape(n, h, w, c)
    elif X.ndim == 3 and c == 1 and X.shape[1:] == (h, w):
        X = X[..., None]
    if X.shape[1:] != (h, w, c):
        raise ValueError(f"{architecture} expects images of shape {(h, w, c)}, got {X.shape[1:]}")
    if X.dtype != np.uint8:
        X = np.asarray(X, dtype=np.float64)
        if X.min() < 0 or X.max() > 255:
            raise ValueError("pixel intensities must lie in [0, 255]")
        X = np.rint(X).astype(np.uint8)
    return X


class PolyNeuronClassifier(ClassifierMixin, BaseEstimator):
    """LeNet-5 or ResNet-20 with a learnable activation, trained with Adam.

    Parameters
    ----------
    architecture : {"lenet5", "resnet20"}, default="lenet5"
    activation : {"relu", "swish", "apl", "polyneuron", "polyneuron-r"}, default="polyneuron-r"
    sharing : {"channel", "layer"}, default="channel"
    n_control_points : int, default=3
    rbf_order : int, default=3
    lambda_prod, lambda_sum : float, default=0.0, 1e-2
        Strengths of the penalties on the relaxed spline side conditions.
    epochs : int, default=5
    lr : float, default=1e-3
    lr_drops : tuple of int, default=()
        Epochs after which the learning rate is divided by ten.
    batch_size : int, default=128
    weight_decay : float, default=1e-4
    augment : bool, default=False
        Pad-and-crop plus random flips during training.
    random_state : int, default=0

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : Module
    history_ : list of dict
        Per-epoch mean training loss split into model and penalty terms.
    """

    def __init__(
        self,
        architecture="lenet5",
        activation="polyneuron-r",
        sharing="channel",
        n_control_points=3,
        rbf_order=3,
        lambda_prod=0.0,
        lambda_sum=1e-2,
        epochs=5,
        lr=1e-3,
        lr_drops=(),
        batch_size=128,
        weight_decay=1e-4,
        augment=False,
        random_state=0,
    ):
        self.architecture = architecture
        self.activation = activation
        self.sharing = sharing
        self.n_control_points = n_control_points
        self.rbf_order = rbf_order
        self.lambda_prod = lambda_prod
        self.lambda_sum = lambda_sum
        self.epochs = epochs
        self.lr = lr
        self.lr_drops = lr_drops
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.augment = augment
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        check_classification_targets(y)
        images = check_images(X, self.architecture)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) > 10:
            raise ValueError(f"at most 10 classes are supported, got {len(self.classes_)}")
        labels = self._encoder.transform(y)

        spec = ModelSpec(
            self.architecture,
            ActivationSpec(self.activation, self.sharing, self.n_control_points, self.rbf_order),
        )
        self.model_ = build(spec, seed=self.random_state)
        trainer = Trainer(
            self.model_, self.lr, self.weight_decay, RegularizerConfig(self.lambda_prod, self.lambda_sum)
        )
        data = Dataset(images, labels.astype(np.int64), "train")
        mean, std = channel_stats(data)
        self.normalization_ = (mean, std)
        aug = AugmentConfig(pad=4 if self.augment else 0, flip=bool(self.augment), mean=mean, std=std)
        rng = np.random.default_rng(self.random_state + 1)
        self.history_ = []
        for epoch in range(self.epochs):
            trainer.optimizer.lr = self.lr / 10 ** sum(epoch >= d for d in self.lr_drops)
            sums, steps = np.zeros(2), 0
            for xb, yb in batches(data, self.batch_size, rng, aug, train=True):
                sums += trainer.train_step(xb, yb)
                steps += 1
            m, r = (sums / max(steps, 1)).tolist()
            self.history_.append({"epoch": epoch + 1, "model_loss": m, "reg_loss": r})
        self._trainer = trainer
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X, self.architecture)
        mean, std = self.normalization_
        return normalize(images, AugmentConfig(pad=0, flip=False, mean=mean, std=std))

    def decision_function(self, X):
        x = self._inputs(X)
        logits = self._trainer.logits(x)
        return logits[:, : len(self.classes_)]

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
