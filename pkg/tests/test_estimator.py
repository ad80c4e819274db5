import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import train_test_split

from polyneuron import PolyNeuronClassifier
from polyneuron.estimator import check_images


def test_params_and_clone():
    clf = PolyNeuronClassifier(activation="apl", epochs=2, random_state=4)
    params = clf.get_params()
    assert params["activation"] == "apl" and params["epochs"] == 2
    assert clone(clf).get_params() == params
    clf.set_params(lr=5e-3)
    assert clf.lr == 5e-3


def test_check_images_accepts_layouts():
    flat = np.zeros((2, 784))
    assert check_images(flat).shape == (2, 28, 28, 1)
    assert check_images(np.zeros((2, 28, 28))).dtype == np.uint8
    assert check_images(np.zeros((2, 32, 32, 3), np.uint8), "resnet20").shape == (2, 32, 32, 3)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 27, 28)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 784), 300.0))


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        PolyNeuronClassifier().predict(np.zeros((1, 784)))


def test_fit_predict_on_digits(digits):
    images, labels = digits
    names = np.array(list("abcdefghij"))[labels]  # string targets exercise the label encoder
    Xtr, Xte, ytr, yte = train_test_split(images, names, train_size=800, random_state=0, stratify=names)
    clf = PolyNeuronClassifier(epochs=3, batch_size=32, random_state=0).fit(Xtr, ytr)
    assert list(clf.classes_) == list("abcdefghij")
    proba = clf.predict_proba(Xte[:50])
    assert proba.shape == (50, 10) and np.allclose(proba.sum(axis=1), 1)
    assert clf.score(Xte, yte) > 0.7
    assert len(clf.history_) == 3 and clf.history_[-1]["model_loss"] < clf.history_[0]["model_loss"]
    assert all(h["reg_loss"] >= 0 for h in clf.history_)
