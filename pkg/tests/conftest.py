import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from pdknn import pipeline as pl
from pdknn.experiment import GAUSSIAN_CONFIG, sample_sets, stream_seeds
from pdknn.toynet import MlpModel, train


class Toy:
    """Trained Gaussian network, its reference and a few small point sets."""

    def __init__(self, seed=0):
        self.sets = sample_sets(seed)
        seeds = stream_seeds(seed)
        X, y = self.sets["train"]
        self.net, self.train_accuracy = train(MlpModel.initialize([2, 2, 3], seed=seeds["net"]), X, y,
                                              seed=seeds["net"])
        Xr, yr = self.sets["reference"]
        self.reference = pl.Reference(self.net.forward_with_trace(Xr), yr, n_classes=3)
        self.cfg = GAUSSIAN_CONFIG

    def acts(self, X):
        return self.net.forward_with_trace(np.asarray(X, dtype=float))

    def subset(self, name, n, seed=0):
        X, y = self.sets[name]
        idx = np.sort(np.random.default_rng(seed).choice(len(X), size=n, replace=False))
        return X[idx], y[idx]


@pytest.fixture(scope="session")
def toy():
    return Toy(0)


@pytest.fixture(scope="session")
def toy_gammas(toy):
    Xc, _ = toy.subset("calibration", 600)
    ev = pl.collect_evidence(toy.reference, toy.acts(Xc), toy.cfg)
    return pl.calibrate_gammas(toy.reference, ev, toy.cfg)
