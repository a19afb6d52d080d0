"""Small model bundles and rasters for mosaic and acceptance tests."""
import numpy as np

from mhsm.gridio import Raster
from mhsm.moe import GateNetwork
from mhsm.mvgnet import BetaCalibrator, MvgNet
from mhsm.mosaic import ZoneModelBundle
from mhsm.trees import GbtHyperparams, GbtModel, Tree, gbt_train


def _leaf(value):
    return Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.ones(1), np.array([value]))


def constant_bundle(zone, features, margin_f=0.4, margin_l=-0.7, mu=(0.2, -0.3)) -> ZoneModelBundle:
    """Every model returns the same value for every input."""
    net = MvgNet(len(features), (4, 3), rng=np.random.default_rng(0))
    for layer in net.layers:
        for k, v in layer.params.items():
            if k == "W":
                v[:] = 0.0
    net.head.params["b"][:] = [mu[0], mu[1], 0.1, -0.4, 0.2]
    lf = {"flood": GbtModel([_leaf(0.0)], margin_f, 1.0, list(features)),
          "landslide": GbtModel([_leaf(0.0)], margin_l, 1.0, list(features))}
    p = len(features)
    return ZoneModelBundle(zone, list(features), np.zeros(p), np.ones(p), lf, net,
                           BetaCalibrator(), BetaCalibrator(), GateNetwork(zero=True))


def random_bundle(zone, features, seed=0) -> ZoneModelBundle:
    """A bundle with small fitted trees and random (untrained) networks."""
    rng = np.random.default_rng(seed)
    p = len(features)
    X = rng.normal(size=(200, p))
    lf = {}
    for h, hazard in enumerate(("flood", "landslide")):
        y = (X[:, h % p] + 0.5 * rng.normal(size=200) > 0).astype(float)
        lf[hazard] = gbt_train(X, y, GbtHyperparams(n_trees=5, max_depth=2), seed=seed, feature_names=features)
    net = MvgNet(p, (6, 4), rng=np.random.default_rng(seed + 1))
    gate = GateNetwork(rng=np.random.default_rng(seed + 2))
    return ZoneModelBundle(zone, list(features), np.zeros(p), np.ones(p), lf, net,
                           BetaCalibrator(1.2, 0.8, 0.1), BetaCalibrator(0.9, 1.1, -0.1), gate)


def factor_rasters(shape, names, cellsize=100.0, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    return {n: Raster(rng.normal(size=shape), 0.0, 0.0, cellsize) for n in names}
