"""scikit-learn style wrappers around training and repository matching.

``KeypointDetectorDescriptor`` learns the network from depth pairs (``fit``)
and turns depth images into keypoints with descriptors (``transform``).
``RepositoryMatcher`` stores descriptors of reference views (``fit``),
retrieves nearest neighbours for query views (``predict``) and reports the
fraction of true matches (``score``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluation as ev
from . import train as tr
from ._validation import DomainError, check_scalar
from .depthsynth import DepthImage, RenderedPair


def _as_dataset(X, depth_range):
    if hasattr(X, "d_min") and hasattr(X, "pairs"):
        return X if depth_range is None else tr.InMemoryDataset(X.pairs(), *depth_range)
    pairs = list(X)
    if not pairs or not all(isinstance(p, RenderedPair) for p in pairs):
        raise DomainError("fit expects a dataset or a non-empty sequence of RenderedPair")
    if depth_range is None:
        vals = np.concatenate([v.data[v.valid] for p in pairs for v in (p.depth_a, p.depth_b)])
        if vals.size == 0:
            raise DomainError("training pairs contain no valid depth")
        depth_range = tuple(np.percentile(vals, [1.0, 99.0]))
    return tr.InMemoryDataset(pairs, *depth_range)


def _as_depth(v):
    if isinstance(v, DepthImage):
        return v
    if isinstance(v, tuple) and isinstance(v[0], DepthImage):
        return v[0]
    return DepthImage(np.asarray(v, dtype=np.float64))


class KeypointDetectorDescriptor(TransformerMixin, BaseEstimator):
    """Jointly trained keypoint detector and descriptor.

    Constructor arguments mirror the training configuration. ``depth_range``
    fixes the ``(d_min, d_max)`` normalization; by default it comes from the
    dataset or from the 1st/99th depth percentiles of the training pairs.
    """

    def __init__(self, iterations=2000, learning_rate=1e-3, momentum=0.9, t=16, tau_pos=0.025,
                 depth_lookup="nearest", lambda_c=1.0, lambda_s=1.0, margin=1.0, gamma=1.0,
                 descriptor_dim=128, box_size=32, pool_size=4, nms_radius=4.0, channels="16,32,64,64",
                 mode="top-score", depth_range=None, seed=0):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.t = t
        self.tau_pos = tau_pos
        self.depth_lookup = depth_lookup
        self.lambda_c = lambda_c
        self.lambda_s = lambda_s
        self.margin = margin
        self.gamma = gamma
        self.descriptor_dim = descriptor_dim
        self.box_size = box_size
        self.pool_size = pool_size
        self.nms_radius = nms_radius
        self.channels = channels
        self.mode = mode
        self.depth_range = depth_range
        self.seed = seed

    def _train_config(self) -> tr.TrainConfig:
        keys = set(tr.TrainConfig.keys()) - {"dataset", "checkpoint_interval"}
        return tr.TrainConfig(checkpoint_interval=0, **{k: v for k, v in self.get_params().items() if k in keys})

    def fit(self, X, y=None):
        """Train on pairs; ``y`` is ignored (labels come from pose and depth)."""
        check_scalar(self.iterations, "iterations", target_type=int, min_val=0)
        if self.mode not in ("top-score", "random"):
            raise DomainError(f"unknown mode {self.mode!r}")
        data = _as_dataset(X, self.depth_range)
        self.params_, self.log_ = tr.train(self._train_config(), data)
        self.d_min_, self.d_max_ = data.d_min, data.d_max
        return self

    def extractor(self) -> ev.NetworkExtractor:
        check_is_fitted(self, "params_")
        return ev.NetworkExtractor(self.params_, self.d_min_, self.d_max_, self.t, self.mode, self.seed)

    def transform(self, X):
        """Keypoints of each depth image as a list of ``(xy, descriptors)``."""
        ext = self.extractor()
        return [ext(_as_depth(v), i) for i, v in enumerate(X)]


class RepositoryMatcher(BaseEstimator):
    """Nearest-neighbour descriptor matching against reference views.

    ``extractor`` is a fitted ``KeypointDetectorDescriptor`` or any callable
    ``(depth, view_id) -> (xy, descriptors)`` with a ``dim`` attribute.
    Views are ``(DepthImage, pose)`` tuples.
    """

    def __init__(self, extractor=None, intrinsics=None, tau_eval=0.05, tau_pos=0.025, depth_lookup="nearest"):
        self.extractor = extractor
        self.intrinsics = intrinsics
        self.tau_eval = tau_eval
        self.tau_pos = tau_pos
        self.depth_lookup = depth_lookup

    def _extract(self):
        if self.extractor is None or self.intrinsics is None:
            raise DomainError("RepositoryMatcher needs an extractor and intrinsics")
        if isinstance(self.extractor, KeypointDetectorDescriptor):
            return self.extractor.extractor()
        return self.extractor

    def _sampling(self):
        return ev.SamplingConfig(self.tau_pos, self.depth_lookup)

    def fit(self, X, y=None):
        self.repository_ = ev.build_repository(self._extract(), X, self.intrinsics, self._sampling())
        return self

    def predict(self, X):
        """Per-view ``MatchResult`` for every query view."""
        check_is_fitted(self, "repository_")
        check_scalar(self.tau_eval, "tau_eval", min_val=0.0)
        ext = self._extract()
        return [ev.match_view(ext, v, self.intrinsics, self.repository_, self.tau_eval, i, self._sampling())
                for i, v in enumerate(X)]

    def score(self, X, y=None) -> float:
        """True matches over total matches across ``X``."""
        views = list(X)
        if not views:
            raise DomainError("no test views")
        return ev.MatchResult.concatenate(self.predict(views)).accuracy
