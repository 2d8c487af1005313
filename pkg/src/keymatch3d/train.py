"""Siamese training loop: both views share one set of weights, the sampling
layer labels keypoint pairs, and SGD with momentum applies the summed
gradients of the two branches."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .depthsynth import normalize_depth
from .loss import LossConfig, multitask_loss
from ._validation import ConfigurationError, DomainError, TrainingError
from .sampling import SamplingConfig, run_sampling_layer

logger = logging.getLogger(__name__)

LOG_HEADER = ("iter", "total", "lc", "ls0", "ls1", "npos", "nneg", "mean_pos_score")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    t: int = 16
    tau_pos: float = 0.025
    depth_lookup: str = "nearest"
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    margin: float = 1.0
    gamma: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 500
    dataset: str = ""
    descriptor_dim: int = 128
    box_size: int = 32
    pool_size: int = 4
    nms_radius: float = 4.0
    channels: str = "16,32,64,64"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.checkpoint_interval < 0:
            raise ConfigurationError("checkpoint_interval must be >= 0")

    @property
    def net_config(self) -> net.NetConfig:
        return net.NetConfig(
            channels=tuple(int(c) for c in str(self.channels).split(",")),
            descriptor_dim=self.descriptor_dim,
            box_size=self.box_size,
            pool_size=self.pool_size,
            t=self.t,
            nms_radius=self.nms_radius,
        )

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.tau_pos, self.depth_lookup)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_c, self.lambda_s, self.margin, self.gamma)

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainConfig":
        """Build from string values; unknown keys are rejected."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(kv) - set(fields))
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {', '.join(unknown)}")
        out = {}
        for k, v in kv.items():
            default = fields[k].default
            try:
                out[k] = type(default)(v) if not isinstance(default, str) else str(v)
            except ValueError:
                raise ConfigurationError(f"bad value for {k}: {v!r}") from None
        return cls(**out)

    def to_kv(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items()}


@dataclass
class TrainState:
    params: net.ModelParams
    velocity: net.ModelParams
    iteration: int = 0


@dataclass
class StepRecord:
    iter: int
    total: float
    lc: float
    ls0: float
    ls1: float
    npos: int
    nneg: int
    mean_pos_score: float

    def row(self):
        return [self.iter, repr(self.total), repr(self.lc), repr(self.ls0), repr(self.ls1), self.npos, self.nneg,
                repr(self.mean_pos_score)]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.records and rec.iter <= self.records[-1].iter:
            raise DomainError("train log iterations must increase")
        self.records.append(rec)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_HEADER)
            for r in self.records:
                w.writerow(r.row())


def pair_inputs(pair, d_min, d_max):
    return normalize_depth(pair.depth_a, d_min, d_max), normalize_depth(pair.depth_b, d_min, d_max)


def compute_gradients(params, pair, cfg: TrainConfig, d_min, d_max, inputs=None):
    """Forward both branches, sample pairs, evaluate the loss and backpropagate.

    Returns ``(grads, loss_output, batch, (kps0, kps1))`` where ``grads`` is
    the sum of both branches' parameter gradients.
    """
    x0, x1 = inputs if inputs is not None else pair_inputs(pair, d_min, d_max)
    k0 = net.extract_keypoints(params, x0, cfg.t)
    k1 = net.extract_keypoints(params, x1, cfg.t)
    batch = run_sampling_layer(
        k0.xy, k1.xy, pair.depth_a, pair.depth_b, pair.pose_a, pair.pose_b, pair.intrinsics, cfg.sampling
    )
    out = multitask_loss(batch, k0.descriptors, k1.descriptors, k0.scores, k1.scores, cfg.loss)
    g0 = net.backward_from_keypoints(params, k0, out.ddesc0, out.dscore0)
    g1 = net.backward_from_keypoints(params, k1, out.ddesc1, out.dscore1)
    grads = net.ModelParams(params.config, {k: g0[k] + g1[k] for k in net.PARAM_NAMES})
    return grads, out, batch, (k0, k1)


def _mean_positive_score(batch, k0, k1) -> float:
    s = np.concatenate([k0.scores[batch.labels0 == 1], k1.scores[batch.labels1 == 1]])
    return float(s.mean()) if s.size else float("nan")


def train_step(state: TrainState, pair, cfg: TrainConfig, d_min, d_max, inputs=None, dump_dir=None):
    """One SGD-with-momentum update on a single pair; returns ``(state, record)``."""
    params = state.params
    grads, out, batch, (k0, k1) = compute_gradients(params, pair, cfg, d_min, d_max, inputs)
    if not (math.isfinite(out.total) and grads.all_finite()):
        dump = None
        if dump_dir is not None:
            dump = Path(dump_dir) / f"nonfinite_iter{state.iteration:06d}.npz"
            np.savez(dump, depth_a=pair.depth_a.data, depth_b=pair.depth_b.data, xy0=k0.xy, xy1=k1.xy,
                     scores0=k0.scores, scores1=k1.scores, desc0=k0.descriptors, desc1=k1.descriptors,
                     pairs=batch.pairs, labels=batch.pair_labels)
        raise TrainingError(
            f"non-finite loss at iteration {state.iteration}: total={out.total}, lc={out.contrastive}, "
            f"ls0={out.score0}, ls1={out.score1}, npos={batch.n_pos}, nneg={batch.n_neg}",
            dump,
        )
    lr = params.dtype.type(cfg.learning_rate)
    mu = params.dtype.type(cfg.momentum)
    new_p, new_v = {}, {}
    for k in net.PARAM_NAMES:
        v = mu * state.velocity[k] + grads[k].astype(params.dtype, copy=False)
        new_v[k] = v
        new_p[k] = params[k] - lr * v
    record = StepRecord(
        state.iteration, out.total, out.contrastive, out.score0, out.score1, batch.n_pos, batch.n_neg,
        _mean_positive_score(batch, k0, k1),
    )
    new_state = TrainState(net.ModelParams(params.config, new_p), net.ModelParams(params.config, new_v),
                           state.iteration + 1)
    return new_state, record, batch


def initial_state(cfg: TrainConfig) -> TrainState:
    params = net.init_params(cfg.net_config, seed=np.random.default_rng([cfg.seed, 0x1417]))
    return TrainState(params, params.zeros_like(), 0)


def pair_order(seed: int, n_pairs: int, iteration: int) -> int:
    """Index of the pair used at ``iteration``; reshuffled every epoch."""
    epoch, pos = divmod(iteration, n_pairs)
    perm = np.random.default_rng([int(seed), 0xE90C, epoch]).permutation(n_pairs)
    return int(perm[pos])


def save_state(path, state: TrainState, cfg: TrainConfig, d_min, d_max) -> None:
    echo = {"iteration": state.iteration, "d_min": repr(float(d_min)), "d_max": repr(float(d_max))}
    echo.update({f"train.{k}": v for k, v in cfg.to_kv().items()})
    net.write_checkpoint(path, state.params, [state.velocity[k] for k in net.PARAM_NAMES], echo)


def load_state(path):
    """Returns ``(state, echo)`` from a training checkpoint."""
    params, extra, echo = net.read_checkpoint(path)
    if len(extra) == len(net.PARAM_NAMES):
        velocity = net.ModelParams(params.config, dict(zip(net.PARAM_NAMES, extra)))
    else:
        velocity = params.zeros_like()
    return TrainState(params, velocity, int(echo.get("iteration", 0))), echo


def train(cfg: TrainConfig, dataset, out_dir=None, resume=None, progress=None):
    """Train on every pair of ``dataset`` in seeded shuffled order.

    Writes ``checkpoint_XXXXXX.kmnp`` every ``checkpoint_interval`` iterations,
    ``final.kmnp`` and ``train_log.csv`` when ``out_dir`` is given. ``resume``
    is a checkpoint path to continue from. Returns ``(params, log)``.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset has no pairs")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state, _ = load_state(resume)
    else:
        state = initial_state(cfg)
    d_min, d_max = dataset.d_min, dataset.d_max
    pairs = list(dataset.pairs()) if hasattr(dataset, "pairs") else list(dataset)
    inputs = {}
    log = TrainLog()
    while state.iteration < cfg.iterations:
        idx = pair_order(cfg.seed, len(pairs), state.iteration)
        if idx not in inputs:
            inputs[idx] = pair_inputs(pairs[idx], d_min, d_max)
        state, rec, _ = train_step(state, pairs[idx], cfg, d_min, d_max, inputs[idx], dump_dir=out)
        log.append(rec)
        if progress is not None:
            progress(rec)
        if out is not None and cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
            save_state(out / f"checkpoint_{state.iteration:06d}.kmnp", state, cfg, d_min, d_max)
    if out is not None:
        save_state(out / "final.kmnp", state, cfg, d_min, d_max)
        log.write_csv(out / "train_log.csv")
    return state.params, log


class InMemoryDataset:
    """List of pairs plus the depth range used to normalize them."""

    def __init__(self, pairs, d_min, d_max):
        self._pairs = list(pairs)
        self.d_min, self.d_max = float(d_min), float(d_max)

    def __len__(self):
        return len(self._pairs)

    def pairs(self):
        return iter(self._pairs)

    def pair(self, i):
        return self._pairs[i]

    def views(self):
        for p in self._pairs:
            yield from p.views()
