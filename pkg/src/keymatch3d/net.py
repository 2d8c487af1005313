"""Keypoint detector/descriptor network.

A small convolutional backbone (four 3x3 conv layers, 2x2 max-pool after the
first two, feature stride 4) feeds two heads:

* a 1x1 conv + sigmoid giving one keypoint score per feature cell;
* bilinear RoI pooling of a fixed ``box_size`` window around each selected
  cell followed by a fully-connected layer giving the descriptor.

Keypoint locations and boxes are constants of the forward pass. The backward
pass routes descriptor gradients through fc -> RoI pooling -> backbone and
score gradients through the score head at the selected cells only.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from ._validation import DomainError, check_rng

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KMNP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    channels: tuple = (16, 32, 64, 64)
    descriptor_dim: int = 128
    box_size: int = 32
    pool_size: int = 4
    t: int = 16
    nms_radius: float = 4.0

    stride = 4  # two 2x2 max-pools

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise DomainError("backbone needs four positive channel counts")
        if self.descriptor_dim < 1 or self.box_size < 1 or self.pool_size < 1 or self.t < 1:
            raise DomainError("descriptor_dim, box_size, pool_size and t must be >= 1")
        if self.nms_radius < 0:
            raise DomainError("nms_radius must be >= 0")

    def echo(self) -> dict:
        d = asdict(self)
        d["channels"] = ",".join(map(str, self.channels))
        d["stride"] = self.stride
        return d

    @classmethod
    def from_echo(cls, kv: dict) -> "NetConfig":
        return cls(
            channels=tuple(int(c) for c in kv["channels"].split(",")),
            descriptor_dim=int(kv["descriptor_dim"]),
            box_size=int(kv["box_size"]),
            pool_size=int(kv["pool_size"]),
            t=int(kv["t"]),
            nms_radius=float(kv["nms_radius"]),
        )


PARAM_NAMES = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "conv4_w", "conv4_b",
    "score_w", "score_b", "fc_w", "fc_b",
)
SCORE_HEAD = ("score_w", "score_b")
DESCRIPTOR_HEAD = ("fc_w", "fc_b")


class ModelParams:
    """Ordered trainable tensors plus the architecture they belong to."""

    def __init__(self, config: NetConfig, tensors: dict):
        missing = set(PARAM_NAMES) - set(tensors)
        if missing:
            raise DomainError(f"missing parameter tensors: {sorted(missing)}")
        self.config = config
        self.tensors = {k: tensors[k] for k in PARAM_NAMES}

    def __getitem__(self, k):
        return self.tensors[k]

    def __setitem__(self, k, v):
        self.tensors[k] = v

    def __iter__(self):
        return iter(PARAM_NAMES)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return self.tensors["conv1_w"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.items()})

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(self[k], other[k]) for k in PARAM_NAMES)


def init_params(config: NetConfig = NetConfig(), seed=0, dtype=np.float32) -> ModelParams:
    """Zero biases; weights uniform in +-sqrt(6 / (fan_in + fan_out)), folded
    to non-negative for the score head."""
    rng = check_rng(seed)
    c1, c2, c3, c4 = config.channels
    P, d = config.pool_size, config.descriptor_dim

    def uniform(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(dtype)

    t = {}
    for i, (cin, cout) in enumerate([(3, c1), (c1, c2), (c2, c3), (c3, c4)], start=1):
        t[f"conv{i}_w"] = uniform((cout, cin, 3, 3), cin * 9, cout * 9)
        t[f"conv{i}_b"] = np.zeros(cout, dtype=dtype)
    # features are post-ReLU, so non-negative score weights make every cell
    # with depth start at least as salient as an empty one (score 0.5);
    # otherwise a seed can pick only holes and never receive a gradient
    t["score_w"] = np.abs(uniform((1, c4), c4, 1))
    t["score_b"] = np.zeros(1, dtype=dtype)
    t["fc_w"] = uniform((d, c4 * P * P), c4 * P * P, d)
    t["fc_b"] = np.zeros(d, dtype=dtype)
    return ModelParams(config, t)


@dataclass
class ForwardState:
    """Intermediate values kept for the backward pass of one image."""

    caches: list
    feature_map: np.ndarray
    score_map: np.ndarray


def forward(params: ModelParams, x):
    """Run the backbone and score head on a ``(3, H, W)`` input.

    Returns ``(feature_map, score_map, state)``; the score map is float64 so
    scores never round to exactly 0 or 1.
    """
    x = np.asarray(x)
    stride = params.config.stride
    if x.ndim != 3 or x.shape[0] != 3:
        raise DomainError(f"network input must be (3, H, W), got {x.shape}")
    if x.shape[1] % stride or x.shape[2] % stride:
        raise DomainError(f"input size {x.shape[1]}x{x.shape[2]} not divisible by feature stride {stride}")
    h = x.astype(params.dtype, copy=False)
    caches = []
    for i in range(1, 5):
        z, cc = L.conv2d_forward(h, params[f"conv{i}_w"], params[f"conv{i}_b"])
        a = L.relu(z)
        caches.append(("conv", cc, z))
        if i <= 2:
            a, pc = L.maxpool2(a)
            caches.append(("pool", pc))
        h = a
    feat = h
    C, Hf, Wf = feat.shape
    logits = (params["score_w"] @ feat.reshape(C, -1) + params["score_b"][:, None]).reshape(Hf, Wf)
    score = L.sigmoid(logits.astype(np.float64))
    return feat, score, ForwardState(caches, feat, score)


def backbone_backward(params: ModelParams, state: ForwardState, dfeat) -> dict:
    grads = {}
    g = dfeat
    layer = 4
    for entry in reversed(state.caches):
        if entry[0] == "pool":
            g = L.maxpool2_backward(g, entry[1])
        else:
            _, cc, z = entry
            g = L.relu_backward(g, z)
            g, dw, db = L.conv2d_backward(g, cc)
            grads[f"conv{layer}_w"] = dw
            grads[f"conv{layer}_b"] = db
            layer -= 1
    return grads


# --------------------------------------------------------------------------
# keypoints


@dataclass
class KeypointSet:
    """Keypoints sorted by descending score.

    ``xy`` are image coordinates of the selected feature-cell centers,
    ``rois`` the ``(x0, y0, x1, y1)`` image-space boxes, ``cells`` the flat
    feature-cell indices. ``truncated`` is set when fewer than the requested
    number survived suppression.
    """

    xy: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray
    cells: np.ndarray
    rois: np.ndarray
    truncated: bool = False
    state: object = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.cells)


def cell_centers(shape_hw, stride: int) -> np.ndarray:
    """Image coordinates (u, v) of every feature cell center, shape (H*W, 2)."""
    Hf, Wf = shape_hw
    off = (stride - 1) / 2.0
    v, u = np.mgrid[0:Hf, 0:Wf]
    return np.column_stack([u.ravel() * stride + off, v.ravel() * stride + off]).astype(np.float64)


def select_cells(score_map, t: int, mode: str = "top-score", nms_radius: float = 0.0, stride: int = 4, rng=None):
    """Pick ``t`` feature cells; returns ``(cells, truncated)`` with cells
    ordered by descending score (ties: lower index first).

    ``top-score`` is greedy by score with suppression of any cell within
    ``nms_radius`` pixels of an accepted one (0 disables suppression);
    ``random`` draws cells uniformly without replacement.
    """
    s = np.asarray(score_map, dtype=np.float64).ravel()
    n = s.size
    if t < 1:
        raise DomainError("t must be >= 1")
    if t > n:
        raise DomainError(f"t={t} exceeds the {n} available feature cells")
    if mode == "random":
        rng = check_rng(rng)
        chosen = rng.choice(n, size=t, replace=False)
    elif mode == "top-score":
        order = np.argsort(-s, kind="stable")
        if nms_radius > 0:
            centers = cell_centers(np.shape(score_map), stride)
            alive = np.ones(n, dtype=bool)
            chosen = []
            for c in order:
                if not alive[c]:
                    continue
                chosen.append(c)
                if len(chosen) == t:
                    break
                d = np.hypot(*(centers - centers[c]).T)
                alive &= d > nms_radius
            chosen = np.array(chosen, dtype=np.int64)
        else:
            chosen = order[:t]
    else:
        raise DomainError(f"unknown selection mode {mode!r}")
    chosen = np.asarray(chosen, dtype=np.int64)
    chosen = chosen[np.lexsort((chosen, -s[chosen]))]
    truncated = len(chosen) < t
    if truncated:
        logger.warning("only %d of %d keypoints survived suppression", len(chosen), t)
    return chosen, truncated


def image_rois(xy, box_size: float) -> np.ndarray:
    h = box_size / 2.0
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([xy[:, 0] - h, xy[:, 1] - h, xy[:, 0] + h, xy[:, 1] + h])


def feature_rois(rois, stride: int) -> np.ndarray:
    off = (stride - 1) / 2.0
    return (np.asarray(rois, dtype=np.float64) - off) / stride


def describe(params: ModelParams, feat, cells):
    """Descriptors for the given cells; returns ``(descriptors, xy, rois, cache)``."""
    cfg = params.config
    Hf, Wf = feat.shape[1:]
    xy = cell_centers((Hf, Wf), cfg.stride)[cells]
    rois = image_rois(xy, cfg.box_size)
    pooled, pcache = L.roi_pool(feat, feature_rois(rois, cfg.stride), cfg.pool_size)
    flat = pooled.reshape(len(cells), -1)
    desc, _ = L.fc_forward(flat, params["fc_w"], params["fc_b"])
    return desc, xy, rois, (pcache, flat)


@dataclass
class KeypointState:
    forward: ForwardState
    describe_cache: tuple


def extract_keypoints(params: ModelParams, x, t=None, mode="top-score", rng=None, nms_radius=None, cells=None) -> KeypointSet:
    """Score map -> top-``t`` (or random) cells -> RoI-pooled descriptors.

    Passing ``cells`` skips selection and describes exactly those cells.
    """
    cfg = params.config
    t = cfg.t if t is None else int(t)
    nms = cfg.nms_radius if nms_radius is None else nms_radius
    feat, score, fstate = forward(params, x)
    truncated = False
    if cells is None:
        cells, truncated = select_cells(score, t, mode, nms, cfg.stride, rng)
    cells = np.asarray(cells, dtype=np.int64)
    desc, xy, rois, dcache = describe(params, feat, cells)
    return KeypointSet(
        xy=xy,
        scores=score.ravel()[cells],
        descriptors=desc,
        cells=cells,
        rois=rois,
        truncated=truncated,
        state=KeypointState(fstate, dcache),
    )


def backward_from_keypoints(params: ModelParams, kps: KeypointSet, ddesc, dscore) -> ModelParams:
    """Parameter gradients given per-keypoint descriptor and score gradients.

    Score gradients enter the score map only at the selected cells; nothing
    flows into keypoint coordinates or box extents.
    """
    if kps.state is None:
        raise DomainError("keypoint set carries no cached forward state")
    ddesc = np.asarray(ddesc)
    dscore = np.asarray(dscore, dtype=np.float64)
    n = len(kps)
    if ddesc.shape != (n, params.config.descriptor_dim) or dscore.shape != (n,):
        raise DomainError(
            f"gradient lists misaligned with {n} keypoints: descriptors {ddesc.shape}, scores {dscore.shape}"
        )
    dtype = params.dtype
    fstate, (pcache, flat) = kps.state.forward, kps.state.describe_cache
    feat, score = fstate.feature_map, fstate.score_map
    C, Hf, Wf = feat.shape
    grads = {}

    ddesc = ddesc.astype(dtype, copy=False)
    dflat, grads["fc_w"], grads["fc_b"] = L.fc_backward(ddesc, flat, params["fc_w"])
    P = params.config.pool_size
    dfeat = L.roi_pool_backward(dflat.reshape(n, C, P, P), pcache)

    dmap = np.zeros(Hf * Wf)
    np.add.at(dmap, kps.cells, dscore)
    dlogit = L.sigmoid_backward(dmap, score.ravel()).astype(dtype)
    fflat = feat.reshape(C, -1)
    grads["score_w"] = (dlogit @ fflat.T)[None, :]
    grads["score_b"] = np.array([dlogit.sum()], dtype=dtype)
    dfeat = dfeat + (params["score_w"].T @ dlogit[None, :]).reshape(C, Hf, Wf)

    grads.update(backbone_backward(params, fstate, dfeat))
    return ModelParams(params.config, grads)


# --------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, params: ModelParams, extra_blobs=(), echo: dict | None = None) -> None:
    """Binary checkpoint: magic, version, blob count, blobs, then a
    length-prefixed UTF-8 ``key=value`` config echo."""
    blobs = [params[k] for k in PARAM_NAMES] + [np.asarray(b) for b in extra_blobs]
    kv = params.config.echo()
    kv["blobs"] = ",".join(PARAM_NAMES)
    kv["extra_blobs"] = len(extra_blobs)
    kv.update(echo or {})
    text = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blobs)))
        for b in blobs:
            fh.write(struct.pack("<I", b.ndim))
            fh.write(struct.pack(f"<{b.ndim}I", *b.shape))
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)


def read_checkpoint(path):
    """Returns ``(params, extra_blobs, echo)``; params are float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DomainError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    arrays = []
    try:
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32))
            off += 4 * n
        (tlen,) = struct.unpack_from("<I", blob, off)
        text = blob[off + 4 : off + 4 + tlen].decode("utf-8")
    except (struct.error, ValueError) as e:
        raise DomainError(f"{path}: truncated checkpoint ({e})") from None
    echo = dict(line.split("=", 1) for line in text.splitlines() if line)
    config = NetConfig.from_echo(echo)
    names = echo["blobs"].split(",")
    params = ModelParams(config, dict(zip(names, arrays[: len(names)])))
    return params, arrays[len(names) :], echo
