"""A toy per-point classifier: feature extraction, a small fully-connected
network with hand-written backprop, an SGD trainer, baseline anomaly scores,
and a versioned binary checkpoint format.

The backbone stands in for a full 3D segmentation network; the objectives
being exercised are backbone-agnostic, so a per-point MLP over simple
geometric features is enough at desk scale.

Checkpoint layout (all little-endian):

    bytes 0..3   magic b"OODC"
    uint32       format version (currently 1)
    uint32       L = number of affine layers
    uint32[L+1]  layer sizes d_0 .. d_L (d_L = c + 1)
    then per layer k = 1..L:
        float64[d_{k-1} * d_k]  weight matrix, row-major (input-major)
        float64[d_k]            bias vector
    float64[3]   beta (margin weights)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import LabelSpace, RngStream, Scene, as_generator, to_spherical
from .io import FormatError
from .losses import (
    HeadOutput,
    LossConfig,
    Probs,
    cce_loss,
    softmax_head,
    total_loss,
)

FEATURE_NAMES = ("x", "y", "z", "r", "lat", "lon", "density")

CHECKPOINT_MAGIC = b"OODC"
CHECKPOINT_VERSION = 1

LOSS_MODES = ("abstain+static", "abstain+dynamic", "ce+cce", "ce")


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the last epoch that finished."""

    def __init__(self, epoch: int, last_good_epoch: int | None):
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch
        super().__init__(
            f"non-finite loss in epoch {epoch}"
            + (f" (last good epoch: {last_good_epoch})" if last_good_epoch is not None else "")
        )


@dataclass
class FeatureConfig:
    """Which per-point features to emit, in order, plus their divisors.

    ``density`` counts neighbors within ``density_radius`` (self excluded).
    ``normalizers`` maps feature name -> divisor; unlisted features pass
    through unscaled.
    """

    features: tuple[str, ...] = FEATURE_NAMES
    density_radius: float = 1.0
    normalizers: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.features = tuple(self.features)
        if not self.features:
            raise ValueError("at least one feature required")
        unknown = set(self.features) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown features: {sorted(unknown)}")
        if "density" in self.features and not self.density_radius > 0:
            raise ValueError("density_radius must be > 0")


def extract_features(scene: Scene, cfg: FeatureConfig) -> np.ndarray:
    """(n, d) feature matrix in the configured order."""
    columns = {}
    need_sph = {"r", "lat", "lon"} & set(cfg.features)
    if need_sph:
        sph = to_spherical(scene.points)
        columns["lon"], columns["lat"], columns["r"] = sph[:, 0], sph[:, 1], sph[:, 2]
    for axis, name in enumerate(("x", "y", "z")):
        if name in cfg.features:
            columns[name] = scene.points[:, axis]
    if "density" in cfg.features:
        tree = cKDTree(scene.points)
        counts = tree.query_ball_point(
            scene.points, cfg.density_radius, return_length=True
        )
        columns["density"] = counts.astype(np.float64) - 1.0
    out = np.stack(
        [columns[name] / cfg.normalizers.get(name, 1.0) for name in cfg.features],
        axis=1,
    )
    return out


@dataclass
class MlpParams:
    """Affine layers; hidden activations are ReLU, the output is linear and
    splits into c inlier logits plus one outlier logit."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight/bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {k}: incompatible shapes {w.shape} / {b.shape}")
            if k > 0 and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ValueError(f"layer {k}: input dim mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(layer_sizes, rng) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, seeded."""
    gen = as_generator(rng)
    weights, biases = [], []
    for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(d_in)
        weights.append(gen.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(gen.uniform(-bound, bound, size=d_out))
    return MlpParams(weights, biases)


def _forward_cache(features: np.ndarray, params: MlpParams):
    acts = [np.asarray(features, dtype=np.float64)]
    h = acts[0]
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return logits, acts


def forward(features: np.ndarray, params: MlpParams) -> HeadOutput:
    """Run the network; the last column of the output is the outlier logit."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"features shape {features.shape} incompatible with input dim "
            f"{params.weights[0].shape[0]}"
        )
    logits, _ = _forward_cache(features, params)
    if logits.shape[1] < 2:
        raise ValueError("output layer must have at least 2 units (c >= 1 plus outlier)")
    return HeadOutput(logits[:, :-1], logits[:, -1])


def backward(params: MlpParams, acts: list[np.ndarray], grad_logits: np.ndarray):
    """Gradients of a scalar loss wrt every weight/bias, given d(loss)/d(logits).

    ReLU subgradient at 0 is 0, matching the hinge convention.
    """
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    delta = grad_logits
    for k in range(len(params.weights) - 1, -1, -1):
        grads_w[k] = acts[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0.0)
    return grads_w, grads_b


@dataclass
class TrainConfig:
    """SGD settings.

    ``beta_lr_scale`` multiplies the learning rate for the margin weights
    beta only. The default 1.0 gives beta the same SGD step as the weights;
    the margin magnitudes make beta's raw gradient roughly |m| times larger
    than a typical weight gradient, so small-scale runs that take many
    large steps may need a smaller scale to keep beta from swallowing the
    hinge (beta can legally minimize the dynamic penalty by running away
    instead of moving alpha).
    """

    learning_rate: float = 0.05
    epochs: int = 10
    seed: int = 0
    loss_mode: str = "abstain+static"
    scenes_per_batch: int = 1
    hidden_sizes: tuple[int, ...] = (64, 64)
    beta_lr_scale: float = 1.0
    # Initial bias of the outlier logit. Starting it low keeps the abstain
    # escape term from binding the outlier head to hard inliers before the
    # margins have separated alpha.
    outlier_bias_init: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.scenes_per_batch < 1:
            raise ValueError("scenes_per_batch must be >= 1")
        if not self.beta_lr_scale >= 0:
            raise ValueError("beta_lr_scale must be >= 0")
        self.hidden_sizes = tuple(self.hidden_sizes)


@dataclass
class TrainLog:
    epoch_losses: list[float]
    beta_history: list[np.ndarray]


def _scene_loss(head, labels, space, loss_cfg, mode, beta):
    if mode == "abstain+static":
        return total_loss(head, labels, space, loss_cfg, "static")
    if mode == "abstain+dynamic":
        return total_loss(head, labels, space, loss_cfg, "dynamic", beta)
    if mode == "ce+cce":
        return cce_loss(head, labels, space, loss_cfg.weight_cce)
    return cce_loss(head, labels, space, 0.0)


def train(
    scenes: list[Scene],
    space: LabelSpace,
    feature_cfg: FeatureConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    rng=None,
) -> tuple[MlpParams, np.ndarray, TrainLog]:
    """Plain SGD on the selected objective; beta rides the same steps in
    dynamic mode. Deterministic given (scenes, configs, seed).

    Loss modes other than plain "ce" need outlier-labelled points in the
    dataset; raises ValueError if they are missing. Raises TrainingDiverged
    on a non-finite loss.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    if train_cfg.loss_mode != "ce":
        if not any(space.is_outlier(s.labels).any() for s in scenes):
            raise ValueError(
                f"loss mode {train_cfg.loss_mode!r} requires outlier labels "
                "in the training data"
            )
    gen = as_generator(rng if rng is not None else RngStream(train_cfg.seed))

    feats = [extract_features(s, feature_cfg) for s in scenes]
    labels = [s.labels for s in scenes]
    dim = feats[0].shape[1]
    c = space.num_classes
    params = init_params([dim, *train_cfg.hidden_sizes, c + 1], gen)
    params.biases[-1][c] += train_cfg.outlier_bias_init
    beta = np.ones(3)
    mode = train_cfg.loss_mode
    lr = train_cfg.learning_rate

    log = TrainLog(epoch_losses=[], beta_history=[])
    last_good: int | None = None
    for epoch in range(train_cfg.epochs):
        order = gen.permutation(len(scenes))
        epoch_values = []
        for start in range(0, len(order), train_cfg.scenes_per_batch):
            batch = order[start:start + train_cfg.scenes_per_batch]
            acc_w = [np.zeros_like(w) for w in params.weights]
            acc_b = [np.zeros_like(b) for b in params.biases]
            acc_beta = np.zeros(3)
            batch_value = 0.0
            for i in batch:
                logits, acts = _forward_cache(feats[i], params)
                if not np.all(np.isfinite(logits)):
                    raise TrainingDiverged(epoch, last_good)
                head = HeadOutput(logits[:, :-1], logits[:, -1])
                res = _scene_loss(head, labels[i], space, loss_cfg, mode, beta)
                gw, gb = backward(params, acts, res.grad_logits())
                for k in range(len(acc_w)):
                    acc_w[k] += gw[k]
                    acc_b[k] += gb[k]
                if res.grad_beta is not None:
                    acc_beta += res.grad_beta
                batch_value += res.value
            scale = 1.0 / len(batch)
            batch_value *= scale
            if not np.isfinite(batch_value):
                raise TrainingDiverged(epoch, last_good)
            for k in range(len(acc_w)):
                params.weights[k] -= lr * scale * acc_w[k]
                params.biases[k] -= lr * scale * acc_b[k]
            if mode == "abstain+dynamic":
                beta = beta - lr * train_cfg.beta_lr_scale * scale * acc_beta
                if loss_cfg.clamp_beta:
                    beta = np.maximum(beta, 0.0)
            epoch_values.append(batch_value)
        log.epoch_losses.append(float(np.mean(epoch_values)))
        log.beta_history.append(beta.copy())
        last_good = epoch
    return params, beta, log


def score_msp(probs: Probs) -> np.ndarray:
    """1 - max softmax probability over the inlier classes only (the inlier
    renormalization is exactly a softmax over the inlier logits)."""
    denom = np.maximum(1.0 - probs.outlier, np.finfo(np.float64).tiny)
    return 1.0 - probs.inlier.max(axis=1) / denom


def score_maxlogit(inlier_logits: np.ndarray) -> np.ndarray:
    """Negative max inlier logit; unlike MSP, not shift-invariant."""
    return -np.asarray(inlier_logits, dtype=np.float64).max(axis=1)


def score_outlier_prob(probs: Probs) -> np.ndarray:
    """The directly predicted outlier probability p^o."""
    return probs.outlier.copy()


def save_checkpoint(path, params: MlpParams, beta) -> None:
    """Write the documented binary layout (atomically via a temp file)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (3,):
        raise ValueError("beta must have shape (3,)")
    sizes = params.layer_sizes
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(params.weights))
    blob += struct.pack(f"<{len(sizes)}I", *sizes)
    for w, b in zip(params.weights, params.biases):
        blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(b, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(beta, dtype="<f8").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[MlpParams, np.ndarray]:
    data = open(path, "rb").read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    sizes = struct.unpack_from(f"<{n_layers + 1}I", data, offset)
    offset += 4 * (n_layers + 1)
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=d_in * d_out, offset=offset)
        offset += 8 * d_in * d_out
        b = np.frombuffer(data, dtype="<f8", count=d_out, offset=offset)
        offset += 8 * d_out
        weights.append(w.reshape(d_in, d_out).copy())
        biases.append(b.copy())
    beta = np.frombuffer(data, dtype="<f8", count=3, offset=offset).copy()
    offset += 24
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return MlpParams(weights, biases), beta
