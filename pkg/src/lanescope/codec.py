"""Convolutional autoencoder over field tensors, built from scratch on
numpy, plus a linear-projection fallback encoder and 12-d feature assembly.

The network is a fixed 9-layer stack (4 convolutions down to an 8-d latent
code, 5 transposed convolutions back up, all tanh, channels-last):

    (13,17,2) -conv5x5-> (9,13,32) -conv5x5-> (5,9,32) -conv5x5-> (1,5,32)
    -conv1x5-> (1,1,8) -convT1x5-> (1,5,32) -convT5x5-> (5,9,32)
    -convT5x5-> (9,13,32) -convT5x5-> (13,17,32) -convT3x3(same)-> (13,17,2)

Every layer reduces to one primitive, a valid cross-correlation: a
transposed convolution is a valid cross-correlation of the zero-padded
input with the spatially flipped kernel (full padding for shape growth,
half padding for the shape-preserving output layer). Training minimizes
mean squared reconstruction error with Nadam.

Because the output activation is tanh, reconstructions live in (-1, 1);
training therefore rescales inputs once (``TrainConfig.auto_scale``) and
the model remembers the factor, so encode/decode stay consistent.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FeatureSequence, FieldTensor, VehicleState
from .errors import EmptyDataset, LengthMismatch, RankDeficient, ShapeError

INPUT_SHAPE = (13, 17, 2)
LATENT_DIM = 8
FIELD_SIZE = int(np.prod(INPUT_SHAPE))  # 442 flattened entries


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "convT" | "convT_same"
    kernel: tuple[int, int]
    in_channels: int
    out_channels: int

    @property
    def pad(self) -> tuple[int, int]:
        kh, kw = self.kernel
        if self.kind == "conv":
            return (0, 0)
        if self.kind == "convT":
            return (kh - 1, kw - 1)
        if self.kind == "convT_same":
            return ((kh - 1) // 2, (kw - 1) // 2)
        raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def flipped(self) -> bool:
        return self.kind != "conv"


ARCHITECTURE: tuple[LayerSpec, ...] = (
    LayerSpec("conv", (5, 5), 2, 32),
    LayerSpec("conv", (5, 5), 32, 32),
    LayerSpec("conv", (5, 5), 32, 32),
    LayerSpec("conv", (1, 5), 32, LATENT_DIM),
    LayerSpec("convT", (1, 5), LATENT_DIM, 32),
    LayerSpec("convT", (5, 5), 32, 32),
    LayerSpec("convT", (5, 5), 32, 32),
    LayerSpec("convT", (5, 5), 32, 32),
    LayerSpec("convT_same", (3, 3), 32, 2),
)

# Expected activation shapes after each layer (input shape first).
SHAPE_CHAIN: tuple[tuple[int, int, int], ...] = (
    (13, 17, 2), (9, 13, 32), (5, 9, 32), (1, 5, 32), (1, 1, LATENT_DIM),
    (1, 5, 32), (5, 9, 32), (9, 13, 32), (13, 17, 32), (13, 17, 2),
)

LATENT_LAYER = 3  # latent code is the activation after this layer index


@dataclass
class CaeModel:
    layers: tuple[LayerSpec, ...]
    weights: list[np.ndarray]   # per layer, (kh, kw, in_channels, out_channels)
    biases: list[np.ndarray]    # per layer, (out_channels,)
    seed: int
    input_scale: float = 1.0
    iterations_trained: int = 0

    def copy(self) -> "CaeModel":
        return CaeModel(layers=self.layers,
                        weights=[w.copy() for w in self.weights],
                        biases=[b.copy() for b in self.biases],
                        seed=self.seed, input_scale=self.input_scale,
                        iterations_trained=self.iterations_trained)


def parameter_count(model: CaeModel) -> int:
    return sum(w.size for w in model.weights) + sum(b.size for b in model.biases)


def cae_init(seed: int) -> CaeModel:
    """Fresh model with fan-based uniform weights (+-sqrt(6/(fan_in+fan_out)))
    and zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in ARCHITECTURE:
        kh, kw = spec.kernel
        fan_in = kh * kw * spec.in_channels
        fan_out = kh * kw * spec.out_channels
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(kh, kw, spec.in_channels,
                                                        spec.out_channels)))
        biases.append(np.zeros(spec.out_channels))
    return CaeModel(layers=ARCHITECTURE, weights=weights, biases=biases, seed=seed)


# the single spatial primitive: valid cross-correlation as one matmul over
# an im2col patch matrix (transposed convolutions reuse it on a padded
# input with a spatially flipped kernel) ----------------------------------

def _pad(x: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _im2col(x: np.ndarray, kh: int, kw: int):
    """(B,H,W,C) -> patch matrix (B*hp*wp, kh*kw*C) ordered to match the
    (kh, kw, C, O) weight layout."""
    b, h, w, c = x.shape
    hp, wp = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return patches.reshape(b * hp * wp, kh * kw * c), hp, wp


def _weight_matrix(spec: LayerSpec, w: np.ndarray) -> np.ndarray:
    weff = w[::-1, ::-1] if spec.flipped else w
    return np.ascontiguousarray(weff).reshape(-1, spec.out_channels)


def _layer_forward(spec: LayerSpec, w: np.ndarray, b: np.ndarray, x: np.ndarray):
    kh, kw = spec.kernel
    xp = _pad(x, spec.pad)
    patches, hp, wp = _im2col(xp, kh, kw)
    pre = (patches @ _weight_matrix(spec, w)).reshape(x.shape[0], hp, wp, -1)
    act = np.tanh(pre + b)
    return act, (patches, xp.shape)


def _layer_backward(spec: LayerSpec, w: np.ndarray, cache, act: np.ndarray,
                    dact: np.ndarray):
    patches, xp_shape = cache
    kh, kw = spec.kernel
    b, hp, wp, out_c = act.shape
    dpre = dact * (1.0 - act * act)
    db = dpre.sum(axis=(0, 1, 2))
    dout = dpre.reshape(b * hp * wp, out_c)

    dweff = (patches.T @ dout).reshape(kh, kw, spec.in_channels, out_c)
    dw = dweff[::-1, ::-1] if spec.flipped else dweff

    spread = (dout @ _weight_matrix(spec, w).T).reshape(b, hp, wp, kh, kw,
                                                        spec.in_channels)
    dxp = np.zeros(xp_shape, dtype=spread.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hp, j:j + wp, :] += spread[:, :, :, i, j, :]
    ph, pw = spec.pad
    dx = dxp[:, ph:dxp.shape[1] - ph or None, pw:dxp.shape[2] - pw or None, :]
    return dx, np.ascontiguousarray(dw), db


# forward / loss / gradients ----------------------------------------------

def _as_batch(batch) -> np.ndarray:
    if isinstance(batch, FieldTensor):
        batch = batch.values[None]
    elif isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], FieldTensor):
        batch = np.stack([t.values for t in batch])
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"expected batch of {INPUT_SHAPE} tensors, got {arr.shape}")
    return arr


def _forward_stack(layers, weights, biases, x: np.ndarray):
    """Run the stack, checking each activation against the shape chain.
    Returns (latents, reconstruction, per-layer (cache, activation))."""
    caches = []
    act = x
    latent = None
    for idx, spec in enumerate(layers):
        act, cache = _layer_forward(spec, weights[idx], biases[idx], act)
        expected = SHAPE_CHAIN[idx + 1]
        if act.shape[1:] != expected:
            raise ShapeError(f"layer {idx} produced {act.shape[1:]}, expected {expected}")
        caches.append((cache, act))
        if idx == LATENT_LAYER:
            latent = act.reshape(act.shape[0], LATENT_DIM)
    return latent, act, caches


def _backward_stack(layers, weights, caches, dact):
    """Backpropagate through the whole stack; returns per-layer gradients."""
    grads_w: list[np.ndarray | None] = [None] * len(layers)
    grads_b: list[np.ndarray | None] = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        cache, act = caches[idx]
        dact, grads_w[idx], grads_b[idx] = _layer_backward(
            layers[idx], weights[idx], cache, act, dact)
    return grads_w, grads_b


def _forward_full(model: CaeModel, x: np.ndarray):
    return _forward_stack(model.layers, model.weights, model.biases, x)


def cae_forward(model: CaeModel, batch) -> tuple[np.ndarray, np.ndarray]:
    """Latent codes (B, 8) and reconstructions (B, 13, 17, 2) for a batch
    of field tensors (reconstructions are of the scaled inputs)."""
    x = _as_batch(batch) * model.input_scale
    latent, recon, _ = _forward_full(model, x)
    return latent, recon


def encode(model: CaeModel, dataset) -> np.ndarray:
    """Latent codes for a whole dataset, in chunks."""
    x = _as_batch(dataset)
    out = np.empty((x.shape[0], LATENT_DIM))
    for start in range(0, x.shape[0], 512):
        out[start:start + 512] = cae_forward(model, x[start:start + 512])[0]
    return out


def cae_loss(model: CaeModel, batch) -> float:
    """Mean squared reconstruction error over a batch (in scaled space)."""
    x = _as_batch(batch) * model.input_scale
    _, recon, _ = _forward_full(model, x)
    return float(np.mean((recon - x) ** 2))


def cae_gradients(model: CaeModel, batch) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Backpropagated gradient of the mean batch MSE with respect to every
    weight and bias; also returns the loss itself."""
    x = _as_batch(batch) * model.input_scale
    _, recon, caches = _forward_full(model, x)
    loss = float(np.mean((recon - x) ** 2))
    dact = 2.0 * (recon - x) / recon.size
    grads_w, grads_b = _backward_stack(model.layers, model.weights, caches, dact)
    return grads_w, grads_b, loss


# training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_iterations: int = 5000
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lr_decay: float = 0.0          # lr_t = lr / (1 + lr_decay * t)
    stop_loss: float | None = None  # stop once the 100-iter mean drops below
    auto_scale: bool = True
    dtype: str = "float32"          # compute precision; master weights stay float64

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_iterations <= 0:
            raise ValueError("batch_size and max_iterations must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0 or self.lr < 0 or self.lr_decay < 0:
            raise ValueError("eps must be positive; lr and lr_decay nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")


class _Nadam:
    """Nesterov-accelerated Adam on a flat list of parameter arrays:

        m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
        step = b1 m/(1-b1^t) + (1-b1)/(1-b1^t) g
        p <- p - lr * step / (sqrt(v/(1-b2^t)) + eps)
    """

    def __init__(self, params: list[np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        cfg = self.cfg
        lr = cfg.lr / (1.0 + cfg.lr_decay * (self.t - 1))
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            lookahead = cfg.beta1 * m / bc1 + (1.0 - cfg.beta1) / bc1 * g
            p -= lr * lookahead / (np.sqrt(v / bc2) + cfg.eps)


def _dataset_array(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray) and dataset.ndim == 4:
        arr = dataset.astype(np.float64, copy=False)
    else:
        items = list(dataset)
        if not items:
            raise EmptyDataset("cannot train on an empty dataset")
        arr = _as_batch(items)
    if arr.shape[0] == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if arr.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"expected {INPUT_SHAPE} tensors, got {arr.shape[1:]}")
    return arr


def cae_train(model: CaeModel, dataset, cfg: TrainConfig = TrainConfig()
              ) -> tuple[CaeModel, list[float]]:
    """Train a copy of the model with Nadam on seeded shuffled mini-batches;
    returns (trained model, per-iteration mean batch MSE).

    With ``auto_scale`` the input scale is set once from the dataset so the
    tanh output range can represent it; the loss history is reported in
    that scaled space.
    """
    data = _dataset_array(dataset)
    model = model.copy()
    if cfg.auto_scale:
        max_abs = float(np.max(np.abs(data)))
        model.input_scale = 0.9 / max_abs if max_abs > 0 else 1.0
    dtype = np.dtype(cfg.dtype)
    scaled = (data * model.input_scale).astype(dtype)

    rng = np.random.default_rng(cfg.seed)
    opt = _Nadam(model.weights + model.biases, cfg)
    n = scaled.shape[0]
    history: list[float] = []
    order = rng.permutation(n)
    cursor = 0
    for _ in range(cfg.max_iterations):
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        take = min(cfg.batch_size, n)
        batch = scaled[order[cursor:cursor + take]]
        cursor += take

        # compute in the configured precision against float64 master weights
        weights = [w.astype(dtype, copy=False) for w in model.weights]
        biases = [b.astype(dtype, copy=False) for b in model.biases]
        _, recon, caches = _forward_stack(model.layers, weights, biases, batch)
        loss = float(np.mean((recon - batch).astype(np.float64) ** 2))
        dact = (2.0 / recon.size * (recon - batch)).astype(dtype)
        grads_w, grads_b = _backward_stack(model.layers, weights, caches, dact)
        opt.step(grads_w + grads_b)
        history.append(loss)
        model.iterations_trained += 1
        if cfg.stop_loss is not None and len(history) >= 100:
            if float(np.mean(history[-100:])) < cfg.stop_loss:
                break
    return model, history


# checkpointing -------------------------------------------------------------

_CHECKPOINT_FORMAT = "lanescope-cae-v1"


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").reshape(shape).copy()


def save_checkpoint(model: CaeModel, path) -> None:
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "seed": model.seed,
        "iterations_trained": model.iterations_trained,
        "input_scale": model.input_scale,
        "layers": [{"kind": s.kind, "kernel": list(s.kernel),
                    "in_channels": s.in_channels, "out_channels": s.out_channels}
                   for s in model.layers],
        "weights": [_encode_array(w) for w in model.weights],
        "biases": [_encode_array(b) for b in model.biases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> CaeModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise ShapeError(f"unrecognized checkpoint format {doc.get('format')!r}")
    layers = tuple(LayerSpec(kind=l["kind"], kernel=tuple(l["kernel"]),
                             in_channels=l["in_channels"], out_channels=l["out_channels"])
                   for l in doc["layers"])
    weights = [_decode_array(text, (s.kernel[0], s.kernel[1], s.in_channels, s.out_channels))
               for text, s in zip(doc["weights"], layers)]
    biases = [_decode_array(text, (s.out_channels,)) for text, s in zip(doc["biases"], layers)]
    return CaeModel(layers=layers, weights=weights, biases=biases,
                    seed=int(doc["seed"]), input_scale=float(doc["input_scale"]),
                    iterations_trained=int(doc["iterations_trained"]))


# linear fallback encoder ----------------------------------------------------

@dataclass(frozen=True)
class LinearProjection:
    """Top-k principal directions of the flattened fields; codes are
    centered projections."""

    mean: np.ndarray        # (442,)
    components: np.ndarray  # (k, 442)

    @property
    def k(self) -> int:
        return self.components.shape[0]


def linear_fallback_fit(dataset, k: int = LATENT_DIM) -> LinearProjection:
    data = _dataset_array(dataset).reshape(-1, FIELD_SIZE)
    if data.shape[0] < k:
        raise RankDeficient(f"need at least {k} samples, got {data.shape[0]}")
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    nonzero = int(np.sum(s > max(s[0], 1e-300) * 1e-12)) if s.size else 0
    if nonzero < k:
        raise RankDeficient(f"dataset spans {nonzero} directions, need {k}")
    return LinearProjection(mean=mean, components=vt[:k].copy())


def linear_fallback_encode(proj: LinearProjection, fields) -> np.ndarray:
    data = _dataset_array(fields).reshape(-1, FIELD_SIZE)
    return (data - proj.mean) @ proj.components.T


def linear_fallback_decode(proj: LinearProjection, codes: np.ndarray) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    flat = codes @ proj.components + proj.mean
    return flat.reshape(-1, *INPUT_SHAPE)


def save_projection(proj: LinearProjection, path) -> None:
    doc = {"format": "lanescope-linear-v1", "k": proj.k,
           "mean": _encode_array(proj.mean),
           "components": _encode_array(proj.components)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_projection(path) -> LinearProjection:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    k = int(doc["k"])
    return LinearProjection(mean=_decode_array(doc["mean"], (FIELD_SIZE,)),
                            components=_decode_array(doc["components"], (k, FIELD_SIZE)))


# feature assembly ------------------------------------------------------------

@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray   # (12,)
    scale: np.ndarray  # (12,)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.scale

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.scale + self.mean


def build_features(ego_states: Sequence[VehicleState], latents: np.ndarray) -> FeatureSequence:
    """Concatenate per-frame ego kinematics [vx, vy, ax, ay] with the 8-d
    latent codes into a (T, 12) feature sequence."""
    latents = np.asarray(latents, dtype=np.float64)
    if len(ego_states) != latents.shape[0]:
        raise LengthMismatch(f"{len(ego_states)} ego states vs {latents.shape[0]} latents")
    if latents.ndim != 2 or latents.shape[1] != LATENT_DIM:
        raise ShapeError(f"latents must be (T, {LATENT_DIM}), got {latents.shape}")
    kin = np.array([[s.vx, s.vy, s.ax, s.ay] for s in ego_states])
    frames = np.array([s.frame for s in ego_states], dtype=np.int64)
    return FeatureSequence(values=np.hstack([kin, latents]), frames=frames)


def standardize(features: FeatureSequence) -> tuple[FeatureSequence, Standardization]:
    """Per-dimension zero-mean unit-variance scaling; constant dimensions
    keep scale 1 so they map to exactly zero."""
    seqs, std = standardize_many([features])
    return seqs[0], std


def standardize_many(features: Sequence[FeatureSequence]
                     ) -> tuple[list[FeatureSequence], Standardization]:
    """Standardize several sequences with statistics pooled across all of
    them (used when independent trajectories share one model)."""
    stacked = np.vstack([f.values for f in features])
    mean = stacked.mean(axis=0)
    scale = stacked.std(axis=0)
    # constant dimensions keep scale 1; the threshold is relative because the
    # float mean of a constant column leaves O(eps) residual deviations
    tiny = 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(scale < tiny, 1.0, scale)
    std = Standardization(mean=mean, scale=scale)
    out = [FeatureSequence(values=std.transform(f.values), frames=f.frames)
           for f in features]
    return out, std
