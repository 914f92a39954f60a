"""LeNet-style classifier over heatmaps, written directly against numpy.

Convolutions use an im2col gather plus one matrix product; the backward
pass mirrors it. Parameters and activations are float64 throughout.

Layer stack: conv 6@5x5 -> ReLU -> maxpool 2 -> conv 16@5x5 -> ReLU ->
maxpool 2 -> flatten (channel, row, col order) -> fc 120 -> ReLU ->
fc 84 -> ReLU -> fc 3 -> softmax.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encode import HEATMAP_HEIGHT, HEATMAP_WIDTH, Heatmap
from .stages import GraspStage

MODEL_MAGIC = b"TNN1"
MODEL_VERSION = 1
N_CLASSES = 3
KERNEL = 5
CONV_FILTERS = (6, 16)
HIDDEN = (120, 84)

# parameter order on disk and in ``CnnModel.params``
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b")


class ShapeMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class MalformedModelFile(ValueError):
    pass


class VersionMismatch(MalformedModelFile):
    pass


def feature_shape(input_shape: tuple[int, int]) -> tuple[int, int, int]:
    """(rows, cols, channels) reaching the first fully-connected layer."""
    h, w = input_shape
    for _ in CONV_FILTERS:
        h, w = (h - KERNEL + 1), (w - KERNEL + 1)
        if h <= 0 or w <= 0 or h % 2 or w % 2:
            raise ShapeMismatch(f"input {input_shape} does not fit the conv/pool chain")
        h, w = h // 2, w // 2
    return h, w, CONV_FILTERS[-1]


def param_shapes(input_shape: tuple[int, int]) -> dict[str, tuple[int, ...]]:
    fh, fw, fc = feature_shape(input_shape)
    c1, c2 = CONV_FILTERS
    h1, h2 = HIDDEN
    return {
        "conv1_w": (c1, 1, KERNEL, KERNEL), "conv1_b": (c1,),
        "conv2_w": (c2, c1, KERNEL, KERNEL), "conv2_b": (c2,),
        "fc1_w": (h1, fh * fw * fc), "fc1_b": (h1,),
        "fc2_w": (h2, h1), "fc2_b": (h2,),
        "fc3_w": (N_CLASSES, h2), "fc3_b": (N_CLASSES,),
    }


@dataclass(eq=False)
class CnnModel:
    input_shape: tuple[int, int]
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shapes = param_shapes(self.input_shape)
        if set(self.params) != set(shapes):
            raise ShapeMismatch("parameter set does not match the architecture")
        for k, s in shapes.items():
            p = np.ascontiguousarray(self.params[k], dtype=np.float64)
            if p.shape != s:
                raise ShapeMismatch(f"{k}: shape {p.shape}, expected {s}")
            self.params[k] = p

    @classmethod
    def init(cls, seed: int, input_shape: tuple[int, int] = (HEATMAP_HEIGHT, HEATMAP_WIDTH)) -> "CnnModel":
        """He-normal weights (fan-in scaled), zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for k, s in param_shapes(input_shape).items():
            if k.endswith("_b"):
                params[k] = np.zeros(s)
            else:
                fan_in = int(np.prod(s[1:]))
                params[k] = rng.standard_normal(s) * np.sqrt(2.0 / fan_in)
        return cls(input_shape, params)

    @classmethod
    def zeros(cls, input_shape: tuple[int, int] = (HEATMAP_HEIGHT, HEATMAP_WIDTH)) -> "CnnModel":
        return cls(input_shape, {k: np.zeros(s) for k, s in param_shapes(input_shape).items()})

    def copy(self) -> "CnnModel":
        return CnnModel(self.input_shape, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()


# -- layers -----------------------------------------------------------------
# Activations are channel-major, (channels, batch, rows, cols), so every
# im2col row is one contiguous slice copy.

def _im2col(x: np.ndarray) -> np.ndarray:
    """(c, n, h, w) -> (c*k*k, n*h'*w'), rows ordered (c, kr, kc)."""
    c, n, h, w = x.shape
    oh, ow = h - KERNEL + 1, w - KERNEL + 1
    cols = np.empty((c, KERNEL, KERNEL, n, oh, ow))
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[:, i, j] = x[:, :, i:i + oh, j:j + ow]
    return cols.reshape(c * KERNEL * KERNEL, n * oh * ow)


def _conv_forward(x, w, b):
    _, n, h, wd = x.shape
    cols = _im2col(x)
    out = w.reshape(len(w), -1) @ cols
    out += b[:, None]
    return out.reshape(len(w), n, h - KERNEL + 1, wd - KERNEL + 1), cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    f = len(w)
    d2 = dout.reshape(f, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    c, n, h, wd = x_shape
    oh, ow = h - KERNEL + 1, wd - KERNEL + 1
    dcols = (w.reshape(f, -1).T @ d2).reshape(c, KERNEL, KERNEL, n, oh, ow)
    dx = np.zeros(x_shape)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, :, i:i + oh, j:j + ow] += dcols[:, i, j]
    return dx, dw, db


def _pool_forward(x):
    """2x2 max pool; the mask routes each gradient to the first maximal cell."""
    q = (x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for part in q:
        m = (part == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, masks, x_shape):
    dx = np.zeros(x_shape)
    dx[..., 0::2, 0::2] = dout * masks[0]
    dx[..., 0::2, 1::2] = dout * masks[1]
    dx[..., 1::2, 0::2] = dout * masks[2]
    dx[..., 1::2, 1::2] = dout * masks[3]
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_input(model: CnnModel, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"input {images.shape[1:]} does not match model input {model.input_shape}")
    x = images.astype(np.float64)
    x /= 255.0
    return x[None]


def _forward(model: CnnModel, x: np.ndarray, keep: bool = False):
    p = model.params
    n = x.shape[1]
    a1, cols1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
    q1, m1 = _pool_forward(np.maximum(a1, 0.0))
    a2, cols2 = _conv_forward(q1, p["conv2_w"], p["conv2_b"])
    q2, m2 = _pool_forward(np.maximum(a2, 0.0))
    f0 = q2.transpose(1, 0, 2, 3).reshape(n, -1)
    h1 = np.maximum(f0 @ p["fc1_w"].T + p["fc1_b"], 0.0)
    h2 = np.maximum(h1 @ p["fc2_w"].T + p["fc2_b"], 0.0)
    logits = h2 @ p["fc3_w"].T + p["fc3_b"]
    cache = {}
    if keep:
        cache = dict(x_shape=x.shape, cols1=cols1, a1=a1, m1=m1, q1_shape=q1.shape, cols2=cols2,
                     a2=a2, m2=m2, q2_shape=q2.shape, f0=f0, h1=h1, h2=h2)
    return logits, cache


def _backward(model: CnnModel, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    g = {}
    h1, h2, f0 = cache["h1"], cache["h2"], cache["f0"]
    g["fc3_w"] = dlogits.T @ h2
    g["fc3_b"] = dlogits.sum(axis=0)
    d = (dlogits @ p["fc3_w"]) * (h2 > 0)
    g["fc2_w"] = d.T @ h1
    g["fc2_b"] = d.sum(axis=0)
    d = (d @ p["fc2_w"]) * (h1 > 0)
    g["fc1_w"] = d.T @ f0
    g["fc1_b"] = d.sum(axis=0)
    c, n, h, w = cache["q2_shape"]
    d = (d @ p["fc1_w"]).reshape(n, c, h, w).transpose(1, 0, 2, 3)
    d = _pool_backward(d, cache["m2"], cache["a2"].shape) * (cache["a2"] > 0)
    d, g["conv2_w"], g["conv2_b"] = _conv_backward(d, cache["cols2"], p["conv2_w"], cache["q1_shape"])
    d = _pool_backward(d, cache["m1"], cache["a1"].shape) * (cache["a1"] > 0)
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(d, cache["cols1"], p["conv1_w"], cache["x_shape"], need_dx=False)
    return g


def loss_and_grads(model: CnnModel, images: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    x = _as_input(model, images)
    labels = np.asarray(labels, dtype=np.intp)
    logits, cache = _forward(model, x, keep=True)
    prob = _softmax(logits)
    n = len(labels)
    loss = float(-np.log(np.maximum(prob[np.arange(n), labels], 1e-300)).mean())
    dlogits = prob.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, _backward(model, cache, dlogits), prob


# -- inference --------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    probabilities: tuple[float, float, float]
    stage: GraspStage
    t_c_us: int


def predict_proba(model: CnnModel, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    out = np.empty((len(images), N_CLASSES))
    for i in range(0, len(images), chunk):
        logits, _ = _forward(model, _as_input(model, images[i:i + chunk]))
        out[i:i + chunk] = _softmax(logits)
    return out


def predict(model: CnnModel, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Stage codes (argmax) for a stack of heatmaps."""
    if len(images) == 0:
        return np.zeros(0, np.uint8)
    return predict_proba(model, images, chunk).argmax(axis=1).astype(np.uint8)


def forward(model: CnnModel, heatmap: Heatmap) -> Prediction:
    p = predict_proba(model, heatmap.values)[0]
    return Prediction(tuple(float(v) for v in p), GraspStage(int(p.argmax())), heatmap.t_c_us)


def evaluate(model: CnnModel, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(mean cross-entropy, accuracy)."""
    if len(labels) == 0:
        raise EmptyDataset("nothing to evaluate")
    prob = predict_proba(model, images)
    labels = np.asarray(labels, dtype=np.intp)
    loss = float(-np.log(np.maximum(prob[np.arange(len(labels)), labels], 1e-300)).mean())
    return loss, float((prob.argmax(axis=1) == labels).mean())


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("learning rate, batch size, epochs and patience must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: CnnModel
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0


class Adam:
    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.c = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.c
        self.t += 1
        lr = c.learning_rate * np.sqrt(1 - c.beta2 ** self.t) / (1 - c.beta1 ** self.t)
        for k in PARAM_NAMES:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            params[k] -= lr * m / (np.sqrt(v) + c.eps)


def train(model: CnnModel, train_x: np.ndarray, train_y: np.ndarray,
          val_x: np.ndarray | None, val_y: np.ndarray | None, config: TrainConfig,
          log=None) -> TrainResult:
    """Mini-batch Adam on cross-entropy with early stopping on validation loss.

    Epoch 0 in the history is the untrained model. Later epochs report the
    running mean of the mini-batch loss/accuracy for the training columns.
    Without a validation set the training loss drives early stopping.
    Returns a copy holding the best-validation parameters.
    """
    if len(train_y) == 0:
        raise EmptyDataset("training set is empty")
    has_val = val_y is not None and len(val_y) > 0
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    opt = Adam(model.params, config)
    train_y = np.asarray(train_y, dtype=np.intp)

    def val_metrics():
        return evaluate(model, val_x, val_y) if has_val else (float("nan"), float("nan"))

    tl, ta = evaluate(model, train_x, train_y)
    vl, va = val_metrics()
    history = [EpochStats(0, tl, ta, vl, va)]
    best_loss, best_epoch, best = (vl if has_val else tl), 0, model.copy()
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_y))
        loss_sum = correct = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i:i + config.batch_size])
            loss, grads, prob = loss_and_grads(model, train_x[idx], train_y[idx])
            opt.step(model.params, grads)
            loss_sum += loss * len(idx)
            correct += float((prob.argmax(axis=1) == train_y[idx]).sum())
        tl, ta = loss_sum / len(order), correct / len(order)
        vl, va = val_metrics()
        history.append(EpochStats(epoch, tl, ta, vl, va))
        if log:
            log(f"epoch {epoch}: train loss {tl:.4f} acc {ta:.3f}  val loss {vl:.4f} acc {va:.3f}")
        score = vl if has_val else tl
        if score < best_loss:
            best_loss, best_epoch, best, stale = score, epoch, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best, history, best_epoch)


# -- gradient check ---------------------------------------------------------

def gradient_check(model: CnnModel, image: np.ndarray, label: int, n_params: int = 200,
                   step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over ``n_params`` randomly chosen parameters."""
    if n_params < 1:
        raise ValueError("n_params must be positive")
    image = np.asarray(image)[None]
    labels = np.array([label])
    _, grads, _ = loss_and_grads(model, image, labels)
    rng = np.random.default_rng(seed)
    sizes = np.array([model.params[k].size for k in PARAM_NAMES])
    picks = rng.choice(int(sizes.sum()), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = PARAM_NAMES[li]
        p = model.params[name].reshape(-1)
        j = int(flat - offsets[li])
        keep = p[j]
        p[j] = keep + step
        up, _, _ = loss_and_grads(model, image, labels)
        p[j] = keep - step
        down, _, _ = loss_and_grads(model, image, labels)
        p[j] = keep
        num = (up - down) / (2 * step)
        ana = float(grads[name].reshape(-1)[j])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


# -- serialization ----------------------------------------------------------

_HEADER = struct.Struct("<4sHHHH")  # magic, version, input rows, input cols, layer count
_LAYER = struct.Struct("<B4H")  # kind, four dimension fields
_CONV, _POOL, _FC, _RELU = 1, 2, 3, 4


def _descriptor(model: CnnModel) -> list[tuple[int, int, int, int, int]]:
    s = param_shapes(model.input_shape)
    layers = []
    for k in ("conv1_w", "conv2_w"):
        f, c, kh, kw = s[k]
        layers += [(_CONV, c, f, kh, kw), (_RELU, 0, 0, 0, 0), (_POOL, 2, 2, 0, 0)]
    for k in ("fc1_w", "fc2_w", "fc3_w"):
        o, i = s[k]
        layers.append((_FC, i >> 16, i & 0xFFFF, o, 0))
        if k != "fc3_w":
            layers.append((_RELU, 0, 0, 0, 0))
    return layers


def save_model(model: CnnModel, path) -> None:
    """TNN1 layout: header, layer descriptors, u64 parameter count, then
    every parameter tensor as little-endian float64 in ``PARAM_NAMES`` order
    (conv weights as filter, channel, row, col; fc weights as out, in)."""
    layers = _descriptor(model)
    h, w = model.input_shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, h, w, len(layers)))
        for layer in layers:
            fh.write(_LAYER.pack(*layer))
        fh.write(struct.pack("<Q", model.n_params))
        fh.write(model.flat().astype("<f8").tobytes())


def load_model(path) -> CnnModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedModelFile(f"{path}: file shorter than header")
    magic, version, h, w, n_layers = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise MalformedModelFile(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {MODEL_VERSION}")
    try:
        model = CnnModel.zeros((h, w))
    except ShapeMismatch as e:
        raise MalformedModelFile(f"{path}: {e}") from None
    pos = _HEADER.size
    layers = []
    for _ in range(n_layers):
        if pos + _LAYER.size > len(data):
            raise MalformedModelFile(f"{path}: truncated layer table")
        layers.append(_LAYER.unpack_from(data, pos))
        pos += _LAYER.size
    if layers != _descriptor(model):
        raise MalformedModelFile(f"{path}: unsupported architecture")
    if pos + 8 > len(data):
        raise MalformedModelFile(f"{path}: missing parameter count")
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if count != model.n_params or len(data) - pos != 8 * count:
        raise MalformedModelFile(f"{path}: parameter block does not match architecture")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    off = 0
    for k in PARAM_NAMES:
        n = model.params[k].size
        model.params[k] = flat[off:off + n].reshape(model.params[k].shape).copy()
        off += n
    return model


def train_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """(heatmaps, stage codes) from a :class:`neurotac.dataset.SampleSet`."""
    return samples.heatmaps, samples.stages.astype(np.intp)


def stack_heatmaps(heatmaps: Sequence[Heatmap]) -> np.ndarray:
    return np.stack([h.values for h in heatmaps])
