"""Minimal feed-forward network trainer for the defender's classifier.

Dense float64 tensors (numpy), plain SGD over minibatches, softmax
cross-entropy with hard or soft (mixed) labels. Everything is a pure
function of its seeds so training runs are bit-reproducible, and the
analytic gradients are small enough to be checked against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from poisonpool.seeding import rng_from

KERNEL_SIZE = 3


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor: input dims, optional conv front-end, hidden widths, class count.

    Archs: "mlp" flattens straight into dense layers; "conv" puts a single
    3x3 conv in front; "conv_pool" additionally average-pools the conv map
    into a coarse grid of avg_pool-sized cells, which blurs exact pixel
    positions before classification.
    """

    input_shape: tuple[int, int, int]  # (channels, height, width)
    classes: int
    hidden: tuple[int, ...] = (128,)
    arch: str = "mlp"
    conv_filters: int = 8
    avg_pool: int = 4

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.arch not in ("mlp", "conv", "conv_pool"):
            raise ValueError(f"arch must be 'mlp', 'conv' or 'conv_pool', got {self.arch!r}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.arch in ("conv", "conv_pool"):
            c, h, w = self.input_shape
            if h < KERNEL_SIZE or w < KERNEL_SIZE:
                raise ValueError(f"conv arch needs input >= {KERNEL_SIZE}x{KERNEL_SIZE}, got {h}x{w}")
            if self.conv_filters < 1:
                raise ValueError(f"conv_filters must be >= 1, got {self.conv_filters}")
        if self.arch == "conv_pool" and self.avg_pool < 1:
            raise ValueError(f"avg_pool must be >= 1, got {self.avg_pool}")


@dataclass(frozen=True)
class TrainRegimen:
    """SGD schedule: epochs, batch size, learning rate, shuffle seed."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class Model:
    """A trained or freshly initialized network: spec plus parameter arrays.

    ``params`` alternates (weight, bias) per layer. For the conv variant the
    first weight is the kernel stack with shape (filters, channels, 3, 3);
    dense weights have shape (fan_in, fan_out).
    """

    spec: ModelSpec
    params: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "Model":
        return Model(self.spec, [p.copy() for p in self.params])

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params)


def _conv_map_shape(spec: ModelSpec) -> tuple[int, int]:
    _, h, w = spec.input_shape
    return h - KERNEL_SIZE + 1, w - KERNEL_SIZE + 1


def _pool_grid(spec: ModelSpec) -> tuple[int, int]:
    h2, w2 = _conv_map_shape(spec)
    return -(-h2 // spec.avg_pool), -(-w2 // spec.avg_pool)  # ceil-mode cells


def _layer_dims(spec: ModelSpec) -> list[tuple[int, int]]:
    """Dense (fan_in, fan_out) pairs after the optional conv front-end."""
    c, h, w = spec.input_shape
    if spec.arch == "conv":
        h2, w2 = _conv_map_shape(spec)
        flat = spec.conv_filters * h2 * w2
    elif spec.arch == "conv_pool":
        gh, gw = _pool_grid(spec)
        flat = spec.conv_filters * gh * gw
    else:
        flat = c * h * w
    widths = [flat, *spec.hidden, spec.classes]
    return list(zip(widths[:-1], widths[1:]))


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize all parameters uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    rng = rng_from(seed)
    params: list[np.ndarray] = []
    if spec.arch in ("conv", "conv_pool"):
        c = spec.input_shape[0]
        fan_in = c * KERNEL_SIZE * KERNEL_SIZE
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(spec.conv_filters, c, KERNEL_SIZE, KERNEL_SIZE)))
        params.append(rng.uniform(-bound, bound, size=spec.conv_filters))
    for fan_in, fan_out in _layer_dims(spec):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=fan_out))
    return Model(spec, params)


def _as_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    """Validate batch dims against the model input and return it as (B, c, H, W)."""
    x = np.asarray(batch, dtype=np.float64)
    c, h, w = model.spec.input_shape
    if x.ndim == 2:
        if x.shape[1] != c * h * w:
            raise ValueError(f"batch has {x.shape[1]} features, model expects {c * h * w} ({c}x{h}x{w})")
        x = x.reshape(x.shape[0], c, h, w)
    elif x.ndim == 4:
        if x.shape[1:] != (c, h, w):
            raise ValueError(f"batch images have shape {x.shape[1:]}, model expects {(c, h, w)}")
    else:
        raise ValueError(f"batch must be 2-d or 4-d, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")
    return x


def _im2col(x: np.ndarray) -> np.ndarray:
    """Extract 3x3 valid patches: (B, c, H, W) -> (B, H'W', c*9)."""
    b, c, h, w = x.shape
    h2, w2 = h - KERNEL_SIZE + 1, w - KERNEL_SIZE + 1
    cols = np.empty((b, c, KERNEL_SIZE, KERNEL_SIZE, h2, w2))
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            cols[:, :, i, j] = x[:, :, i : i + h2, j : j + w2]
    return cols.reshape(b, c * KERNEL_SIZE * KERNEL_SIZE, h2 * w2).transpose(0, 2, 1)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Scatter-add patch gradients back to image gradients (inverse of _im2col)."""
    b, c, h, w = shape
    h2, w2 = h - KERNEL_SIZE + 1, w - KERNEL_SIZE + 1
    dc = dcols.transpose(0, 2, 1).reshape(b, c, KERNEL_SIZE, KERNEL_SIZE, h2, w2)
    dx = np.zeros(shape)
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            dx[:, :, i : i + h2, j : j + w2] += dc[:, :, i, j]
    return dx


def _pool_cells(spec: ModelSpec) -> list[tuple[int, int, int, int]]:
    """Ceil-mode cell bounds (r0, r1, c0, c1) over the conv map."""
    h2, w2 = _conv_map_shape(spec)
    ps = spec.avg_pool
    gh, gw = _pool_grid(spec)
    return [
        (i * ps, min((i + 1) * ps, h2), j * ps, min((j + 1) * ps, w2))
        for i in range(gh)
        for j in range(gw)
    ]


def _forward_cache(model: Model, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the net and keep the intermediates needed for the backward pass."""
    cache: dict = {"x": x}
    params = model.params
    idx = 0
    if model.spec.arch in ("conv", "conv_pool"):
        kernel, kbias = params[0], params[1]
        idx = 2
        cols = _im2col(x)
        kmat = kernel.reshape(kernel.shape[0], -1)
        zc = cols @ kmat.T + kbias
        ac = np.maximum(zc, 0.0)
        cache["cols"], cache["zc"] = cols, zc
        if model.spec.arch == "conv_pool":
            h2, w2 = _conv_map_shape(model.spec)
            amap = ac.reshape(x.shape[0], h2, w2, -1)
            pooled = np.stack(
                [amap[:, r0:r1, c0:c1].mean(axis=(1, 2)) for r0, r1, c0, c1 in _pool_cells(model.spec)],
                axis=1,
            )
            a = pooled.reshape(x.shape[0], -1)
        else:
            a = ac.reshape(x.shape[0], -1)
    else:
        a = x.reshape(x.shape[0], -1)
    cache["dense_in"] = []
    cache["dense_z"] = []
    n_dense = (len(params) - idx) // 2
    for layer in range(n_dense):
        w, b = params[idx + 2 * layer], params[idx + 2 * layer + 1]
        cache["dense_in"].append(a)
        z = a @ w + b
        if layer < n_dense - 1:
            cache["dense_z"].append(z)
            a = np.maximum(z, 0.0)
        else:
            a = z
    return a, cache


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (B, classes). Deterministic for fixed model and batch."""
    x = _as_batch(model, batch)
    logits, _ = _forward_cache(model, x)
    if not np.all(np.isfinite(logits)):
        raise ValueError("forward produced non-finite logits")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"hard labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def _check_label_rows(labels: np.ndarray, batch_size: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (batch_size, classes):
        raise ValueError(f"label matrix has shape {labels.shape}, expected {(batch_size, classes)}")
    sums = labels.sum(axis=1)
    bad = np.abs(sums - 1.0) > 1e-6
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"label row {i} sums to {sums[i]!r}, expected 1 within 1e-6")
    return labels


def loss_and_grad(model: Model, batch: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean softmax cross-entropy and gradients w.r.t. every parameter array.

    ``labels`` is a (B, classes) matrix of probability rows; hard labels must
    be one-hot encoded first. Gradient list matches ``model.params`` in order
    and shape.
    """
    x = _as_batch(model, batch)
    y = _check_label_rows(labels, x.shape[0], model.spec.classes)
    logits, cache = _forward_cache(model, x)
    probs = softmax(logits)
    eps = 1e-300  # guards log(0) only; probs are strictly positive in exact arithmetic
    loss = float(-np.sum(y * np.log(probs + eps)) / x.shape[0])

    grads: list[np.ndarray] = [np.empty(0)] * len(model.params)
    idx = 2 if model.spec.arch in ("conv", "conv_pool") else 0
    n_dense = (len(model.params) - idx) // 2
    delta = (probs - y) / x.shape[0]
    for layer in range(n_dense - 1, -1, -1):
        a_in = cache["dense_in"][layer]
        grads[idx + 2 * layer] = a_in.T @ delta
        grads[idx + 2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.params[idx + 2 * layer].T) * (cache["dense_z"][layer - 1] > 0)
    if idx:
        kernel = model.params[0]
        dflat = delta @ model.params[idx].T if n_dense else delta
        if model.spec.arch == "conv_pool":
            b = x.shape[0]
            filters = model.spec.conv_filters
            cells = _pool_cells(model.spec)
            h2, w2 = _conv_map_shape(model.spec)
            dpool = dflat.reshape(b, len(cells), filters)
            dmap = np.zeros((b, h2, w2, filters))
            for k, (r0, r1, c0, c1) in enumerate(cells):
                dmap[:, r0:r1, c0:c1] += dpool[:, k, None, None, :] / ((r1 - r0) * (c1 - c0))
            dac = dmap.reshape(cache["zc"].shape)
        else:
            dac = dflat.reshape(cache["zc"].shape)
        dzc = dac * (cache["zc"] > 0)
        grads[0] = np.einsum("bpk,bpf->fk", cache["cols"], dzc).reshape(kernel.shape)
        grads[1] = dzc.sum(axis=(0, 1))
    return loss, grads


def predict(model: Model, batch: np.ndarray) -> np.ndarray:
    """Argmax class index per row; ties resolve to the lowest class index."""
    return np.argmax(forward(model, batch), axis=1)


def _soft_labels(labels: np.ndarray, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return one_hot(labels, classes)
    return _check_label_rows(labels, n, classes)


def train_with_history(
    model: Model, images: np.ndarray, labels: np.ndarray, regimen: TrainRegimen
) -> tuple[Model, list[float]]:
    """SGD training; returns the trained model and the mean loss of each epoch.

    Pure in (model, data, regimen): identical inputs give bit-identical
    parameters. The input model is not mutated.
    """
    x = _as_batch(model, np.asarray(images, dtype=np.float64))
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    y = _soft_labels(labels, n, model.spec.classes)
    trained = model.copy()
    rng = rng_from(regimen.shuffle_seed)
    history: list[float] = []
    for _ in range(regimen.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, regimen.batch_size):
            sel = order[start : start + regimen.batch_size]
            loss, grads = loss_and_grad(trained, x[sel], y[sel])
            for p, g in zip(trained.params, grads):
                p -= regimen.learning_rate * g
            epoch_losses.append(loss * sel.size)
        history.append(float(sum(epoch_losses) / n))
    return trained, history


def train(model: Model, images: np.ndarray, labels: np.ndarray, regimen: TrainRegimen) -> Model:
    """SGD-train a copy of ``model``; see train_with_history."""
    trained, _ = train_with_history(model, images, labels, regimen)
    return trained


def with_shuffle_seed(regimen: TrainRegimen, seed: int) -> TrainRegimen:
    return replace(regimen, shuffle_seed=seed)
