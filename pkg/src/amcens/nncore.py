"""Minimal trainable convolutional classifier.

Forward pass, analytic gradients with respect to parameters and inputs,
inverted dropout, plain mini-batch SGD, and a per-layer multiply-count
estimator. Everything is vectorized over the batch axis; convolutions are
"valid", stride 1, on inputs laid out as a single-channel (l, 2) image.

Float32 is the training default; float64 is required by the gradient-check
test suite and available everywhere via ``precision="f64"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SignalDataset
from .errors import (
    CorruptHeaderError,
    DivergenceError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .seeding import derived_rng, mask_rng

PROB_CLIP = 1e-12
WEIGHTS_FORMAT = "amcens-weights"
WEIGHTS_VERSION = 1
_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_DROPOUT_TAG = 7919


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer; spatial sizes refer to the output."""

    kind: str  # conv | dense | flatten | softmax_output
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    out_height: int = 0
    out_width: int = 0
    dropout_rate: float = 0.0
    activation: str = "none"  # relu | none | softmax


def validate_specs(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ValueError("empty layer spec list")
    if specs[-1].kind != "softmax_output":
        raise ValueError("last layer must be softmax_output")
    if sum(1 for s in specs if s.kind == "softmax_output") != 1:
        raise ValueError("exactly one softmax_output layer allowed")
    for i, s in enumerate(specs):
        if s.kind not in ("conv", "dense", "flatten", "softmax_output"):
            raise ValueError(f"layer {i}: unknown kind {s.kind!r}")
        if not 0.0 <= s.dropout_rate < 1.0:
            raise ValueError(f"layer {i}: dropout_rate must be in [0, 1)")
        if s.kind == "conv":
            kh, kw = s.kernel
            if min(s.in_channels, s.out_channels, kh, kw, s.out_height, s.out_width) < 1:
                raise ValueError(f"layer {i}: conv dims must be positive")
        if s.kind in ("dense", "softmax_output"):
            if min(s.in_channels, s.out_channels) < 1:
                raise ValueError(f"layer {i}: dense dims must be positive")


def build_cnn(
    frame_len: int,
    n_classes: int,
    conv_widths: Sequence[int],
    kernels: Sequence[tuple[int, int]],
    dense_units: int,
    dropout_rate: float = 0.2,
) -> list[LayerSpec]:
    """Conv stack + flatten + ReLU dense + softmax output over n_classes."""
    if len(conv_widths) != len(kernels):
        raise ValueError("conv_widths and kernels must have equal length")
    specs: list[LayerSpec] = []
    c_in, h, w = 1, frame_len, 2
    for c_out, (kh, kw) in zip(conv_widths, kernels):
        oh, ow = h - kh + 1, w - kw + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"kernel ({kh},{kw}) does not fit input ({h},{w})")
        specs.append(
            LayerSpec("conv", c_in, c_out, (kh, kw), oh, ow, dropout_rate, "relu")
        )
        c_in, h, w = c_out, oh, ow
    flat = c_in * h * w
    specs.append(LayerSpec("flatten", c_in, flat))
    specs.append(LayerSpec("dense", flat, dense_units, activation="relu"))
    specs.append(LayerSpec("softmax_output", dense_units, n_classes, activation="softmax"))
    validate_specs(specs)
    return specs


def desk_architecture(frame_len: int = 128, n_classes: int = 8) -> list[LayerSpec]:
    """Reduced-width default: 32/16/8/8 conv filters, dense 64."""
    return build_cnn(
        frame_len,
        n_classes,
        conv_widths=(32, 16, 8, 8),
        kernels=((3, 2), (3, 1), (3, 1), (3, 1)),
        dense_units=64,
    )


def paper_architecture(frame_len: int = 1024, n_classes: int = 24) -> list[LayerSpec]:
    """Full-width variant: 256/128/64/64 conv filters, dense 128."""
    return build_cnn(
        frame_len,
        n_classes,
        conv_widths=(256, 128, 64, 64),
        kernels=((3, 1), (3, 2), (3, 1), (3, 1)),
        dense_units=128,
    )


def tiny_architecture(frame_len: int = 8, n_classes: int = 3, filters: int = 2) -> list[LayerSpec]:
    """Two-filter single-conv model, small enough for finite-difference checks."""
    specs = [
        LayerSpec("conv", 1, filters, (3, 2), frame_len - 2, 1, 0.0, "relu"),
        LayerSpec("flatten", filters, filters * (frame_len - 2)),
        LayerSpec(
            "softmax_output", filters * (frame_len - 2), n_classes, activation="softmax"
        ),
    ]
    validate_specs(specs)
    return specs


def expected_input_shape(specs: Sequence[LayerSpec]) -> tuple[int, int]:
    first = specs[0]
    if first.kind == "conv":
        kh, kw = first.kernel
        return first.out_height + kh - 1, first.out_width + kw - 1
    raise ValueError("first layer must be conv")


@dataclass
class ModelParams:
    """Weights and biases for one classifier; entries are None for flatten."""

    layer_specs: list[LayerSpec]
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    init_seed: int
    precision: str = "f32"

    @property
    def dtype(self):
        return _PRECISIONS[self.precision]

    def copy(self) -> "ModelParams":
        return ModelParams(
            layer_specs=list(self.layer_specs),
            weights=[None if w is None else w.copy() for w in self.weights],
            biases=[None if b is None else b.copy() for b in self.biases],
            init_seed=self.init_seed,
            precision=self.precision,
        )


def init_params(
    specs: Sequence[LayerSpec], init_seed: int, precision: str = "f32"
) -> ModelParams:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    validate_specs(specs)
    if precision not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}")
    dtype = _PRECISIONS[precision]
    rng = np.random.default_rng(init_seed)
    weights: list[np.ndarray | None] = []
    biases: list[np.ndarray | None] = []
    for s in specs:
        if s.kind == "conv":
            kh, kw = s.kernel
            fan_in, fan_out = s.in_channels * kh * kw, s.out_channels * kh * kw
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(s.out_channels, s.in_channels, kh, kw))
            weights.append(w.astype(dtype))
            biases.append(np.zeros(s.out_channels, dtype=dtype))
        elif s.kind in ("dense", "softmax_output"):
            lim = np.sqrt(6.0 / (s.in_channels + s.out_channels))
            w = rng.uniform(-lim, lim, size=(s.in_channels, s.out_channels))
            weights.append(w.astype(dtype))
            biases.append(np.zeros(s.out_channels, dtype=dtype))
        else:
            weights.append(None)
            biases.append(None)
    return ModelParams(list(specs), weights, biases, init_seed, precision)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """(Co, Ci, KH, KW) kernel as a (KH*KW*Ci, Co) GEMM operand matching the
    im2col column layout."""
    co = w.shape[0]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, co))


def _rotated_weight_matrix(w: np.ndarray) -> np.ndarray:
    """(KH*KW*Co, Ci) operand for the transposed convolution used by the
    input-gradient pass: kernel flipped along both spatial axes."""
    ci = w.shape[1]
    return np.ascontiguousarray(
        w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, ci)
    )


def _im2col(a: np.ndarray, kh: int, kw: int, oh: int, ow: int) -> np.ndarray:
    """Channels-last (N, H, W, C) activations to (N*OH*OW, KH*KW*C) columns
    via one copy of an overlapping strided view.

    When the kernel consumes the full width (kw == W, so OW == 1) each window
    is one contiguous span of kh*kw*C elements, which copies much faster.
    """
    n, _, w, c = a.shape
    sn, sh, sw, sc = a.strides
    if ow == 1 and kw == w and a.flags.c_contiguous:
        win = np.lib.stride_tricks.as_strided(
            a, shape=(n, oh, kh * kw * c), strides=(sn, sh, a.itemsize)
        )
        return np.ascontiguousarray(win).reshape(n * oh, kh * kw * c)
    win = np.lib.stride_tricks.as_strided(
        a, shape=(n, oh, ow, kh, kw, c), strides=(sn, sh, sw, sh, sw, sc)
    )
    return np.ascontiguousarray(win).reshape(n * oh * ow, kh * kw * c)


def _conv_input_grad(
    d: np.ndarray, w: np.ndarray, in_shape: tuple[int, int, int, int]
) -> np.ndarray:
    """Gradient wrt a conv layer's input: full correlation of the output
    gradient with the flipped kernel, realized as pad + im2col + GEMM (cheaper
    than scatter-adding overlapping slices)."""
    n, oh, ow, co = d.shape
    _, h, w_in, ci = in_shape
    kh, kw = h - oh + 1, w_in - ow + 1
    pad = np.zeros((n, oh + 2 * (kh - 1), ow + 2 * (kw - 1), co), dtype=d.dtype)
    pad[:, kh - 1 : kh - 1 + oh, kw - 1 : kw - 1 + ow, :] = d
    cols = _im2col(pad, kh, kw, h, w_in)
    return (cols @ _rotated_weight_matrix(w)).reshape(n, h, w_in, ci)


def _forward_batch(
    params: ModelParams,
    X: np.ndarray,
    train: bool,
    dropout_rng: np.random.Generator | None,
    need_cache: bool = True,
) -> tuple[np.ndarray, list[dict]]:
    """Batched forward pass. X is (N, l, 2); returns (probs, per-layer cache).

    Activations flow channels-last as (N, H, W, C) so convolutions reduce to
    a block-copy im2col plus one GEMM per layer. ReLU and inverted dropout
    share one combined keep mask. ``need_cache=False`` skips all gradient
    bookkeeping for pure inference.
    """
    dtype = params.dtype
    n = X.shape[0]
    a = X.reshape(X.shape[0], X.shape[1], X.shape[2], 1)  # (N, H, W, C=1)
    caches: list[dict] = []
    for li, spec in enumerate(params.layer_specs):
        cache: dict = {"shape": a.shape}
        if spec.kind == "conv":
            w, b = params.weights[li], params.biases[li]
            kh, kw = spec.kernel
            oh, ow = spec.out_height, spec.out_width
            cols = _im2col(a, kh, kw, oh, ow)
            z = cols @ _weight_matrix(w)
            z += b
            a = z.reshape(n, oh, ow, spec.out_channels)
            if need_cache:
                cache["cols"] = cols
            dropping = train and spec.dropout_rate > 0.0
            if spec.activation == "relu" and not dropping and not need_cache:
                np.maximum(a, 0, out=a)
            elif spec.activation == "relu" or dropping:
                mask = a > 0 if spec.activation == "relu" else np.ones(a.shape, bool)
                if dropping:
                    drop = dropout_rng.random(a.shape, dtype=dtype) >= spec.dropout_rate
                    np.logical_and(mask, drop, out=mask)
                np.multiply(a, mask, out=a)
                if dropping:
                    a *= dtype(1.0) / dtype(1.0 - spec.dropout_rate)
                if need_cache:
                    cache["mask"] = mask
                    cache["scaled"] = dropping
        elif spec.kind == "flatten":
            a = a.reshape(n, -1)
        elif spec.kind == "dense":
            w, b = params.weights[li], params.biases[li]
            cache["x"] = a
            a = a @ w + b
            if spec.activation == "relu":
                if need_cache:
                    mask = a > 0
                    np.multiply(a, mask, out=a)
                    cache["mask"] = mask
                else:
                    np.maximum(a, 0, out=a)
        elif spec.kind == "softmax_output":
            w, b = params.weights[li], params.biases[li]
            cache["x"] = a
            a = _softmax(a @ w + b)
        cache["out"] = a
        caches.append(cache)
    return a, caches


def _backward_batch(
    params: ModelParams,
    caches: list[dict],
    probs: np.ndarray,
    labels: np.ndarray,
    need_dx: bool = False,
    mean_over_batch: bool = True,
    need_dparams: bool = True,
):
    """Gradients of the cross-entropy loss from a cached forward pass.

    ``labels`` are integer class indices. Returns (dws, dbs, dx) where dx is
    None unless requested; dx comes back in the (N, l, 2) input layout.
    """
    n = probs.shape[0]
    dtype = params.dtype
    d = probs.astype(dtype, copy=True)
    d[np.arange(n), labels] -= dtype(1.0)
    if mean_over_batch:
        d *= dtype(1.0) / dtype(n)

    dws: list[np.ndarray | None] = [None] * len(params.layer_specs)
    dbs: list[np.ndarray | None] = [None] * len(params.layer_specs)
    dx = None
    for li in range(len(params.layer_specs) - 1, -1, -1):
        spec = params.layer_specs[li]
        cache = caches[li]
        last = li == 0
        if spec.kind in ("dense", "softmax_output"):
            if spec.kind == "dense" and spec.activation == "relu":
                d = d * cache["mask"]
            if need_dparams:
                dws[li] = cache["x"].T @ d
                dbs[li] = d.sum(axis=0)
            if not (last and not need_dx):
                d = d @ params.weights[li].T
        elif spec.kind == "flatten":
            d = d.reshape(cache["shape"])
        elif spec.kind == "conv":
            if "mask" in cache:
                d = d * cache["mask"]
                if cache["scaled"]:
                    d *= dtype(1.0) / dtype(1.0 - spec.dropout_rate)
            kh, kw = spec.kernel
            oh, ow = spec.out_height, spec.out_width
            ci, co = spec.in_channels, spec.out_channels
            dmat = np.ascontiguousarray(d).reshape(n * oh * ow, co)
            if need_dparams:
                dwm = cache["cols"].T @ dmat
                dws[li] = dwm.reshape(kh, kw, ci, co).transpose(3, 2, 0, 1)
                dbs[li] = dmat.sum(axis=0)
            if not last or need_dx:
                d = _conv_input_grad(
                    dmat.reshape(n, oh, ow, co),
                    params.weights[li],
                    cache["shape"],
                )
        if last:
            dx = d.reshape(d.shape[0], d.shape[1], d.shape[2]) if need_dx else None
    return dws, dbs, dx


def _check_frame(params: ModelParams, frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=params.dtype)
    expected = expected_input_shape(params.layer_specs)
    if frame.shape != expected:
        raise ValueError(f"frame shape {frame.shape} != expected {expected}")
    return frame


def forward(
    params: ModelParams,
    frame: np.ndarray,
    mode: str = "eval",
    dropout_seed: int = 0,
) -> np.ndarray:
    """Class-probability vector for one frame. Eval mode is deterministic;
    train mode applies inverted dropout seeded by ``dropout_seed``."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    frame = _check_frame(params, frame)
    rng = mask_rng(dropout_seed) if mode == "train" else None
    probs, _ = _forward_batch(params, frame[None], mode == "train", rng, need_cache=False)
    return probs[0]


def forward_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Deterministic eval-mode probabilities for a stack of frames."""
    X = np.asarray(X, dtype=params.dtype)
    probs, _ = _forward_batch(params, X, False, None, need_cache=False)
    return probs


def loss(probs: np.ndarray, label: np.ndarray) -> float:
    """Cross entropy -sum_j y_j log(clip(p_j)) for one prediction."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLIP, 1.0)
    y = np.asarray(label, dtype=np.float64)
    return float(-(y * np.log(p)).sum())


def _label_index(label) -> int:
    arr = np.asarray(label)
    if arr.ndim == 0:
        return int(arr)
    return int(np.argmax(arr))


def param_gradients(
    params: ModelParams,
    frame: np.ndarray,
    label,
    dropout_seed: int | None = None,
):
    """Loss gradients for every weight and bias on one (frame, label) pair.

    ``dropout_seed=None`` disables dropout (eval-mode gradients); an integer
    seed applies the same masks a seeded train-mode forward pass would.
    """
    frame = _check_frame(params, frame)
    train = dropout_seed is not None
    rng = mask_rng(dropout_seed) if train else None
    probs, caches = _forward_batch(params, frame[None], train, rng)
    y = np.array([_label_index(label)])
    dws, dbs, _ = _backward_batch(params, caches, probs, y, need_dx=False)
    return dws, dbs


def input_gradient(params: ModelParams, frame: np.ndarray, label) -> np.ndarray:
    """Gradient of the loss with respect to the (l, 2) input, eval mode."""
    frame = _check_frame(params, frame)
    probs, caches = _forward_batch(params, frame[None], False, None)
    y = np.array([_label_index(label)])
    _, _, dx = _backward_batch(
        params, caches, probs, y, need_dx=True, need_dparams=False
    )
    return dx[0]


def input_gradient_batch(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample input gradients for a stack of frames (gradients do not mix
    across the batch axis, so one backward pass yields all of them)."""
    X = np.asarray(X, dtype=params.dtype)
    probs, caches = _forward_batch(params, X, False, None)
    _, _, dx = _backward_batch(
        params,
        caches,
        probs,
        np.asarray(y, dtype=np.int64),
        need_dx=True,
        mean_over_batch=False,
        need_dparams=False,
    )
    return dx


def sgd_update(params: ModelParams, dws, dbs, learning_rate: float) -> None:
    """In-place theta <- theta - lr * g. Exactly a no-op at lr == 0."""
    lr = params.dtype(learning_rate)
    for li in range(len(params.layer_specs)):
        if dws[li] is not None:
            params.weights[li] -= lr * dws[li].astype(params.dtype, copy=False)
            params.biases[li] -= lr * dbs[li].astype(params.dtype, copy=False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.01
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def train_arrays(
    params: ModelParams, X: np.ndarray, y: np.ndarray, cfg: TrainConfig
) -> tuple[ModelParams, list[float]]:
    """Mini-batch SGD on (X, y) arrays; returns trained params + loss trace.

    Per-epoch shuffling and per-batch dropout masks derive from
    ``cfg.shuffle_seed``, so a run is reproducible bit for bit.
    """
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    params = params.copy()
    X = np.asarray(X, dtype=params.dtype)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        perm = derived_rng(cfg.shuffle_seed, epoch).permutation(n)
        batch_losses = []
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            rng = mask_rng(cfg.shuffle_seed, epoch, step, _DROPOUT_TAG)
            probs, caches = _forward_batch(params, X[idx], True, rng)
            p_true = probs[np.arange(idx.size), y[idx]].astype(np.float64)
            batch_losses.append(float(-np.log(np.clip(p_true, PROB_CLIP, 1.0)).mean()))
            dws, dbs, _ = _backward_batch(params, caches, probs, y[idx])
            sgd_update(params, dws, dbs, cfg.learning_rate)
        epoch_loss = float(np.mean(batch_losses))
        if not np.isfinite(epoch_loss):
            raise DivergenceError(f"epoch {epoch}: mean loss {epoch_loss}")
        trace.append(epoch_loss)
    return params, trace


def train(
    params: ModelParams, train_set: SignalDataset, cfg: TrainConfig
) -> tuple[ModelParams, list[float]]:
    """SGD training on a SignalDataset; see ``train_arrays``."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    X, y = train_set.as_xy(params.dtype)
    return train_arrays(params, X, y, cfg)


def flop_count(specs: Sequence[LayerSpec]) -> int:
    """Multiply count: conv layers contribute Cin*Cout*Kw*Kh*H*W on output
    spatial size; dense layers (the softmax output included) contribute
    in*out. Flatten is free."""
    total = 0
    for s in specs:
        if s.kind == "conv":
            kh, kw = s.kernel
            total += s.in_channels * s.out_channels * kw * kh * s.out_height * s.out_width
        elif s.kind in ("dense", "softmax_output"):
            total += s.in_channels * s.out_channels
    return total


def save_model(params: ModelParams, path: str | Path) -> None:
    """Weight file: one-line JSON manifest + raw little-endian float payload
    in the stored precision."""
    path = Path(path)
    itemsize = np.dtype(params.dtype).itemsize
    tensors = []
    offset = 0
    blobs = []
    for li in range(len(params.layer_specs)):
        for kind, arr in (("weight", params.weights[li]), ("bias", params.biases[li])):
            if arr is None:
                continue
            tensors.append(
                {"layer": li, "kind": kind, "shape": list(arr.shape), "offset": offset}
            )
            blob = np.ascontiguousarray(arr, dtype=f"<f{itemsize}").tobytes()
            blobs.append(blob)
            offset += len(blob)
    manifest = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "precision": params.precision,
        "init_seed": params.init_seed,
        "layer_specs": [asdict(s) for s in params.layer_specs],
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_model(path: str | Path) -> ModelParams:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != WEIGHTS_FORMAT:
        raise CorruptHeaderError(f"{path}: not a weights file")
    if manifest.get("version") != WEIGHTS_VERSION:
        raise VersionMismatchError(
            f"{path}: version {manifest.get('version')!r}, supported {WEIGHTS_VERSION}"
        )
    precision = manifest["precision"]
    if precision not in _PRECISIONS:
        raise CorruptHeaderError(f"{path}: unknown precision {precision!r}")
    dtype = _PRECISIONS[precision]
    itemsize = np.dtype(dtype).itemsize
    specs = []
    for d in manifest["layer_specs"]:
        d = dict(d)
        d["kernel"] = tuple(d["kernel"])
        specs.append(LayerSpec(**d))
    weights: list[np.ndarray | None] = [None] * len(specs)
    biases: list[np.ndarray | None] = [None] * len(specs)
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, end = t["offset"], t["offset"] + count * itemsize
        if end > len(payload):
            raise TruncatedPayloadError(f"{path}: tensor at offset {start} truncated")
        arr = np.frombuffer(payload[start:end], dtype=f"<f{itemsize}").reshape(shape)
        arr = arr.astype(dtype)
        if t["kind"] == "weight":
            weights[t["layer"]] = arr
        else:
            biases[t["layer"]] = arr
    return ModelParams(specs, weights, biases, int(manifest["init_seed"]), precision)
