# segmentation/unet.py
"""
U-Net builders (3D patch segmenter / localizer and 2D slice network), the
network executor with skip wiring, checkpoints and the training loop.
"""

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from disc_segmentation.utils import derive_seed

from .exceptions import ContractError, FormatError, ShapeError, StateError, TrainingError
from .nn import AdamState, LayerSpec, Tensor, adam_step, build_layer, dice_loss

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCK1"
HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss"]


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    in_channels: int
    base_channels: int
    depth: int
    dims: int

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ContractError(f"Networks are 2D or 3D, got {self.dims}.", field="dims")
        seen = set()
        for layer in self.layers:
            if layer.kind == "concat" and layer.source not in seen:
                raise ContractError(f"Concat {layer.name!r} refers to a later or unknown layer {layer.source!r}.", field="source")
            if layer.name in seen:
                raise ContractError(f"Duplicate layer name {layer.name!r}.", field="name")
            seen.add(layer.name)
        if not self.layers or self.layers[-1].kind != "sigmoid":
            raise ContractError("The final layer must be a sigmoid.", field="layers")
        infer_shapes(self, (1, self.in_channels) + (2 ** self.depth,) * self.dims)
        if self.out_channels != 1:
            raise ContractError(f"Networks emit one channel, got {self.out_channels}.", field="layers")

    @property
    def out_channels(self):
        return [layer for layer in self.layers if layer.kind == "conv"][-1].out_channels

    @property
    def multiple(self):
        return 2 ** self.depth

    def to_text(self):
        return json.dumps(
            {
                "in_channels": self.in_channels,
                "base_channels": self.base_channels,
                "depth": self.depth,
                "dims": self.dims,
                "layers": [layer.to_dict() for layer in self.layers],
            },
            sort_keys=True,
        )

    @classmethod
    def from_text(cls, text):
        data = json.loads(text)
        layers = tuple(LayerSpec.from_dict(layer) for layer in data.pop("layers"))
        return cls(layers=layers, **data)


# --- Builders ---

class _Chain:
    def __init__(self, nd):
        self.nd = nd
        self.layers = []

    def add(self, kind, name, **kwargs):
        self.layers.append(LayerSpec(kind=kind, name=name, **kwargs))

    def conv_relu(self, name, cin, cout):
        self.add("conv", name, in_channels=cin, out_channels=cout, kernel=(3,) * self.nd)
        self.add("relu", f"{name}_relu")


def build_unet3d(in_channels=3, base=32, dropout=0.2, batchnorm_affine=False):
    """
    Three-level 3D U-Net: (conv, dropout, conv) blocks with base, 2*base and
    4*base channels, 2x max pooling between levels, transposed-convolution
    upsampling that halves channels, skip concatenation, one batchnorm and a
    1x1x1 sigmoid output conv. Spatial dims must be divisible by 4.
    """
    if not 1 <= in_channels <= 4:
        raise ContractError(f"in_channels must be within [1, 4], got {in_channels}.", field="in_channels")
    chain = _Chain(3)
    channels = [base, 2 * base, 4 * base]

    previous = in_channels
    for level, width in enumerate(channels, start=1):
        chain.conv_relu(f"enc{level}a", previous, width)
        chain.add("dropout", f"enc{level}_drop", rate=dropout)
        chain.conv_relu(f"enc{level}b", width, width)
        if level < len(channels):
            chain.add("maxpool", f"pool{level}", window=2)
        previous = width

    for level in range(len(channels) - 1, 0, -1):
        width = channels[level - 1]
        chain.add("tconv", f"up{level}", in_channels=previous, out_channels=width, kernel=(2, 2, 2), stride=2)
        chain.add("concat", f"cat{level}", source=f"enc{level}b_relu")
        chain.conv_relu(f"dec{level}a", 2 * width, width)
        chain.add("dropout", f"dec{level}_drop", rate=dropout)
        chain.conv_relu(f"dec{level}b", width, width)
        previous = width

    chain.add("batchnorm", "norm", in_channels=previous, affine=batchnorm_affine)
    chain.add("conv", "head", in_channels=previous, out_channels=1, kernel=(1, 1, 1))
    chain.add("sigmoid", "output")
    return NetworkSpec(tuple(chain.layers), in_channels, base, depth=len(channels) - 1, dims=3)


def build_unet2d(in_channels=1, base=64):
    """Four encoder blocks (base..8*base), a 16*base bottleneck and a mirrored decoder."""
    if in_channels < 1:
        raise ContractError(f"in_channels must be >= 1, got {in_channels}.", field="in_channels")
    chain = _Chain(2)
    widths = [base * 2 ** level for level in range(5)]

    previous = in_channels
    for level, width in enumerate(widths, start=1):
        chain.conv_relu(f"enc{level}a", previous, width)
        chain.conv_relu(f"enc{level}b", width, width)
        if level < len(widths):
            chain.add("maxpool", f"pool{level}", window=2)
        previous = width

    for level in range(len(widths) - 1, 0, -1):
        width = widths[level - 1]
        chain.add("tconv", f"up{level}", in_channels=previous, out_channels=width, kernel=(2, 2), stride=2)
        chain.add("concat", f"cat{level}", source=f"enc{level}b_relu")
        chain.conv_relu(f"dec{level}a", 2 * width, width)
        chain.conv_relu(f"dec{level}b", width, width)
        previous = width

    chain.add("conv", "head", in_channels=previous, out_channels=1, kernel=(1, 1))
    chain.add("sigmoid", "output")
    return NetworkSpec(tuple(chain.layers), in_channels, base, depth=len(widths) - 1, dims=2)


# --- Shapes and parameters ---

def layer_param_shapes(layer, nd):
    if layer.kind == "conv":
        kernel = layer.kernel or (3,) * nd
        return [(layer.out_channels, layer.in_channels) + kernel, (layer.out_channels,)]
    if layer.kind == "tconv":
        kernel = layer.kernel or (2,) * nd
        return [(layer.in_channels, layer.out_channels) + kernel, (layer.out_channels,)]
    if layer.kind == "batchnorm" and layer.affine:
        return [(layer.in_channels,), (layer.in_channels,)]
    return []


def infer_shapes(spec, input_shape):
    """Output shape of every layer for `input_shape` (N, C, *S), without computing anything."""
    shape = tuple(input_shape)
    if len(shape) != spec.dims + 2 or shape[1] != spec.in_channels:
        raise ShapeError(f"Input {shape} does not match a {spec.dims}D network with {spec.in_channels} channels.", field="shape")
    if any(size % spec.multiple for size in shape[2:]):
        raise ShapeError(f"Spatial dims {shape[2:]} must be divisible by {spec.multiple}.", field="shape")
    shapes = {}
    for layer in spec.layers:
        n, c, spatial = shape[0], shape[1], shape[2:]
        if layer.kind in ("conv", "tconv", "batchnorm") and layer.in_channels != c:
            raise ShapeError(f"Layer {layer.name!r} expects {layer.in_channels} channels, gets {c}.", field=layer.name)
        if layer.kind == "conv":
            shape = (n, layer.out_channels) + spatial
        elif layer.kind == "tconv":
            shape = (n, layer.out_channels) + tuple(s * layer.stride for s in spatial)
        elif layer.kind == "maxpool":
            shape = (n, c) + tuple(s // layer.window for s in spatial)
        elif layer.kind == "upsample":
            shape = (n, c) + tuple(s * layer.factor for s in spatial)
        elif layer.kind == "concat":
            skip = shapes[layer.source]
            if skip[2:] != spatial:
                raise ShapeError(f"Concat {layer.name!r} joins {spatial} with {skip[2:]}.", field=layer.name)
            shape = (n, c + skip[1]) + spatial
        shapes[layer.name] = shape
    return shapes


def output_shape(spec, input_shape):
    return infer_shapes(spec, input_shape)[spec.layers[-1].name]


def param_count(net):
    """Exact number of trainable values of a NetworkSpec or Network."""
    spec = net.spec if isinstance(net, Network) else net
    return sum(int(np.prod(shape)) for layer in spec.layers for shape in layer_param_shapes(layer, spec.dims))


# --- Executor ---

class Network:
    def __init__(self, spec, seed=0):
        self.spec = spec
        self.seed = seed
        self.layers = [build_layer(layer, spec.dims, derive_seed(seed, index)) for index, layer in enumerate(spec.layers)]
        self.skip_sources = {layer.source for layer in spec.layers if layer.kind == "concat"}
        self.dtype = np.dtype(np.float32)
        self._skip_channels = {}

    def params(self):
        return [tensor for layer in self.layers for tensor in layer.params()]

    def buffers(self):
        return [buffer for layer in self.layers for buffer in layer.buffers()]

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def zero_grad(self):
        for tensor in self.params():
            tensor.zero_grad()

    def forward(self, x, train=False, rng=None):
        """x: Tensor or array (N, C, *S) -> Tensor of probabilities (N, 1, *S)."""
        values = x.values if isinstance(x, Tensor) else np.asarray(x)
        infer_shapes(self.spec, values.shape)
        out = values.astype(self.dtype, copy=False)
        saved = {}
        for layer in self.layers:
            if layer.spec.kind == "concat":
                skip = saved[layer.spec.source]
                self._skip_channels[layer.name] = out.shape[1]
                out = np.concatenate([out, skip], axis=1)
                layer.cache = True
            else:
                out = layer.forward(out, train=train, rng=rng)
            if layer.name in self.skip_sources:
                saved[layer.name] = out
        return Tensor(out)

    def backward(self, grad_out, x=None):
        """Backpropagate dLoss/dOutput; accumulates parameter grads and returns dLoss/dInput."""
        grad = np.asarray(grad_out, dtype=self.dtype)
        pending = {}
        for layer in reversed(self.layers):
            if layer.name in pending:
                grad = grad + pending.pop(layer.name)
            if layer.spec.kind == "concat":
                if layer.cache is None:
                    raise StateError(f"Layer {layer.name!r} has no forward cache.", field=layer.name)
                split = self._skip_channels[layer.name]
                pending[layer.spec.source] = pending.get(layer.spec.source, 0) + grad[:, split:]
                grad = grad[:, :split]
            else:
                grad = layer.backward(grad)
        if isinstance(x, Tensor):
            x.accumulate(grad.astype(x.values.dtype))
        return grad

    def predict(self, x):
        return self.forward(x, train=False).values

    def get_state(self):
        return [tensor.values.copy() for tensor in self.params()], [buffer.copy() for buffer in self.buffers()]

    def set_state(self, params, buffers=None):
        for tensor, values in zip(self.params(), params):
            tensor.values = np.asarray(values, dtype=self.dtype).reshape(tensor.values.shape)
        for buffer, values in zip(self.buffers(), buffers or []):
            buffer[...] = values


# --- Checkpoints ---

def _atomic_write(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(handle, "wb") as temp:
            temp.write(payload)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def _f32(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def save_checkpoint(path, network, adam=None, progress=None):
    """
    MCK1 layout: magic, u32 length + NetworkSpec text, parameters in spec
    order (f32 LE), buffers (running statistics, f32 LE), u8 Adam flag
    [u32 t, 4 x f64 hyperparameters, moments m then v], u32 length +
    progress JSON.
    """
    text = network.spec.to_text().encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(text)), text]
    chunks += [_f32(tensor.values) for tensor in network.params()]
    chunks += [_f32(buffer) for buffer in network.buffers()]
    if adam is not None and adam.m:
        chunks.append(struct.pack("<BI4d", 1, adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps))
        chunks += [_f32(m) for m in adam.m] + [_f32(v) for v in adam.v]
    else:
        chunks.append(struct.pack("<B", 0))
    progress_text = json.dumps(progress or {}, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(progress_text)), progress_text]
    _atomic_write(path, b"".join(chunks))
    logger.debug("Checkpoint written to %s", path)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.raw):
            raise FormatError(f"Checkpoint truncated while reading {what}.", field=what)
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, shape, what):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path, seed=0):
    """-> (Network, AdamState or None, progress dict)."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("Bad checkpoint magic.", field="magic")
    (length,) = reader.unpack("<I", "spec")
    try:
        spec = NetworkSpec.from_text(reader.take(length, "spec").decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"Unreadable network spec: {exc}.", field="spec") from exc

    network = Network(spec, seed=seed)
    params = [reader.array(tensor.values.shape, "params") for tensor in network.params()]
    buffers = [reader.array(buffer.shape, "buffers") for buffer in network.buffers()]
    network.set_state(params, buffers)

    adam = None
    (has_adam,) = reader.unpack("<B", "adam")
    if has_adam:
        t, lr, beta1, beta2, eps = reader.unpack("<I4d", "adam")
        m = [reader.array(p.shape, "adam") for p in params]
        v = [reader.array(p.shape, "adam") for p in params]
        adam = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=t, m=m, v=v)
    (length,) = reader.unpack("<I", "progress")
    progress = json.loads(reader.take(length, "progress").decode("utf-8")) if length else {}
    return network, adam, progress


# --- Training ---

@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 1
    max_epochs: int = 100
    patience: int = 10
    dropout: float = 0.2
    smoothing: float = 1.0
    seed: int = 0
    mode: str = "reproducible"
    checkpoint_dir: str = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}.", field="batch_size")
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}.", field="lr")
        if self.mode not in ("reproducible", "fast"):
            raise ContractError(f"Unknown mode {self.mode!r}.", field="mode")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def history_csv(self):
        frame = pd.DataFrame(self.history, columns=HISTORY_COLUMNS)
        return frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")


def _batches(dataset, order, batch_size):
    for start in range(0, len(order), batch_size):
        members = [dataset[index] for index in order[start:start + batch_size]]
        yield np.stack([x for x, _ in members]), np.stack([y for _, y in members])


def evaluate_loss(network, dataset, smoothing=1.0, stacked=False):
    """
    Mean (1 - Dice energy) over samples, inference mode. `stacked` runs the
    whole set as one batch (fast mode); per-sample results then agree with
    the one-at-a-time pass to about 1e-5 relative.
    """
    if stacked:
        predictions = network.predict(np.stack([x for x, _ in dataset]))
        pairs = zip(predictions, (y for _, y in dataset))
    else:
        pairs = ((network.predict(x[np.newaxis])[0], y) for x, y in dataset)
    losses = []
    for prediction, y in pairs:
        energy, _ = dice_loss(prediction, y.astype(prediction.dtype), smoothing)
        losses.append(1.0 - energy)
    return float(np.mean(losses))


def fit(network, dataset, cfg, validation=None, validation_split=None, resume=None):
    """
    Minimize 1 - Dice energy with Adam. `dataset` is a list of (x, y) arrays
    shaped (C, *S) and (1, *S). Validation comes from `validation` or the last
    `validation_split` share of `dataset`; without either the train loss
    drives early stopping. Returns a TrainResult; the network ends holding
    the best-validation parameters.
    """
    if not dataset:
        raise ContractError("Training dataset is empty.", field="dataset")
    if validation is None and validation_split is not None:
        if not 0 < validation_split < 1:
            raise ContractError(f"validation_split must be within (0, 1), got {validation_split}.", field="validation_split")
        held_out = max(1, int(round(len(dataset) * validation_split)))
        if held_out >= len(dataset):
            raise ContractError("validation_split leaves no training data.", field="validation_split")
        dataset, validation = dataset[:-held_out], dataset[-held_out:]

    adam = AdamState(lr=cfg.lr)
    result = TrainResult()
    start_epoch, stale = 1, 0
    best_params = network.get_state()
    checkpoint_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None

    if resume is not None:
        restored, restored_adam, progress = load_checkpoint(resume, seed=network.seed)
        network.set_state(*restored.get_state())
        adam = restored_adam or adam
        result.history = [tuple(row) for row in progress.get("history", [])]
        result.best_epoch = progress.get("best_epoch", 0)
        result.best_val_loss = progress.get("best_val_loss", math.inf)
        stale = progress.get("stale", 0)
        start_epoch = progress.get("epoch", 0) + 1
        best_path = progress.get("best_checkpoint")
        best_params = load_checkpoint(best_path)[0].get_state() if best_path and Path(best_path).exists() else network.get_state()
        logger.info("Resumed training at epoch %d from %s", start_epoch, resume)

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(dataset))
        batch_losses = []
        for batch_index, (x, y) in enumerate(_batches(dataset, order, cfg.batch_size)):
            network.zero_grad()
            rng = np.random.default_rng((cfg.seed, epoch, batch_index))
            prediction = network.forward(x, train=True, rng=rng).values
            energy, grad = dice_loss(prediction, y.astype(prediction.dtype), cfg.smoothing)
            loss = 1.0 - energy
            if not math.isfinite(loss):
                raise TrainingError(f"Non-finite loss at epoch {epoch}, batch {batch_index}.", field="loss", epoch=epoch, batch=batch_index)
            network.backward(-grad)
            params = network.params()
            updated, adam = adam_step([p.values for p in params], [p.grad for p in params], adam)
            for tensor, values in zip(params, updated):
                tensor.values = values
            batch_losses.append(loss)

        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate_loss(network, validation, cfg.smoothing, cfg.mode == "fast") if validation else train_loss
        result.history.append((epoch, train_loss, val_loss))

        if val_loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch, stale = val_loss, epoch, 0
            best_params = network.get_state()
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir / "best.mck", network)
        else:
            stale += 1
        logger.info("epoch %d train=%.6f val=%.6f best=%.6f@%d", epoch, train_loss, val_loss, result.best_val_loss, result.best_epoch)

        if checkpoint_dir is not None:
            progress = {
                "epoch": epoch,
                "history": result.history,
                "best_epoch": result.best_epoch,
                "best_val_loss": result.best_val_loss,
                "stale": stale,
                "best_checkpoint": str(checkpoint_dir / "best.mck"),
            }
            save_checkpoint(checkpoint_dir / "last.mck", network, adam, progress)

        if stale > cfg.patience:
            result.stopped_early = True
            logger.info("Early stop at epoch %d (patience %d).", epoch, cfg.patience)
            break

    network.set_state(*best_params)
    return result
