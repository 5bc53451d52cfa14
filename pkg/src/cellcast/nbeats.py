"""Multi-branch N-Beats: generic basis-expansion blocks with doubly residual stacking.

Each branch is a complete N-Beats network that forecasts one channel. All
parameters of a model live in a single flat float64 vector; layers hold views
into it, so checkpointing and the optimizer work on one array.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .neural import (
    DenseLayer,
    OptimizerState,
    TrainingDivergence,
    backward,
    forward,
    glorot_uniform,
    sgd_adam_step,
)
from .preprocess import WindowSet

INPUT_MODES = ("concat", "own")
ANCHORS = ("last", "none")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NBeatsConfig:
    lookback: int = 4
    horizon: int = 2
    n_stacks: int = 2
    blocks_per_stack: int = 3
    fc_layers_per_block: int = 4
    fc_width: int = 64
    theta_dim: int = 8
    n_branches: int = 2
    input_mode: str = "concat"
    anchor: str = "last"

    def __post_init__(self):
        counts = (
            self.lookback, self.horizon, self.n_stacks, self.blocks_per_stack,
            self.fc_layers_per_block, self.fc_width, self.theta_dim, self.n_branches,
        )
        if any(int(c) != c or c < 1 for c in counts):
            raise ValueError(f"all NBeatsConfig sizes must be integers >= 1: {self}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.anchor not in ANCHORS:
            raise ValueError(f"anchor must be one of {ANCHORS}")

    @property
    def branch_input(self) -> int:
        """Width of each branch's input (and backcast)."""
        return self.lookback * (self.n_branches if self.input_mode == "concat" else 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Block:
    trunk: list[DenseLayer]
    theta_b: DenseLayer
    theta_f: DenseLayer
    basis_b: DenseLayer
    basis_f: DenseLayer

    @property
    def layers(self) -> list[DenseLayer]:
        return [*self.trunk, self.theta_b, self.theta_f, self.basis_b, self.basis_f]


@dataclass
class Branch:
    channel: int
    stacks: list[list[Block]]

    @property
    def blocks(self) -> list[Block]:
        return [block for stack in self.stacks for block in stack]


@dataclass
class BranchTrace:
    """Per-block intermediate values of one branch pass.

    ``residuals[0]`` is the branch input; ``residuals[l]`` is the input of
    block ``l`` (0-based) after subtracting every earlier backcast.
    """

    backcasts: list[np.ndarray]
    forecasts: list[np.ndarray]
    residuals: list[np.ndarray]


class NBeatsNet:
    """A multi-branch N-Beats model over an L x channels input window."""

    def __init__(self, config: NBeatsConfig, params: np.ndarray | None = None, seed: int | None = 0):
        self.config = config
        shapes = list(self._layer_shapes())
        size = sum(o * i + o for o, i, _ in shapes)
        self.params = np.zeros(size)
        self.grad = np.zeros(size)
        self._grad_views: dict[int, tuple[np.ndarray, np.ndarray]] = {}

        layers = []
        offset = 0
        for out_dim, in_dim, is_relu in shapes:
            w_end = offset + out_dim * in_dim
            b_end = w_end + out_dim
            layer = DenseLayer(
                self.params[offset:w_end].reshape(out_dim, in_dim), self.params[w_end:b_end], relu=is_relu,
            )
            self._grad_views[id(layer)] = (
                self.grad[offset:w_end].reshape(out_dim, in_dim), self.grad[w_end:b_end],
            )
            layers.append(layer)
            offset = b_end

        it = iter(layers)
        n_trunk = config.fc_layers_per_block
        self.branches = [
            Branch(
                channel=b,
                stacks=[
                    [
                        Block([next(it) for _ in range(n_trunk)], next(it), next(it), next(it), next(it))
                        for _ in range(config.blocks_per_stack)
                    ]
                    for _ in range(config.n_stacks)
                ],
            )
            for b in range(config.n_branches)
        ]
        self.layers = layers

        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != self.params.shape:
                raise CheckpointError(f"expected {self.params.size} parameters, got {params.size}")
            self.params[...] = params
        elif seed is not None:
            rng = np.random.default_rng(seed)
            for layer in layers:
                glorot_uniform(layer, rng)

    def _layer_shapes(self):
        c = self.config
        width_in = c.branch_input
        for _ in range(c.n_branches):
            for _ in range(c.n_stacks * c.blocks_per_stack):
                prev = width_in
                for _ in range(c.fc_layers_per_block):
                    yield c.fc_width, prev, True
                    prev = c.fc_width
                yield c.theta_dim, c.fc_width, False  # theta_b
                yield c.theta_dim, c.fc_width, False  # theta_f
                yield width_in, c.theta_dim, False  # basis_b
                yield c.horizon, c.theta_dim, False  # basis_f

    @property
    def n_params(self) -> int:
        return self.params.size

    def branch_inputs(self, windows: np.ndarray) -> list[np.ndarray]:
        """Split an ``(n, L, C)`` batch into each branch's ``(n, branch_input)`` input."""
        n = windows.shape[0]
        if self.config.input_mode == "concat":
            flat = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(n, -1)
            return [flat] * self.config.n_branches
        return [np.ascontiguousarray(windows[:, :, b]) for b in range(self.config.n_branches)]

    def predict(self, window: np.ndarray) -> np.ndarray:
        """Standardized forecast for an L x C window or an ``(n, L, C)`` batch.

        With ``anchor="last"`` the network sees the window re-centered on its
        last observed value per channel, and that value is added back to the
        forecast; with ``"none"`` this is :func:`model_forward`.
        """
        if self.config.anchor == "none":
            return model_forward(self, window)
        window = np.asarray(window, dtype=np.float64)
        last = window[..., -1:, :]
        return model_forward(self, window - last) + last

    __call__ = predict

    # -- training ---------------------------------------------------------

    def loss_and_grad(self, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
        """Summed per-channel MSE over a batch and its gradient (written to ``self.grad``)."""
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        n, horizon, channels = targets.shape
        loss = 0.0
        self.grad[...] = 0.0
        for branch, x in zip(self.branches, self.branch_inputs(inputs)):
            forecast, caches = _branch_forward_cached(branch, x)
            diff = forecast - targets[:, :, branch.channel]
            loss += float(np.mean(diff * diff))
            self._branch_backward(branch, caches, 2.0 * diff / diff.size)
        return loss, self.grad

    def _branch_backward(self, branch: Branch, caches, d_forecast: np.ndarray) -> None:
        # x_l = x_{l-1} - b_l(x_{l-1}); forecast = sum_l f_l(x_{l-1})
        g = np.zeros_like(caches[0][0])
        for block, cache in zip(reversed(branch.blocks), reversed(caches)):
            layer_grads, dx = _block_backward(block, cache, -g, d_forecast)
            for layer, (dw, db) in zip(block.layers, layer_grads):
                gw, gb = self._grad_views[id(layer)]
                gw += dw
                gb += db
            g = g + dx

    def loss(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        """Same objective as :meth:`loss_and_grad`, forward pass only."""
        pred = model_forward(self, inputs)
        diff = pred - targets
        return float(np.sum(np.mean(diff * diff, axis=(0, 1))))

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        save_checkpoint(self, path, metadata)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _block_forward_cached(block: Block, x: np.ndarray):
    h, trunk_tape = forward(block.trunk, x)
    backcast, tape_b = forward([block.theta_b, block.basis_b], h)
    forecast, tape_f = forward([block.theta_f, block.basis_f], h)
    return backcast, forecast, (x, trunk_tape, tape_b, tape_f)


def _block_backward(block: Block, cache, d_backcast: np.ndarray, d_forecast: np.ndarray):
    _, trunk_tape, tape_b, tape_f = cache
    grads_b, dh_b = backward([block.theta_b, block.basis_b], tape_b, d_backcast)
    grads_f, dh_f = backward([block.theta_f, block.basis_f], tape_f, d_forecast)
    grads_trunk, dx = backward(block.trunk, trunk_tape, dh_b + dh_f)
    # order matches Block.layers
    return [*grads_trunk, grads_b[0], grads_f[0], grads_b[1], grads_f[1]], dx


def block_forward(block: Block, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backcast and forecast of one block for a vector or an ``(n, width)`` batch."""
    backcast, forecast, _ = _block_forward_cached(block, x)
    return backcast, forecast


def _branch_forward_cached(branch: Branch, x: np.ndarray):
    residual = x
    forecast = None
    caches = []
    for block in branch.blocks:
        b, f, cache = _block_forward_cached(block, residual)
        caches.append(cache)
        residual = residual - b
        forecast = f if forecast is None else forecast + f
    return forecast, caches


def branch_forward(branch: Branch, x: np.ndarray) -> tuple[np.ndarray, BranchTrace]:
    x = np.asarray(x, dtype=np.float64)
    trace = BranchTrace([], [], [x])
    forecast = None
    residual = x
    for block in branch.blocks:
        b, f = block_forward(block, residual)
        residual = residual - b
        forecast = f if forecast is None else forecast + f
        trace.backcasts.append(b)
        trace.forecasts.append(f)
        trace.residuals.append(residual)
    return forecast, trace


def model_forward(model: NBeatsNet, window: np.ndarray) -> np.ndarray:
    """Map an L x C window (or an ``(n, L, C)`` batch) to H x C forecasts."""
    window = np.asarray(window, dtype=np.float64)
    single = window.ndim == 2
    batch = window[None] if single else window
    c = model.config
    if batch.ndim != 3 or batch.shape[1:] != (c.lookback, c.n_branches):
        raise ValueError(f"expected window shape ({c.lookback}, {c.n_branches}), got {window.shape}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("non-finite value in model input")
    out = np.empty((batch.shape[0], c.horizon, c.n_branches))
    for branch, x in zip(model.branches, model.branch_inputs(batch)):
        forecast, _ = _branch_forward_cached(branch, x)
        out[:, :, branch.channel] = forecast
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    n_train: int
    n_val: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float | None = None
    stopped_early: bool = False
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _validation_split(windows: WindowSet, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the chronologically last ``fraction`` of training windows."""
    order = sorted(range(len(windows)), key=lambda i: (int(windows.starts[i]), windows.cell_ids[i]))
    n_val = int(fraction * len(order))
    if len(order) - n_val < 1:
        n_val = 0
    order = np.asarray(order, dtype=np.int64)
    return np.sort(order[: len(order) - n_val]), np.sort(order[len(order) - n_val:])


def train_cluster_model(
    windows: WindowSet,
    config: NBeatsConfig | None = None,
    train_config: TrainConfig | None = None,
    seed: int = 0,
) -> tuple[NBeatsNet, TrainingLog]:
    """Fit one model on the training-region windows of a cluster.

    Early stopping restores the parameters with the best validation loss.
    Raises :class:`TrainingDivergence` on a non-finite loss or gradient.
    """
    config = config or NBeatsConfig()
    tc = train_config or TrainConfig()
    windows = windows.select(region="train")
    if len(windows) < 1:
        raise ValueError("no training windows")
    if windows.lookback != config.lookback or windows.horizon != config.horizon:
        raise ValueError("window shape does not match the model config")

    rng = np.random.default_rng(seed)
    model = NBeatsNet(config, seed=int(rng.integers(2**63)))
    state = OptimizerState(model.n_params, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)

    train_idx, val_idx = _validation_split(windows, tc.val_fraction)
    X, Y = windows.inputs, windows.targets
    if config.anchor == "last":
        last = X[:, -1:, :]
        X, Y = X - last, Y - last
    Xv, Yv = X[val_idx], Y[val_idx]
    log = TrainingLog(n_train=len(train_idx), n_val=len(val_idx))
    best_params = model.params.copy()
    best = np.inf
    since_best = 0

    for epoch in range(1, tc.max_epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for start in range(0, len(perm), tc.batch_size):
            batch = perm[start:start + tc.batch_size]
            loss, grad = model.loss_and_grad(X[batch], Y[batch])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite training loss at epoch {epoch}")
            sgd_adam_step(state, model.params, grad)
            total += loss * len(batch)
        train_loss = total / len(perm)
        record = {"epoch": epoch, "train_loss": train_loss}
        if len(val_idx):
            val_loss = model.loss(Xv, Yv)
            if not np.isfinite(val_loss):
                raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
            record["val_loss"] = val_loss
            if val_loss < best:
                best, since_best = val_loss, 0
                best_params[...] = model.params
                log.best_epoch = epoch
            else:
                since_best += 1
        log.epochs.append(record)
        if len(val_idx) and since_best >= tc.patience:
            log.stopped_early = True
            break

    if len(val_idx):
        model.params[...] = best_params
        log.best_val_loss = float(best)
    else:
        log.best_epoch = len(log.epochs)
    log.steps = state.step
    if not np.all(np.isfinite(model.params)):
        raise TrainingDivergence("non-finite parameters after training")
    return model, log


# ---------------------------------------------------------------------------
# Checkpoints: magic, u64 header length, JSON header, little-endian float64 params
# ---------------------------------------------------------------------------

MAGIC = b"CELLCAST-NBEATS\x01"


def save_checkpoint(model: NBeatsNet, path: str | Path, metadata: dict | None = None) -> None:
    header = {
        "config": model.config.to_dict(),
        "config_digest": model.config.digest,
        "n_params": model.n_params,
        "dtype": "<f8",
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
        handle.write(model.params.astype("<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with Path(path).open("rb") as handle:
        return _read_header(handle, path)


def _read_header(handle, path) -> dict:
    if handle.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    (length,) = struct.unpack("<Q", handle.read(8))
    return json.loads(handle.read(length).decode("utf-8"))


def load_checkpoint(path: str | Path, expected: NBeatsConfig | None = None) -> tuple[NBeatsNet, dict]:
    """Load a checkpoint, rejecting it when its config differs from ``expected``."""
    try:
        handle = Path(path).open("rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with handle:
        header = _read_header(handle, path)
        raw = handle.read()
    config = NBeatsConfig(**header["config"])
    if expected is not None and config != expected:
        raise CheckpointError(f"{path}: config {config.digest} does not match expected {expected.digest}")
    params = np.frombuffer(raw, dtype="<f8")
    if params.size != header["n_params"]:
        raise CheckpointError(f"{path}: truncated parameter block")
    return NBeatsNet(config, params=params.astype(np.float64), seed=None), header["metadata"]


__all__ = [
    "Block", "Branch", "BranchTrace", "CheckpointError", "NBeatsConfig", "NBeatsNet",
    "TrainConfig", "TrainingLog", "block_forward", "branch_forward", "load_checkpoint",
    "model_forward", "save_checkpoint", "train_cluster_model",
]
