"""LSTM next-item recommender with hand-derived backpropagation through time.

Architecture: item embedding -> single LSTM layer -> all hidden states
concatenated -> dense layer over ``n_items + 1`` outputs (index 0 is padding).
Everything runs in float64 numpy so gradients can be checked against finite
differences and traced for influence estimation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from ._container import read_container, write_container

logger = logging.getLogger(__name__)

PAD = 0
PARAM_ORDER = (
    "embedding",
    "lstm_input_weights",
    "lstm_recurrent_weights",
    "lstm_biases",
    "output_weights",
    "output_bias",
)
CHECKPOINT_MAGIC = b"BTCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    embedding_dim: int = 128
    hidden_dim: int = 64
    lookback: int = 50
    flatten: bool = True
    forget_bias: float = 1.0

    @property
    def vocab(self) -> int:
        return self.n_items + 1

    @property
    def readout_dim(self) -> int:
        return self.lookback * self.hidden_dim if self.flatten else self.hidden_dim


@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 2048
    epochs: int = 600
    learning_rate: float = 5e-3
    momentum: float = 0.9
    checkpoint_interval: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.batch_size, self.epochs, self.checkpoint_interval) <= 0:
            raise ValueError("batch_size, epochs and checkpoint_interval must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.epochs % self.checkpoint_interval:
            raise ValueError("checkpoint_interval must divide epochs")


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: np.ndarray
    lstm_input_weights: np.ndarray
    lstm_recurrent_weights: np.ndarray
    lstm_biases: np.ndarray
    output_weights: np.ndarray
    output_bias: np.ndarray

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        shapes = param_shapes(config)
        return cls(config, **{name: np.zeros(shapes[name]) for name in PARAM_ORDER})

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor; forget-gate bias set separately."""
        shapes = param_shapes(config)
        fan_in = {
            "embedding": config.embedding_dim,
            "lstm_input_weights": config.embedding_dim,
            "lstm_recurrent_weights": config.hidden_dim,
            "lstm_biases": config.hidden_dim,
            "output_weights": config.readout_dim,
            "output_bias": config.readout_dim,
        }
        arrays = {}
        for name in PARAM_ORDER:
            bound = 1.0 / np.sqrt(fan_in[name])
            arrays[name] = rng.uniform(-bound, bound, size=shapes[name])
        H = config.hidden_dim
        arrays["lstm_biases"][H : 2 * H] = config.forget_bias
        return cls(config, **arrays)

    @classmethod
    def from_flat(cls, config: ModelConfig, vector: np.ndarray) -> "ModelParams":
        shapes = param_shapes(config)
        arrays, offset = {}, 0
        for name in PARAM_ORDER:
            size = int(np.prod(shapes[name]))
            arrays[name] = np.array(vector[offset : offset + size]).reshape(shapes[name])
            offset += size
        if offset != len(vector):
            raise ValueError(f"flat vector has {len(vector)} entries, model needs {offset}")
        return cls(config, **arrays)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def flat(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.tensors()])

    @property
    def n_params(self) -> int:
        return sum(arr.size for _, arr in self.tensors())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, **{n: a.copy() for n, a in self.tensors()})

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        return ModelParams(
            self.config,
            **{n: fn(a, *(getattr(o, n) for o in others)) for n, a in self.tensors()},
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    V1, E, H = config.vocab, config.embedding_dim, config.hidden_dim
    return {
        "embedding": (V1, E),
        "lstm_input_weights": (4 * H, E),
        "lstm_recurrent_weights": (4 * H, H),
        "lstm_biases": (4 * H,),
        "output_weights": (V1, config.readout_dim),
        "output_bias": (V1,),
    }


def pad_histories(histories: Sequence[Sequence[int]], lookback: int) -> np.ndarray:
    """Left-pad (or left-truncate) each history to exactly ``lookback`` ids."""
    out = np.zeros((len(histories), lookback), dtype=np.int64)
    for row, hist in enumerate(histories):
        tail = list(hist)[-lookback:]
        if tail:
            out[row, lookback - len(tail) :] = tail
    return out


@dataclass
class _Cache:
    X: np.ndarray
    acts: np.ndarray  # activated gates i, f, g, o per step
    cells: np.ndarray
    tanh_cells: np.ndarray
    hiddens: np.ndarray
    readout: np.ndarray


def _check_indices(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != params.config.lookback:
        raise ValueError(f"expected batch of shape (B, {params.config.lookback}), got {X.shape}")
    if X.size and (X.min() < 0 or X.max() > params.config.n_items):
        raise IndexError(f"item index out of range [0, {params.config.n_items}]")
    return X.astype(np.int64, copy=False)


def _forward(params: ModelParams, X: np.ndarray) -> tuple[np.ndarray, _Cache]:
    cfg = params.config
    B, T = X.shape
    H = cfg.hidden_dim
    # input projection depends only on the token, so project the vocabulary once
    table = params.embedding @ params.lstm_input_weights.T + params.lstm_biases
    # time-major buffers keep every per-step slice contiguous
    acts = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    tanh_cells = np.empty((T, B, H))
    hiddens = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    # sigmoid(x) = (1 + tanh(x / 2)) / 2 lets one tanh call cover all four gates
    half = np.full(4 * H, 0.5)
    half[2 * H : 3 * H] = 1.0
    shift = np.full(4 * H, 0.5)
    shift[2 * H : 3 * H] = 0.0
    table *= half
    steps = np.ascontiguousarray(X.T)
    Wh_T = params.lstm_recurrent_weights.T * half
    for t in range(T):
        z = h @ Wh_T
        z += table[steps[t]]
        a = np.tanh(z, out=acts[t])
        a *= half
        a += shift
        c = a[:, H : 2 * H] * c
        c += a[:, :H] * a[:, 2 * H : 3 * H]
        cells[t] = c
        tc = np.tanh(c, out=tanh_cells[t])
        h = np.multiply(a[:, 3 * H :], tc, out=hiddens[t])
    if cfg.flatten:
        readout = hiddens.transpose(1, 0, 2).reshape(B, T * H)
    else:
        readout = hiddens[-1]
    logits = readout @ params.output_weights.T + params.output_bias
    return logits, _Cache(X, acts, cells, tanh_cells, hiddens, readout)


def forward(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Logits of shape (B, n_items + 1) for a left-padded batch of histories."""
    X = _check_indices(params, X)
    return _forward(params, X)[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean categorical cross-entropy."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    return float(-logp[np.arange(len(targets)), targets].mean())


def backward(
    params: ModelParams, X: np.ndarray, targets: np.ndarray
) -> tuple[float, ModelParams]:
    """Mean loss over the batch and its exact gradient for every parameter tensor."""
    X = _check_indices(params, X)
    targets = np.asarray(targets, dtype=np.int64)
    cfg = params.config
    B, T = X.shape
    H = cfg.hidden_dim
    logits, cache = _forward(params, X)

    logp = log_softmax(logits)
    rows = np.arange(B)
    batch_loss = float(-logp[rows, targets].mean())
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    dlogits /= B

    d_out_w = dlogits.T @ cache.readout
    d_out_b = dlogits.sum(axis=0)
    dread = dlogits @ params.output_weights
    if cfg.flatten:
        dhs = dread.reshape(B, T, H).transpose(1, 0, 2)
    else:
        dhs = np.zeros((T, B, H))
        dhs[-1] = dread

    Wh = params.lstm_recurrent_weights
    dZ = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        a = cache.acts[t]
        i, f, g, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
        tc = cache.tanh_cells[t]
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = cache.cells[t - 1] if t > 0 else 0.0
        dz = dZ[t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ Wh

    flat_dz = dZ.reshape(T * B, 4 * H)
    # sum pre-activation gradients per token, then push through the shared projection
    onehot = sparse.csr_matrix(
        (np.ones(B * T), (X.T.ravel(), np.arange(B * T))), shape=(cfg.vocab, B * T)
    )
    dz_tok = onehot @ flat_dz
    d_wx = dz_tok.T @ params.embedding
    d_emb = dz_tok @ params.lstm_input_weights
    d_b = dz_tok.sum(axis=0)
    d_wh = dZ[1:].reshape(-1, 4 * H).T @ cache.hiddens[:-1].reshape(-1, H)

    grads = ModelParams(
        cfg,
        embedding=d_emb,
        lstm_input_weights=d_wx,
        lstm_recurrent_weights=d_wh,
        lstm_biases=d_b,
        output_weights=d_out_w,
        output_bias=d_out_b,
    )
    return batch_loss, grads


def sgd_momentum_step(
    params: ModelParams,
    velocity: ModelParams,
    grads: ModelParams,
    lr: float,
    momentum: float,
) -> tuple[ModelParams, ModelParams]:
    """Classical momentum: v <- momentum*v + g, w <- w - lr*v."""
    new_velocity = velocity.map(lambda v, g: momentum * v + g, grads)
    new_params = params.map(lambda w, v: w - lr * v, new_velocity)
    return new_params, new_velocity


@dataclass
class Checkpoint:
    params: ModelParams
    learning_rate: float
    epoch: int
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("checkpoint learning rate must be positive")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = {
        "config": asdict(ckpt.params.config),
        "epoch": ckpt.epoch,
        "learning_rate": ckpt.learning_rate,
        "hyperparams": ckpt.hyperparams,
    }
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, ckpt.params.tensors())


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, tensors = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = ModelConfig(**meta["config"])
    params = ModelParams(config, **{name: tensors[name] for name in PARAM_ORDER})
    return Checkpoint(params, float(meta["learning_rate"]), int(meta["epoch"]), meta["hyperparams"])


@dataclass
class TrainResult:
    params: ModelParams
    checkpoints: list[Checkpoint]
    loss_trace: list[tuple[int, float]]


def train(
    X: np.ndarray,
    y: np.ndarray,
    config: ModelConfig,
    hp: Hyperparams,
    init: ModelParams | None = None,
) -> TrainResult:
    """Mini-batch SGD with momentum.

    Checkpoints are taken at epoch 0 (initialization), every
    ``checkpoint_interval`` epochs, and at the final epoch. The loss trace
    holds the example-weighted mean training loss of each epoch.
    """
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(hp.seed)
    params = init.copy() if init is not None else ModelParams.initialize(config, rng)
    velocity = ModelParams.zeros(config)
    # a zero learning rate cannot be stored in a checkpoint; tracing needs positive lr
    ckpt_lr = hp.learning_rate if hp.learning_rate > 0 else np.finfo(float).tiny
    hp_meta = asdict(hp)
    checkpoints = [Checkpoint(params.copy(), ckpt_lr, 0, hp_meta)]
    trace = []
    n = len(X)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            batch_loss, grads = backward(params, X[idx], y[idx])
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // hp.batch_size}"
                )
            params, velocity = sgd_momentum_step(
                params, velocity, grads, hp.learning_rate, hp.momentum
            )
            total += batch_loss * len(idx)
        trace.append((epoch, total / n))
        if epoch % hp.checkpoint_interval == 0 or epoch == hp.epochs:
            checkpoints.append(Checkpoint(params.copy(), ckpt_lr, epoch, hp_meta))
            logger.info("epoch %d loss %.6f", epoch, total / n)
    return TrainResult(params, checkpoints, trace)


@dataclass
class RankedRecommendations:
    items: np.ndarray
    scores: np.ndarray


def rank_from_logits(logits: np.ndarray, top: int | None = 50) -> np.ndarray:
    """Item indices best-first per row; ties by ascending index, padding excluded."""
    logits = np.atleast_2d(logits)
    real = logits[:, 1:]
    # stable sort on negated scores keeps ascending index within ties
    order = np.argsort(-real, axis=1, kind="stable") + 1
    return order if top is None else order[:, :top]


def rank_items(params: ModelParams, history: Sequence[int], top: int = 50) -> RankedRecommendations:
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    logits = forward(params, pad_histories([history], params.config.lookback))[0]
    items = rank_from_logits(logits, top)[0]
    return RankedRecommendations(items=items, scores=logits[items])


def target_ranks(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target in the full padding-free ranking."""
    logits = np.atleast_2d(logits)
    targets = np.asarray(targets, dtype=np.int64)
    real = logits[:, 1:]
    tgt = logits[np.arange(len(targets)), targets][:, None]
    ids = np.arange(1, logits.shape[1])[None, :]
    ahead = (real > tgt) | ((real == tgt) & (ids < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def predict_logits(params: ModelParams, X: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    X = np.asarray(X, dtype=np.int64)
    out = [forward(params, X[s : s + batch_size]) for s in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.vocab))


def mrr(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    if len(X) == 0:
        raise ValueError("evaluation set is empty")
    return float(np.mean(1.0 / target_ranks(predict_logits(params, X), y)))


def recall_at_k(params: ModelParams, X: np.ndarray, y: np.ndarray, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(X) == 0:
        raise ValueError("evaluation set is empty")
    return float(np.mean(target_ranks(predict_logits(params, X), y) <= k))
