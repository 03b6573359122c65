"""Interval embedding, a small MLP with hand-rolled backprop, and the
composite data + residual training loop for the bounded value function.

The network never sees states directly: singletons and one-step image
boxes are both embedded as ``(lo, hi)`` concatenations in R^{2n}, so a
single input layer serves points and sets alike.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ._parallel import indexed_map
from .dynamics import HyperRectangle, SystemSpec
from .errors import TrainingDivergedError
from .value import (AlphaFn, ValueParams, alpha, v_tilde_batch, w_tilde, xi,
                    zubov_residual_w)

_BELOW_ONE = float(np.nextafter(1.0, 0.0))
_OUT_FLOOR = 1e-300


def embed_singleton(x) -> np.ndarray:
    """Embed a point as the zero-width box ``(x, x)``; batched over leading axes."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, x], axis=-1)


def embed_rect(r: HyperRectangle) -> np.ndarray:
    """Embed a box as the concatenation ``(lo, hi)``; injective over boxes."""
    return np.concatenate([r.lo, r.hi], axis=-1)


def embed_bounds(lo, hi) -> np.ndarray:
    """Batched box embedding from raw ``(lo, hi)`` arrays."""
    return np.concatenate([np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)], axis=-1)


@dataclass
class MlpModel:
    """Feedforward net: tanh hidden layers, logistic output in (0, 1).

    Weight matrices are stored ``(fan_in, fan_out)``; a model with no hidden
    layers degenerates to ``logistic(z W + b)``.
    """

    layer_sizes: tuple
    weights: list = field(repr=False)
    biases: list = field(repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2 or self.layer_sizes[-1] != 1:
            raise ValueError("layer_sizes must chain from the input width to 1")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i} has shape {w.shape}, expected {expect}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_sizes,
                        [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, layer_sizes, flat: np.ndarray) -> "MlpModel":
        layer_sizes = tuple(int(s) for s in layer_sizes)
        weights, biases, pos = [], [], 0
        for i in range(len(layer_sizes) - 1):
            fi, fo = layer_sizes[i], layer_sizes[i + 1]
            weights.append(flat[pos:pos + fi * fo].reshape(fi, fo).copy())
            pos += fi * fo
            biases.append(flat[pos:pos + fo].copy())
            pos += fo
        if pos != flat.size:
            raise ValueError(f"parameter block has {flat.size} values, expected {pos}")
        return cls(layer_sizes, weights, biases)


def init_mlp(layer_sizes, seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fi, fo in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-limit, limit, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return MlpModel(tuple(layer_sizes), weights, biases)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cached(model: MlpModel, Z: np.ndarray):
    """Forward pass caching post-activation layer outputs for backprop."""
    acts = [Z]
    h = Z
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        pre = h @ w + b
        h = _sigmoid(pre) if i == last else np.tanh(pre)
        acts.append(h)
    y = np.clip(acts[-1][:, 0], _OUT_FLOOR, _BELOW_ONE)
    return y, acts


def forward(model: MlpModel, z) -> float | np.ndarray:
    """Network output in (0, 1) for an embedded set; accepts (L,) or (B, L)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    if Z.ndim != 2 or Z.shape[1] != model.input_dim:
        raise ValueError(f"input must have {model.input_dim} features, got shape {z.shape}")
    y, _ = _forward_cached(model, Z)
    return float(y[0]) if single else y


def _backprop(model: MlpModel, acts, dy: np.ndarray):
    """Parameter gradients given d(loss)/d(output); returns [(dW, db)] per layer."""
    grads = [None] * len(model.weights)
    out = acts[-1][:, 0]
    delta = (dy * out * (1.0 - out))[:, None]  # logistic derivative
    for i in range(len(model.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] ** 2)  # tanh'
    return grads


def loss_data(model: MlpModel, x, target):
    """Squared regression error of the net against a bounded value target."""
    y = forward(model, embed_singleton(x))
    return (np.asarray(target, dtype=float) - y) ** 2


def loss_pi(model: MlpModel, z_x, z_fx, xi_x):
    """Squared residual of the bounded-value functional equation."""
    w_x = forward(model, z_x)
    w_fx = forward(model, z_fx)
    return zubov_residual_w(w_x, w_fx, xi_x) ** 2


def _zero_grads(model: MlpModel):
    return [(np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(model.weights, model.biases)]


def _accumulate(total, extra):
    for (tw, tb), (ew, eb) in zip(total, extra):
        tw += ew
        tb += eb


def backward(model: MlpModel, data_x, data_targets, z_x, z_fx, xi_x,
             lambda_d: float, lambda_pi: float):
    """Mean composite loss and its parameter gradients over one batch.

    Either term may be empty (pass arrays with zero rows).  Returns
    ``(l_d, l_pi, grads)`` where the gradients differentiate
    ``lambda_d * l_d + lambda_pi * l_pi``.
    """
    grads = _zero_grads(model)
    l_d = 0.0
    data_x = np.asarray(data_x, dtype=float)
    if data_x.size:
        targets = np.asarray(data_targets, dtype=float)
        y, acts = _forward_cached(model, embed_singleton(data_x))
        res = y - targets
        l_d = float(np.mean(res ** 2))
        _accumulate(grads, _backprop(model, acts, lambda_d * 2.0 * res / res.size))
    l_pi = 0.0
    z_x = np.asarray(z_x, dtype=float)
    if z_x.size:
        xi_arr = np.asarray(xi_x, dtype=float)
        y_x, acts_x = _forward_cached(model, z_x)
        y_f, acts_f = _forward_cached(model, np.asarray(z_fx, dtype=float))
        res = zubov_residual_w(y_x, y_f, xi_arr)
        l_pi = float(np.mean(res ** 2))
        scale = lambda_pi * 2.0 * res / res.size
        _accumulate(grads, _backprop(model, acts_x, scale))
        _accumulate(grads, _backprop(model, acts_f, scale * (xi_arr - 1.0)))
    return l_d, l_pi, grads


@dataclass
class ValueDataset:
    """Regression targets plus residual collocation data for training."""

    data_x: np.ndarray        # (N_d, n)
    data_targets: np.ndarray  # (N_d,), values in [0, 1)
    col_x: np.ndarray         # (N_pi, n)
    col_z_x: np.ndarray       # (N_pi, 2n) embedded singletons
    col_z_fx: np.ndarray      # (N_pi, 2n) embedded one-step image boxes
    col_xi: np.ndarray        # (N_pi,)

    def __post_init__(self):
        if self.data_x.shape[0] != self.data_targets.shape[0]:
            raise ValueError("data point/target count mismatch")
        if not (self.col_x.shape[0] == self.col_z_x.shape[0]
                == self.col_z_fx.shape[0] == self.col_xi.shape[0]):
            raise ValueError("collocation array length mismatch")
        if self.data_targets.size and not (
                np.all(self.data_targets >= 0.0) and np.all(self.data_targets < 1.0)):
            raise ValueError("targets must lie in [0, 1)")

    @property
    def n(self) -> int:
        return self.data_x.shape[1]

    @property
    def n_data(self) -> int:
        return self.data_x.shape[0]

    @property
    def n_colloc(self) -> int:
        return self.col_x.shape[0]


def generate_dataset(sys: SystemSpec, a: AlphaFn, vp: ValueParams,
                     n_data: int, n_colloc: int, seed: int) -> ValueDataset:
    """Sample training data over the learning domain.

    Point locations come from one master stream; each data point's
    trajectory sampling uses its own stream seeded ``seed ^ index``, so the
    result is reproducible under any parallel schedule.  Collocation rows
    carry the embedded singleton, the embedded exact image box, and the
    xi transform of the point's running cost.
    """
    if n_data < 1 or n_colloc < 1:
        raise ValueError("dataset sizes must be >= 1")
    master = np.random.default_rng(seed)
    data_x = sys.domain_box.sample(master, n_data)
    col_x = sys.domain_box.sample(master, n_colloc)

    chunk = 32

    def chunk_values(ci: int) -> np.ndarray:
        lo = ci * chunk
        hi = min(lo + chunk, n_data)
        return v_tilde_batch(sys, data_x[lo:hi], a, vp,
                             [seed ^ i for i in range(lo, hi)])

    values = np.concatenate(indexed_map(chunk_values, -(-n_data // chunk)))
    targets = np.minimum(np.asarray(w_tilde(values)), _BELOW_ONE)  # +inf -> just below 1

    lo, hi = sys.f_image_fn(col_x)
    return ValueDataset(
        data_x=data_x,
        data_targets=targets,
        col_x=col_x,
        col_z_x=embed_singleton(col_x),
        col_z_fx=embed_bounds(lo, hi),
        col_xi=np.asarray(xi(alpha(a, col_x))),
    )


@dataclass
class TrainConfig:
    """Optimizer and loss-weighting knobs for :func:`train`."""

    lambda_d: float = 0.1
    lambda_pi: float = 1.0
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.lambda_d <= 0.0 or self.lambda_pi <= 0.0:
            raise ValueError("loss weights must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")


def _full_losses(model: MlpModel, ds: ValueDataset) -> tuple:
    y = forward(model, embed_singleton(ds.data_x))
    l_d = float(np.mean((y - ds.data_targets) ** 2))
    res = zubov_residual_w(forward(model, ds.col_z_x),
                           forward(model, ds.col_z_fx), ds.col_xi)
    return l_d, float(np.mean(res ** 2))


def train(model: MlpModel, dataset: ValueDataset, cfg: TrainConfig):
    """Minimize the weighted composite loss with Adam mini-batches.

    Single-threaded and deterministic in ``cfg.seed``.  Returns the trained
    model (the input is not mutated) and per-epoch history rows
    ``(l_d, l_pi, total)`` evaluated on the full dataset.
    """
    if dataset.n_data == 0 and dataset.n_colloc == 0:
        raise ValueError("dataset is empty")
    if cfg.batch_size > min(dataset.n_data, dataset.n_colloc):
        raise ValueError("batch_size exceeds a dataset size")
    model = model.copy()
    history = []
    if cfg.epochs == 0:
        return model, history

    rng = np.random.default_rng(cfg.seed)
    m_state = [(np.zeros_like(w), np.zeros_like(b))
               for w, b in zip(model.weights, model.biases)]
    v_state = [(np.zeros_like(w), np.zeros_like(b))
               for w, b in zip(model.weights, model.biases)]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    bs = cfg.batch_size
    steps = max(-(-dataset.n_data // bs), -(-dataset.n_colloc // bs))
    d_order = rng.permutation(dataset.n_data)
    p_order = rng.permutation(dataset.n_colloc)
    d_pos = p_pos = 0

    for epoch in range(1, cfg.epochs + 1):
        for _ in range(steps):
            if d_pos + bs > dataset.n_data:
                d_order = rng.permutation(dataset.n_data)
                d_pos = 0
            if p_pos + bs > dataset.n_colloc:
                p_order = rng.permutation(dataset.n_colloc)
                p_pos = 0
            di = d_order[d_pos:d_pos + bs]
            pi = p_order[p_pos:p_pos + bs]
            d_pos += bs
            p_pos += bs
            l_d, l_pi, grads = backward(
                model, dataset.data_x[di], dataset.data_targets[di],
                dataset.col_z_x[pi], dataset.col_z_fx[pi], dataset.col_xi[pi],
                cfg.lambda_d, cfg.lambda_pi)
            if not np.isfinite(cfg.lambda_d * l_d + cfg.lambda_pi * l_pi):
                raise TrainingDivergedError(epoch)
            t += 1
            corr1 = 1.0 - beta1 ** t
            corr2 = 1.0 - beta2 ** t
            lr = cfg.learning_rate
            for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
                    zip(model.weights, model.biases), grads, m_state, v_state):
                mw *= beta1; mw += (1 - beta1) * gw
                mb *= beta1; mb += (1 - beta1) * gb
                vw *= beta2; vw += (1 - beta2) * gw ** 2
                vb *= beta2; vb += (1 - beta2) * gb ** 2
                w -= lr * (mw / corr1) / (np.sqrt(vw / corr2) + eps)
                b -= lr * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
        l_d, l_pi = _full_losses(model, dataset)
        total = cfg.lambda_d * l_d + cfg.lambda_pi * l_pi
        if not np.isfinite(total):
            raise TrainingDivergedError(epoch)
        history.append((l_d, l_pi, total))
    return model, history


def omega_nn(model: MlpModel, x):
    """Learned value function on states: the net applied to embedded singletons."""
    return forward(model, embed_singleton(x))


_CKPT_MAGIC = "doskit-checkpoint-v1"
_CKPT_SEP = b"---\n"


def save_checkpoint(model: MlpModel, path, meta: dict | None = None) -> None:
    """Write a text header plus a flat little-endian float64 parameter block."""
    params = model.flat_params().astype("<f8")
    lines = [
        _CKPT_MAGIC,
        "layer_sizes = " + ",".join(str(s) for s in model.layer_sizes),
        "hidden_activation = tanh",
        "output_activation = logistic",
        f"param_count = {params.size}",
    ]
    for key in sorted(meta or {}):
        lines.append(f"{key} = {(meta or {})[key]}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_CKPT_SEP)
        fh.write(params.tobytes())


def load_checkpoint(path):
    """Read a checkpoint, validating magic, activations, and parameter shape.

    Returns ``(model, meta)`` where ``meta`` holds the extra header fields.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n" + _CKPT_SEP)
    if sep < 0:
        raise ValueError(f"{path}: missing checkpoint separator")
    header, block = blob[:sep].decode("ascii"), blob[sep + 1 + len(_CKPT_SEP):]
    lines = header.splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a {_CKPT_MAGIC} file")
    meta = {}
    for line in lines[1:]:
        key, _, raw = line.partition("=")
        meta[key.strip()] = raw.strip()
    if meta.pop("hidden_activation", None) != "tanh":
        raise ValueError(f"{path}: unsupported hidden activation")
    if meta.pop("output_activation", None) != "logistic":
        raise ValueError(f"{path}: unsupported output activation")
    layer_sizes = tuple(int(s) for s in meta.pop("layer_sizes").split(","))
    count = int(meta.pop("param_count"))
    params = np.frombuffer(block, dtype="<f8")
    if params.size != count:
        raise ValueError(f"{path}: parameter block has {params.size} values, header says {count}")
    model = MlpModel.from_flat(layer_sizes, params.astype(float))
    return model, meta


def checkpoint_digest(path) -> str:
    """SHA-256 of a file, for manifests and idempotence checks."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
