"""Encoder/classifier model, exact manual backprop, and the training loop.

The encoder is a small tanh MLP whose output is projected onto the unit
sphere; a linear head maps features to class logits. Gradients are computed
in closed form (including the normalization Jacobian, with no stop-gradient)
and were validated against central finite differences. Training is fully
deterministic for a fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .util import derive_seed
from .vmf import VmfMixture, VmfParams, estimate_class_stats

__all__ = [
    "EncoderClassifier",
    "TrainConfig",
    "TrainState",
    "EpochRecord",
    "TrainHistory",
    "encoder_forward",
    "classifier_logits",
    "batch_loss_and_grads",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"PATT1"

METHODS = ("patt", "oe-baseline", "ce-baseline")


@dataclass
class EncoderClassifier:
    """MLP encoder weights plus the linear classification head.

    ``weights[i]`` has shape (fan_out, fan_in); every layer except the last
    is followed by tanh, the last is linear and its output is normalized to
    unit length before classification.
    """

    weights: list
    biases: list
    clf_w: np.ndarray
    clf_b: np.ndarray

    @classmethod
    def init(cls, input_dim: int, widths, feature_dim: int, n_classes: int, seed: int):
        """Symmetric uniform init scaled by fan-in, seeded."""
        if input_dim < 1 or feature_dim < 2 or n_classes < 2:
            raise ValueError("need input_dim >= 1, feature_dim >= 2, n_classes >= 2")
        sizes = [int(input_dim)] + [int(w) for w in widths] + [int(feature_dim)]
        if any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        rng = np.random.default_rng(int(seed))
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        bound = 1.0 / np.sqrt(feature_dim)
        clf_w = rng.uniform(-bound, bound, size=(n_classes, feature_dim))
        clf_b = rng.uniform(-bound, bound, size=n_classes)
        return cls(weights=weights, biases=biases, clf_w=clf_w, clf_b=clf_b)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_classes(self) -> int:
        return self.clf_w.shape[0]

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "EncoderClassifier":
        return EncoderClassifier(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            clf_w=self.clf_w.copy(),
            clf_b=self.clf_b.copy(),
        )

    def param_list(self) -> list:
        """Flat list of parameter arrays, a fixed traversal order shared with
        gradients and optimizer state."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        out.extend([self.clf_w, self.clf_b])
        return out


def _forward_batch(model: EncoderClassifier, x: np.ndarray):
    # returns (hidden activations incl. input, pre-norm output, norms, features)
    acts = [x]
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    pre = h @ model.weights[-1].T + model.biases[-1]
    norms = np.linalg.norm(pre, axis=-1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate embedding: pre-normalization output is ~0")
    z = pre / norms[:, None]
    return acts, pre, norms, z


def encoder_forward(model: EncoderClassifier, x) -> np.ndarray:
    """Unit-norm feature for one input vector (or rows of a batch)."""
    xv = np.asarray(x, dtype=np.float64)
    single = xv.ndim == 1
    xb = xv[None, :] if single else xv
    if xb.shape[-1] != model.input_dim:
        raise ValueError(f"input dim {xb.shape[-1]} != model input {model.input_dim}")
    _, _, _, z = _forward_batch(model, xb)
    return z[0] if single else z


def classifier_logits(model: EncoderClassifier, z) -> np.ndarray:
    """Linear head logits for a feature vector or rows of features."""
    zv = np.asarray(z, dtype=np.float64)
    if zv.shape[-1] != model.feature_dim:
        raise ValueError(f"feature dim {zv.shape[-1]} != model feature {model.feature_dim}")
    return zv @ model.clf_w.T + model.clf_b


def _zero_grads(model: EncoderClassifier) -> list:
    return [np.zeros_like(p) for p in model.param_list()]


def _backprop_stream(model, acts, norms, z, d_z, d_logits, grads) -> None:
    # head
    if d_logits is not None:
        grads[-2] += d_logits.T @ z
        grads[-1] += d_logits.sum(axis=0)
        d_z = d_z + d_logits @ model.clf_w if d_z is not None else d_logits @ model.clf_w
    # unit-norm projection: (I - z z^T) / ||pre||
    d_pre = (d_z - z * np.sum(z * d_z, axis=-1, keepdims=True)) / norms[:, None]
    g = d_pre
    for layer in range(len(model.weights) - 1, -1, -1):
        grads[2 * layer] += g.T @ acts[layer]
        grads[2 * layer + 1] += g.sum(axis=0)
        if layer > 0:
            g = (g @ model.weights[layer]) * (1.0 - acts[layer] ** 2)


@dataclass
class LossBreakdown:
    """Mean per-term values of one batch objective. For the baselines the
    ``tla`` slot holds the plain cross-entropy term and ``isac`` is 0."""

    total: float
    isac: float
    tla: float
    oe: float


def batch_loss_and_grads(
    model: EncoderClassifier,
    mix: VmfMixture | None,
    id_x: np.ndarray,
    id_y: np.ndarray,
    ood_x,
    hyper: losses.PattHyper,
    priors: np.ndarray,
    method: str = "patt",
    oe_gamma: float = 0.5,
):
    """Mean batch objective and its exact parameter gradients.

    The mixture statistics are constants here; differentiation covers the
    encoder (through the unit-norm projection) and the classifier head for
    both the labeled and the outlier stream.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    n = id_x.shape[0]
    if n == 0:
        raise ValueError("empty labeled batch")
    grads = _zero_grads(model)
    uniform = np.full(model.n_classes, 1.0 / model.n_classes)

    acts, _, norms, z = _forward_batch(model, id_x)
    logits = z @ model.clf_w.T + model.clf_b

    if method == "patt":
        if mix is None:
            raise ValueError("patt objective requires mixture statistics")
        isac_vals, isac_grads = losses.isac_loss_batch(mix, z, id_y, hyper.tau)
        tla_vals, tla_grads = losses.tla_loss_batch(logits, id_y, priors, hyper.epsilon)
        d_z = isac_grads / n
        d_logits = hyper.alpha * tla_grads / n
        isac_mean, cls_mean = float(isac_vals.mean()), float(tla_vals.mean())
        ood_weight = hyper.beta
    else:
        # plain cross entropy == adjustment under uniform priors
        ce_vals, ce_grads = losses.tla_loss_batch(logits, id_y, uniform, 1.0)
        d_z = np.zeros_like(z)
        d_logits = ce_grads / n
        isac_mean, cls_mean = 0.0, float(ce_vals.mean())
        ood_weight = oe_gamma if method == "oe-baseline" else 0.0
    _backprop_stream(model, acts, norms, z, d_z, d_logits, grads)

    oe_mean = 0.0
    if ood_weight > 0.0 and ood_x is not None and ood_x.shape[0] > 0:
        m = ood_x.shape[0]
        acts_o, _, norms_o, z_o = _forward_batch(model, ood_x)
        logits_o = z_o @ model.clf_w.T + model.clf_b
        oe_vals, oe_grads = losses.oe_uniform_loss_batch(logits_o)
        oe_mean = float(oe_vals.mean())
        _backprop_stream(model, acts_o, norms_o, z_o, None, ood_weight * oe_grads / m, grads)

    if method == "patt":
        total = isac_mean + hyper.alpha * cls_mean + hyper.beta * oe_mean
    else:
        total = cls_mean + ood_weight * oe_mean
    return LossBreakdown(total=total, isac=isac_mean, tla=cls_mean, oe=oe_mean), grads


@dataclass
class TrainConfig:
    """Training-loop knobs. ``method`` selects the objective: the combined
    one, outlier-exposed cross entropy, or plain cross entropy."""

    epochs: int = 30
    batch_size: int = 128
    ood_batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    sgd_momentum: float = 0.9
    seed: int = 0
    hyper: losses.PattHyper = field(default_factory=losses.PattHyper)
    vmf_momentum: float = 0.9
    vmf_update: str = "batch"
    encoder_widths: tuple = (64, 64)
    feature_dim: int = 8
    method: str = "patt"
    oe_gamma: float = 0.5
    ood_seed: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.ood_batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch sizes >= 1")
        if self.learning_rate < 0.0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.vmf_update not in ("batch", "epoch"):
            raise ValueError(f"vmf_update must be 'batch' or 'epoch', got {self.vmf_update!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not 0.0 <= self.vmf_momentum < 1.0:
            raise ValueError("vmf_momentum must be in [0, 1)")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")


@dataclass
class _AdamState:
    m: list
    v: list
    t: int = 0


@dataclass
class _SgdState:
    velocity: list


@dataclass
class TrainState:
    """One optimization step's full context: parameters, mixture statistics,
    optimizer state and static configuration."""

    model: EncoderClassifier
    mix: VmfMixture | None
    config: TrainConfig
    priors: np.ndarray
    opt: object = None

    def __post_init__(self) -> None:
        if self.opt is None:
            params = self.model.param_list()
            if self.config.optimizer == "adam":
                self.opt = _AdamState(
                    m=[np.zeros_like(p) for p in params],
                    v=[np.zeros_like(p) for p in params],
                )
            else:
                self.opt = _SgdState(velocity=[np.zeros_like(p) for p in params])


def _apply_update(model, grads, config, opt):
    params = [p.copy() for p in model.param_list()]
    lr = config.learning_rate
    if isinstance(opt, _AdamState):
        b1, b2, eps = 0.9, 0.999, 1e-8
        t = opt.t + 1
        new_m, new_v = [], []
        for i, (p, g) in enumerate(zip(params, grads)):
            m = b1 * opt.m[i] + (1.0 - b1) * g
            v = b2 * opt.v[i] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
            new_m.append(m)
            new_v.append(v)
        new_opt = _AdamState(m=new_m, v=new_v, t=t)
    else:
        new_vel = []
        for i, (p, g) in enumerate(zip(params, grads)):
            vel = config.sgd_momentum * opt.velocity[i] + g
            p -= lr * vel
            new_vel.append(vel)
        new_opt = _SgdState(velocity=new_vel)
    n_layers = len(model.weights)
    new_model = EncoderClassifier(
        weights=[params[2 * i] for i in range(n_layers)],
        biases=[params[2 * i + 1] for i in range(n_layers)],
        clf_w=params[2 * n_layers],
        clf_b=params[2 * n_layers + 1],
    )
    return new_model, new_opt


def train_step(state: TrainState, id_batch, ood_batch, hyper: losses.PattHyper):
    """One optimization step; returns the new state and the loss breakdown.

    For the combined objective the per-class vMF statistics are refreshed
    from the batch features first (exponential moving average, priors fixed)
    unless the config asks for per-epoch refresh only.
    """
    id_x, id_y = id_batch
    id_x = np.asarray(id_x, dtype=np.float64)
    id_y = np.asarray(id_y)
    ood_x = None if ood_batch is None else np.asarray(ood_batch, dtype=np.float64)
    config = state.config

    mix = state.mix
    if config.method == "patt":
        if config.vmf_update == "batch":
            z = encoder_forward(state.model, id_x)
            mix = estimate_class_stats(
                z, id_y, previous=mix, momentum=config.vmf_momentum
            )
        if mix is None:
            raise ValueError("patt training requires initialized mixture statistics")

    breakdown, grads = batch_loss_and_grads(
        state.model, mix, id_x, id_y, ood_x, hyper, state.priors,
        method=config.method, oe_gamma=config.oe_gamma,
    )
    for name, val in (("isac", breakdown.isac), ("tla", breakdown.tla), ("oe", breakdown.oe)):
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite loss term: {name} = {val}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise RuntimeError("non-finite gradient in parameter update")

    new_model, new_opt = _apply_update(state.model, grads, config, state.opt)
    new_state = replace(state, model=new_model, mix=mix, opt=new_opt)
    return new_state, breakdown


@dataclass
class EpochRecord:
    epoch: int
    total: float
    isac: float
    tla: float
    oe: float
    val_acc: float


@dataclass
class TrainHistory:
    """Per-epoch mean loss terms plus validation accuracy."""

    records: list = field(default_factory=list)


def _validation_accuracy(model, val_x, val_y) -> float:
    z = encoder_forward(model, val_x)
    pred = np.argmax(classifier_logits(model, z), axis=-1)
    return float(np.mean(pred == val_y))


def _full_stats(model, train_x, train_y, class_counts) -> VmfMixture:
    z = encoder_forward(model, train_x)
    return estimate_class_stats(z, train_y, momentum=0.0, class_counts=class_counts)


def train(config: TrainConfig, train_id, train_ood, val_id):
    """Full training run; returns (model, mixture statistics, history).

    Sub-seeds for init, labeled shuffling and the outlier stream are derived
    from the config seed by role, so two runs with the same seed are
    bit-identical and the outlier stream can be reseeded independently.
    """
    x, y = np.asarray(train_id.inputs, dtype=np.float64), np.asarray(train_id.labels)
    counts = np.asarray(train_id.class_counts, dtype=np.float64)
    if counts.size < 2:
        raise ValueError("training needs at least two classes")
    if np.any(counts <= 0):
        raise ValueError("every class needs at least one training sample")
    priors = counts / counts.sum()
    hyper = config.hyper

    model = EncoderClassifier.init(
        x.shape[1], config.encoder_widths, config.feature_dim,
        counts.size, derive_seed(config.seed, "model-init"),
    )
    history = TrainHistory()
    if config.epochs == 0:
        return model, _full_stats(model, x, y, counts), history

    ood_x = None
    if train_ood is not None and train_ood.inputs.shape[0] > 0:
        ood_x = np.asarray(train_ood.inputs, dtype=np.float64)

    state = TrainState(model=model, mix=None, config=config, priors=priors)
    if config.method == "patt":
        state.mix = _full_stats(model, x, y, counts)

    shuffle_rng = np.random.default_rng(derive_seed(config.seed, "id-shuffle"))
    ood_seed = config.ood_seed if config.ood_seed is not None else derive_seed(config.seed, "ood-shuffle")
    ood_rng = np.random.default_rng(ood_seed)
    ood_queue = np.empty(0, dtype=np.int64)

    n = x.shape[0]
    for epoch in range(config.epochs):
        if config.method == "patt" and config.vmf_update == "epoch":
            state.mix = _full_stats(state.model, x, y, counts)
        perm = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            ood_batch = None
            if ood_x is not None:
                take = min(config.ood_batch_size, ood_x.shape[0])
                while ood_queue.size < take:
                    ood_queue = np.concatenate([ood_queue, ood_rng.permutation(ood_x.shape[0])])
                ood_batch = ood_x[ood_queue[:take]]
                ood_queue = ood_queue[take:]
            state, breakdown = train_step(state, (x[idx], y[idx]), ood_batch, hyper)
            sums += (breakdown.total, breakdown.isac, breakdown.tla, breakdown.oe)
            steps += 1
        val_acc = _validation_accuracy(state.model, val_id.inputs, val_id.labels)
        means = sums / steps
        history.records.append(EpochRecord(
            epoch=epoch, total=float(means[0]), isac=float(means[1]),
            tla=float(means[2]), oe=float(means[3]), val_acc=val_acc,
        ))

    mix = state.mix if state.mix is not None else _full_stats(state.model, x, y, counts)
    return state.model, mix, history


def save_checkpoint(path, model: EncoderClassifier, mix: VmfMixture) -> None:
    """Binary checkpoint: magic, layer sizes, class count, then all parameters
    and per-class statistics as little-endian float64.

    Layout after the 5-byte magic: uint32 L (number of layer sizes), L uint32
    sizes (input, hidden..., feature), uint32 K; float64 blocks: per layer W
    row-major then bias, classifier W then bias, then per class mu, kappa,
    prior.
    """
    if mix.n_classes != model.n_classes or mix.dim != model.feature_dim:
        raise ValueError("mixture does not match the model's head")
    sizes = model.layer_sizes
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(sizes))]
    parts.append(struct.pack(f"<{len(sizes)}I", *sizes))
    parts.append(struct.pack("<I", model.n_classes))
    for arr in model.param_list():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for comp, prior in zip(mix.classes, mix.priors):
        parts.append(np.ascontiguousarray(comp.mu, dtype="<f8").tobytes())
        parts.append(struct.pack("<dd", comp.kappa, float(prior)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns (model, mixture)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (n_sizes,) = take("<I")
    if n_sizes < 2:
        raise ValueError(f"{path}: invalid layer count {n_sizes}")
    sizes = list(take(f"<{n_sizes}I"))
    (k,) = take("<I")

    def take_f64(count, shape):
        nonlocal off
        size = 8 * count
        if off + size > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += size
        return arr.astype(np.float64)

    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take_f64(fan_out * fan_in, (fan_out, fan_in)))
        biases.append(take_f64(fan_out, (fan_out,)))
    dim = sizes[-1]
    clf_w = take_f64(k * dim, (k, dim))
    clf_b = take_f64(k, (k,))
    comps, priors = [], np.empty(k)
    for j in range(k):
        mu = take_f64(dim, (dim,))
        kappa, prior = take("<dd")
        comps.append(VmfParams(mu=mu, kappa=kappa, dim=dim))
        priors[j] = prior
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    model = EncoderClassifier(weights=weights, biases=biases, clf_w=clf_w, clf_b=clf_b)
    return model, VmfMixture(classes=comps, priors=priors)
