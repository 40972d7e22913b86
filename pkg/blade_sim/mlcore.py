"""
Datasets, the small trainable model, local SGD, evaluation and FedAvg.

Parameters travel as flat float64 numpy vectors (``ParamVector``); the
``ModelSpec`` layout says how to reshape them. Every function here is pure:
inputs are never modified and outputs are read-only arrays.
"""
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .blade_schemas import ModelKind, ModelSpec
from .exceptions import DivergenceError, PartitionError, ShapeMismatchError
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

ParamVector = np.ndarray


def as_param_vector(values) -> ParamVector:
    """Copy into a read-only, finite, 1-D float64 vector"""
    vec = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    if vec.size == 0:
        raise ShapeMismatchError("Parameter vector must be non-empty")
    if not np.all(np.isfinite(vec)):
        raise ShapeMismatchError("Parameter vector contains non-finite values")
    vec.flags.writeable = False
    return vec


def params_digest(params: ParamVector) -> bytes:
    """SHA-256 over the canonical little-endian float64 encoding"""
    return hashlib.sha256(np.asarray(params, dtype="<f8").tobytes()).digest()


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    client_id: int
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if features.ndim != 2:
            raise ShapeMismatchError("features must be a samples x dims matrix")
        if features.shape[0] == 0:
            raise ShapeMismatchError("Dataset must be non-empty")
        if features.shape[0] != labels.shape[0]:
            raise ShapeMismatchError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ShapeMismatchError(f"labels must lie in [0, {self.num_classes})")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class LocalUpdate:
    """A client's round contribution as broadcast on the P2P network"""
    client_id: int
    round: int
    params: ParamVector
    sample_size: int
    compute_time: float

    @property
    def digest(self) -> bytes:
        sha = hashlib.sha256()
        sha.update(np.array([self.client_id, self.round, self.sample_size], dtype="<i8").tobytes())
        sha.update(np.array([self.compute_time], dtype="<f8").tobytes())
        sha.update(params_digest(self.params))
        return sha.digest()


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def _client_labels(rng: np.random.Generator, client_index: int, samples: int,
                   num_classes: int, skew: float) -> np.ndarray:
    """Label plan for one client: a `skew` share from its two shard classes"""
    shard = np.array([(2 * client_index) % num_classes, (2 * client_index + 1) % num_classes])
    n_shard = int(round(skew * samples))
    shard_labels = shard[np.arange(n_shard) % 2]
    iid_labels = rng.integers(0, num_classes, size=samples - n_shard)
    return rng.permutation(np.concatenate([shard_labels, iid_labels]).astype(np.int64))


def _check_partition(n_clients: int, samples_per_client: int, num_classes: int, skew: float):
    if n_clients < 1:
        raise PartitionError("n_clients must be >= 1")
    if samples_per_client < 1:
        raise PartitionError("samples_per_client must be >= 1")
    if not 0.0 <= skew <= 1.0:
        raise PartitionError(f"skew must lie in [0, 1], got {skew}")
    if skew == 1.0 and samples_per_client < num_classes:
        raise PartitionError(
            f"samples_per_client={samples_per_client} < num_classes={num_classes} "
            "cannot populate label shards at skew=1")


def make_partitioned_data(seed: int, n_clients: int, samples_per_client: int, dims: int,
                          num_classes: int, skew: float, test_samples: int = 1000,
                          class_sep: float = 0.2) -> Tuple[List[Dataset], Dataset]:
    """Synthetic Gaussian-cluster classification task split over clients.

    skew=0 gives IID clients; skew=1 gives every client at most two classes.
    Client ``i`` is given id ``i``. The test set is drawn IID and balanced.
    """
    _check_partition(n_clients, samples_per_client, num_classes, skew)
    means = rng_for(seed, "class-means").normal(0.0, class_sep, size=(num_classes, dims))

    def draw(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return means[labels] + rng.normal(0.0, 1.0, size=(labels.size, dims))

    clients = []
    for i in range(n_clients):
        rng = rng_for(seed, "client-data", i)
        labels = _client_labels(rng, i, samples_per_client, num_classes, skew)
        clients.append(Dataset(draw(labels, rng), labels, client_id=i, num_classes=num_classes))

    rng = rng_for(seed, "test-data")
    test_labels = rng.permutation(np.arange(test_samples) % num_classes)
    test = Dataset(draw(test_labels, rng), test_labels, client_id=-1, num_classes=num_classes)
    return clients, test


def partition_dataset(dataset: Dataset, n_clients: int, samples_per_client: int,
                      skew: float, seed: int) -> List[Dataset]:
    """Split a loaded dataset with the same label-shard plan (no sample reuse)"""
    _check_partition(n_clients, samples_per_client, dataset.num_classes, skew)
    rng = rng_for(seed, "partition")
    pools = {c: list(rng.permutation(np.flatnonzero(dataset.labels == c)))
             for c in range(dataset.num_classes)}
    clients = []
    for i in range(n_clients):
        plan = _client_labels(rng_for(seed, "partition", i), i, samples_per_client,
                              dataset.num_classes, skew)
        rows = []
        for label in plan:
            if not pools[int(label)]:
                raise PartitionError(f"Not enough samples of class {label} for client {i}")
            rows.append(pools[int(label)].pop())
        rows = np.array(rows)
        clients.append(Dataset(dataset.features[rows], dataset.labels[rows],
                               client_id=i, num_classes=dataset.num_classes))
    return clients


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def check_dim(params: ParamVector, spec: ModelSpec) -> None:
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ShapeMismatchError(
            f"Parameter vector has dim {params.shape[0]}, model expects {spec.param_count}")


def unflatten(params: ParamVector, spec: ModelSpec) -> Dict[str, np.ndarray]:
    check_dim(params, spec)
    blocks, offset = {}, 0
    for name, shape in spec.layout:
        size = math.prod(shape)
        blocks[name] = params[offset:offset + size].reshape(shape)
        offset += size
    return blocks


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Zeros for the linear model; scaled Gaussian weights for the MLP"""
    if spec.kind == ModelKind.LINEAR:
        return as_param_vector(np.zeros(spec.param_count))
    rng = rng_for(seed, "init")
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    parts = [rng.normal(0.0, 1.0 / math.sqrt(d), size=d * h), np.zeros(h),
             rng.normal(0.0, 1.0 / math.sqrt(h), size=h * c), np.zeros(c)]
    return as_param_vector(np.concatenate(parts))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_logits(params: ParamVector, X: np.ndarray, spec: ModelSpec) -> np.ndarray:
    p = unflatten(params, spec)
    if X.shape[1] != spec.input_dim:
        raise ShapeMismatchError(f"features have {X.shape[1]} dims, model expects {spec.input_dim}")
    if spec.kind == ModelKind.LINEAR:
        return X @ p["W"] + p["b"]
    return np.tanh(X @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def loss_and_grad(params: ParamVector, X: np.ndarray, y: np.ndarray,
                  spec: ModelSpec) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its analytic gradient (flat, layout order)"""
    p = unflatten(params, spec)
    n = X.shape[0]
    rows = np.arange(n)

    if spec.kind == ModelKind.LINEAR:
        logits = X @ p["W"] + p["b"]
    else:
        hidden = np.tanh(X @ p["W1"] + p["b1"])
        logits = hidden @ p["W2"] + p["b2"]

    log_probs = _log_softmax(logits)
    loss = float(-log_probs[rows, y].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, y] -= 1.0
    dlogits /= n

    if spec.kind == ModelKind.LINEAR:
        grads = [X.T @ dlogits, dlogits.sum(axis=0)]
    else:
        dhidden = (dlogits @ p["W2"].T) * (1.0 - hidden ** 2)
        grads = [X.T @ dhidden, dhidden.sum(axis=0), hidden.T @ dlogits, dlogits.sum(axis=0)]
    return loss, np.concatenate([g.reshape(-1) for g in grads])


def local_train(params: ParamVector, data: Dataset, spec: ModelSpec, epochs: int, lr: float,
                batch_size: int, seed: int, epoch_offset: int = 0) -> ParamVector:
    """Mini-batch SGD for `epochs` full passes over `data`.

    Epoch ``e`` (counted from ``epoch_offset``) shuffles with
    ``derive_seed(seed, e)``, so two calls of one epoch each with offsets 0
    and 1 reproduce a single two-epoch call.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    check_dim(params, spec)

    weights = np.array(params, dtype=np.float64, copy=True)
    n = len(data)
    for epoch in range(epoch_offset, epoch_offset + epochs):
        order = np.random.default_rng(derive_seed(seed, epoch)).permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            loss, grad = loss_and_grad(weights, data.features[batch], data.labels[batch], spec)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(epoch, client_id=data.client_id)
            weights -= lr * grad
        if not np.all(np.isfinite(weights)):
            raise DivergenceError(epoch, client_id=data.client_id)
    return as_param_vector(weights)


def evaluate(params: ParamVector, data: Dataset, spec: ModelSpec) -> Tuple[float, float]:
    """(mean cross-entropy, argmax accuracy)"""
    logits = predict_logits(params, data.features, spec)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(len(data)), data.labels].mean())
    accuracy = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    return loss, accuracy


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def fedavg_weights(updates: Sequence[LocalUpdate]) -> Dict[int, float]:
    """Contribution weights n_i / sum(n_j), keyed by client id"""
    total = sum(u.sample_size for u in updates)
    return {u.client_id: u.sample_size / total for u in updates}


def aggregate(updates: Sequence[LocalUpdate], weights_rule: str = "by-sample-size") -> ParamVector:
    """Sample-size weighted mean, summed in ascending client-id order"""
    if weights_rule != "by-sample-size":
        raise ValueError(f"Unknown aggregating rule: {weights_rule}")
    if not updates:
        raise ShapeMismatchError("Cannot aggregate an empty update set")
    dims = {u.params.shape[0] for u in updates}
    if len(dims) != 1:
        raise ShapeMismatchError(f"Updates disagree on dimension: {sorted(dims)}")
    if any(u.sample_size <= 0 for u in updates):
        raise ShapeMismatchError("Reported sample sizes must be > 0")

    ordered = sorted(updates, key=lambda u: (u.client_id, u.digest))
    total = sum(u.sample_size for u in ordered)
    acc = (ordered[0].sample_size / total) * ordered[0].params
    for u in ordered[1:]:
        acc = acc + (u.sample_size / total) * u.params
    return as_param_vector(acc)


def apply_update(global_params: ParamVector, aggregated_delta: ParamVector) -> ParamVector:
    return as_param_vector(global_params + aggregated_delta)
