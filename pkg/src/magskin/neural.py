"""From-scratch feed-forward decoder with exact backpropagation.

Architecture: 15 -> 200 -> 200 -> 40 -> 200 -> 200 -> out, with ReLU
after the first, fourth and fifth affine maps.  The 40-dim output of the
third affine map is the bottleneck feature layer; the ordering-based
triplet loss operates on it.  Everything is float64 numpy so analytic
gradients can be checked sharply against central finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DIMS = (15, 200, 200, 40, 200, 200, 3)
DEFAULT_RELU_MASK = (True, False, False, True, True, False)
FEAT_INDEX = 3  # feature layer = output of the third affine map


class NonFiniteLossError(RuntimeError):
    """Training diverged to a non-finite loss."""


@dataclass
class Normalizer:
    """Per-feature standardization fit on training inputs."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return cls(mean=X.mean(axis=0), sd=sd)

    @classmethod
    def identity(cls, dim):
        return cls(mean=np.zeros(dim), sd=np.ones(dim))

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.sd


class MlpModel:
    """Stack of affine maps with a per-layer ReLU mask.

    weights[i] has shape (dims[i], dims[i+1]); biases[i] shape (dims[i+1],).
    """

    def __init__(self, dims=DEFAULT_DIMS, relu_mask=None, feat_index=FEAT_INDEX,
                 normalizer=None, seed=0, relu_all=False):
        dims = tuple(dims)
        if relu_mask is None:
            n = len(dims) - 1
            if dims == DEFAULT_DIMS or len(dims) == 7:
                relu_mask = list(DEFAULT_RELU_MASK)
            else:
                relu_mask = [True] * (n - 1) + [False]
        relu_mask = list(relu_mask)
        if relu_all:
            relu_mask = [True] * (len(dims) - 2) + [False]
        if len(relu_mask) != len(dims) - 1:
            raise ValueError("relu_mask length must match layer count")
        self.dims = dims
        self.relu_mask = tuple(relu_mask)
        self.feat_index = feat_index
        self.normalizer = normalizer or Normalizer.identity(dims[0])
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            self.weights.append(rng.uniform(-bound, bound, (d_in, d_out)))
            self.biases.append(rng.uniform(-bound, bound, d_out))

    @property
    def out_dim(self):
        return self.dims[-1]

    def clone(self):
        m = MlpModel.__new__(MlpModel)
        m.dims = self.dims
        m.relu_mask = self.relu_mask
        m.feat_index = self.feat_index
        m.normalizer = Normalizer(mean=self.normalizer.mean.copy(),
                                  sd=self.normalizer.sd.copy())
        m.weights = [w.copy() for w in self.weights]
        m.biases = [b.copy() for b in self.biases]
        return m

    def parameters(self):
        return self.weights + self.biases

    # -- forward ----------------------------------------------------------

    def _forward_cached(self, X, upto=None):
        """Activations after each affine(+ReLU); caches for backprop.

        Returns (activations, relu_gates).  activations[0] is the
        normalized input; activations[i+1] the output of layer i.
        """
        h = self.normalizer.transform(np.atleast_2d(X))
        acts = [h]
        gates = []
        n = len(self.weights) if upto is None else upto
        for i in range(n):
            z = h @ self.weights[i] + self.biases[i]
            if self.relu_mask[i]:
                gate = z > 0
                z = z * gate
            else:
                gate = None
            gates.append(gate)
            acts.append(z)
            h = z
        return acts, gates

    def forward(self, X):
        """Predictions in physical units; (out_dim,) for a single input."""
        single = np.asarray(X).ndim == 1
        acts, _ = self._forward_cached(X)
        out = acts[-1]
        return out[0] if single else out

    def feat(self, X):
        """Bottleneck feature vectors (the third affine map's output)."""
        single = np.asarray(X).ndim == 1
        acts, _ = self._forward_cached(X, upto=self.feat_index)
        out = acts[-1]
        return out[0] if single else out

    def predict(self, X):
        """(locations (n, 2), forces (n, out_dim - 2))."""
        out = np.atleast_2d(self.forward(X))
        return out[:, :2], out[:, 2:]

    # -- backward ---------------------------------------------------------

    def _zero_grads(self):
        return ([np.zeros_like(w) for w in self.weights],
                [np.zeros_like(b) for b in self.biases])

    def _backprop(self, acts, gates, dout, gw, gb, n_layers):
        d = dout
        for i in range(n_layers - 1, -1, -1):
            if gates[i] is not None:
                d = d * gates[i]
            gw[i] += acts[i].T @ d
            gb[i] += d.sum(axis=0)
            if i > 0:
                d = d @ self.weights[i].T


def l2_loss(predictions, labels, weights=None):
    """Mean over the batch of the (optionally weighted) squared-error sum."""
    p = np.atleast_2d(np.asarray(predictions, dtype=float))
    y = np.atleast_2d(np.asarray(labels, dtype=float))
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    err = p - y
    if weights is not None:
        err = err * np.sqrt(np.asarray(weights, dtype=float))
    return float(np.mean(np.sum(err**2, axis=1)))


def l2_backward(model: MlpModel, X, y, weights=None):
    """(loss, grads) for the L2 regression loss on a batch."""
    X = np.atleast_2d(X)
    y = np.atleast_2d(y)
    acts, gates = model._forward_cached(X)
    err = acts[-1] - y
    w = 1.0 if weights is None else np.asarray(weights, dtype=float)
    loss = float(np.mean(np.sum(w * err**2, axis=1)))
    dout = 2.0 * w * err / len(X)
    gw, gb = model._zero_grads()
    model._backprop(acts, gates, dout, gw, gb, len(model.weights))
    return loss, (gw, gb)


def triplet_loss(model: MlpModel, anchor, positive, negative):
    """Zero-margin feature-space hinge: mean of max(0, d_ap^2 - d_an^2)."""
    fa = np.atleast_2d(model.feat(anchor))
    fp = np.atleast_2d(model.feat(positive))
    fn = np.atleast_2d(model.feat(negative))
    dap = np.sum((fa - fp) ** 2, axis=1)
    dan = np.sum((fa - fn) ** 2, axis=1)
    return float(np.mean(np.maximum(0.0, dap - dan)))


def triplet_backward(model: MlpModel, anchor, positive, negative):
    """(loss, grads) for the triplet loss; gradients touch only the
    feature-extraction layers."""
    A = np.atleast_2d(anchor)
    P = np.atleast_2d(positive)
    N = np.atleast_2d(negative)
    k = model.feat_index
    acts_a, gates_a = model._forward_cached(A, upto=k)
    acts_p, gates_p = model._forward_cached(P, upto=k)
    acts_n, gates_n = model._forward_cached(N, upto=k)
    fa, fp, fn = acts_a[-1], acts_p[-1], acts_n[-1]
    dap = np.sum((fa - fp) ** 2, axis=1)
    dan = np.sum((fa - fn) ** 2, axis=1)
    hinge = dap - dan
    active = (hinge > 0).astype(float)[:, None]
    loss = float(np.mean(np.maximum(0.0, hinge)))
    b = len(A)
    dfa = active * (2.0 * (fa - fp) - 2.0 * (fa - fn)) / b
    dfp = active * (-2.0 * (fa - fp)) / b
    dfn = active * (2.0 * (fa - fn)) / b
    gw, gb = model._zero_grads()
    model._backprop(acts_a, gates_a, dfa, gw, gb, k)
    model._backprop(acts_p, gates_p, dfp, gw, gb, k)
    model._backprop(acts_n, gates_n, dfn, gw, gb, k)
    return loss, (gw, gb)


def combined_backward(model: MlpModel, X, y, triplets=None,
                      triplet_weight=1.0, l2_weights=None):
    """Weighted sum of the L2 batch gradient and a triplet batch gradient."""
    loss, (gw, gb) = l2_backward(model, X, y, weights=l2_weights)
    if triplets is not None and triplet_weight > 0:
        a, p, n = triplets
        tl, (tgw, tgb) = triplet_backward(model, a, p, n)
        loss += triplet_weight * tl
        for g, tg in zip(gw, tgw):
            g += triplet_weight * tg
        for g, tg in zip(gb, tgb):
            g += triplet_weight * tg
    return loss, (gw, gb)


class Adam:
    """Standard Adam with bias correction; state per parameter tensor."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    triplet_weight: float = 0.0
    val_fraction: float = 0.1
    relu_all: bool = False
    loc_weight: float = 1.0
    force_weight: float = 1.0
    adapt_lr: float = 5e-4
    adapt_epochs: int = 50
    adapt_triplet_weight: float = 30.0
    freeze_head: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.triplet_weight < 0:
            raise ValueError("triplet_weight must be >= 0")

    def component_weights(self, out_dim):
        w = np.full(out_dim, self.force_weight)
        w[:2] = self.loc_weight
        return w


def _labeled_triplets_in_batch(locations, sensor_idx, rng, n):
    """Triplet index triples within one batch, ordered by true location
    distance, anchor/positive/negative all from the same sensor."""
    b = len(locations)
    cand = rng.integers(0, b, (3 * n, 3))
    a, p, q = cand[:, 0], cand[:, 1], cand[:, 2]
    ok = (a != p) & (a != q) & (p != q)
    if sensor_idx is not None:
        ok &= (sensor_idx[a] == sensor_idx[p]) & (sensor_idx[a] == sensor_idx[q])
    dp = np.linalg.norm(locations[a] - locations[p], axis=1)
    dq = np.linalg.norm(locations[a] - locations[q], axis=1)
    ok &= dp != dq
    a, p, q, dp, dq = a[ok], p[ok], q[ok], dp[ok], dq[ok]
    swap = dp > dq
    p2 = np.where(swap, q, p)
    q2 = np.where(swap, p, q)
    return np.column_stack([a, p2, q2])[:n]


def train(model: MlpModel, X, y, config: TrainConfig, locations=None,
          sensor_idx=None, val_data=None, log=None):
    """Minibatch Adam training of the configured loss; pure in the seed.

    When config.triplet_weight > 0 each step also minimizes the triplet
    loss over labeled triplets drawn from the batch (ordered by true
    contact distance, within one sensor).  Returns the trained model;
    appends one dict per epoch to ``log`` when given.
    """
    X = np.asarray(X, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(X) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)

    if val_data is None and config.val_fraction > 0 and len(X) >= 20:
        perm = rng.permutation(len(X))
        n_val = max(1, int(len(X) * config.val_fraction))
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        val_data = (X[val_idx], y[val_idx])
        X, y = X[tr_idx], y[tr_idx]
        if locations is not None:
            locations = np.asarray(locations)[tr_idx]
        if sensor_idx is not None:
            sensor_idx = np.asarray(sensor_idx)[tr_idx]

    model.normalizer = Normalizer.fit(X)
    comp_w = config.component_weights(model.out_dim)
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    n = len(X)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            triplets = None
            if config.triplet_weight > 0 and locations is not None and len(idx) >= 3:
                trip_idx = _labeled_triplets_in_batch(
                    np.asarray(locations)[idx],
                    None if sensor_idx is None else np.asarray(sensor_idx)[idx],
                    rng, len(idx))
                if len(trip_idx):
                    bx = X[idx]
                    triplets = (bx[trip_idx[:, 0]], bx[trip_idx[:, 1]],
                                bx[trip_idx[:, 2]])
            loss, (gw, gb) = combined_backward(
                model, X[idx], y[idx], triplets=triplets,
                triplet_weight=config.triplet_weight, l2_weights=comp_w)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}")
            opt.step(params, gw + gb)
            epoch_loss += loss
            n_batches += 1
        entry = {"epoch": epoch, "train_loss": epoch_loss / max(1, n_batches)}
        if val_data is not None:
            entry["val_loss"] = l2_loss(model.forward(val_data[0]), val_data[1],
                                        weights=comp_w)
        if log is not None:
            log.append(entry)
    return model


def training_log_csv(log) -> str:
    cols = ["epoch", "train_loss"] + (["val_loss"] if log and "val_loss" in log[0] else [])
    lines = [",".join(cols)]
    for e in log:
        lines.append(",".join(repr(e[c]) if c != "epoch" else str(e[c]) for c in cols))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint format: JSON descriptor + row-major float64 weight blobs

_CKPT_MAGIC = b"MSKM"
_CKPT_VERSION = 1


def save_model(model: MlpModel, path):
    header = {
        "version": _CKPT_VERSION,
        "dims": list(model.dims),
        "relu_mask": [bool(m) for m in model.relu_mask],
        "feat_index": model.feat_index,
        "normalizer": {"mean": list(model.normalizer.mean),
                       "sd": list(model.normalizer.sd)},
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for w, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_model(path) -> MlpModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    if header["version"] != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    dims = tuple(header["dims"])
    model = MlpModel(dims=dims, relu_mask=header["relu_mask"],
                     feat_index=header["feat_index"], seed=0)
    model.normalizer = Normalizer(
        mean=np.array(header["normalizer"]["mean"], dtype=float),
        sd=np.array(header["normalizer"]["sd"], dtype=float))
    off = 8 + hlen
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        nb = d_in * d_out * 8
        model.weights[i] = np.frombuffer(data[off:off + nb]).reshape(d_in, d_out).copy()
        off += nb
        model.biases[i] = np.frombuffer(data[off:off + d_out * 8]).copy()
        off += d_out * 8
    return model
