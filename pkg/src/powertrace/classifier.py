"""Bidirectional GRU mapping workload features to per-timestep state probabilities.

Pure numpy, float64, with a hand-written backward pass.  Cell equations
(gate order r, z, n in the stacked weight matrices)::

    r = sigmoid(Wx_r x + bx_r + Wh_r h + bh_r)
    z = sigmoid(Wx_z x + bx_z + Wh_z h + bh_z)
    n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
    h' = (1 - z) * n + z * h

The forward and backward hidden states are concatenated and projected to K
logits followed by a softmax.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from powertrace.errors import DataError, TrainingError
from powertrace.types import SeedLike, as_rng
from powertrace.workload import FeatureSeries

log = logging.getLogger(__name__)

INPUT_DIM = 2
DIRECTIONS = ("fwd", "bwd")
CELL_TENSORS = ("Wx", "Wh", "bx", "bh")


def param_names() -> List[str]:
    return [f"{t}_{d}" for d in DIRECTIONS for t in CELL_TENSORS] + ["W_out", "b_out"]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ClassifierModel:
    """Weights plus the feature normalization applied before the recurrent pass."""

    params: Dict[str, np.ndarray]
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(INPUT_DIM))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(INPUT_DIM))

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64).reshape(INPUT_DIM)
        self.feature_std = np.asarray(self.feature_std, dtype=np.float64).reshape(INPUT_DIM)
        missing = set(param_names()) - set(self.params)
        if missing:
            raise ValueError(f"missing classifier tensors: {sorted(missing)}")
        H = self.hidden_size
        K = self.n_states
        expected = {"W_out": (K, 2 * H), "b_out": (K,)}
        for d in DIRECTIONS:
            expected.update({f"Wx_{d}": (3 * H, INPUT_DIM), f"Wh_{d}": (3 * H, H),
                             f"bx_{d}": (3 * H,), f"bh_{d}": (3 * H,)})
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        if not all(np.all(np.isfinite(p)) for p in self.params.values()):
            raise ValueError("classifier weights must be finite")
        if np.any(self.feature_std <= 0):
            raise ValueError("feature std must be positive")

    @property
    def hidden_size(self) -> int:
        return self.params["Wh_fwd"].shape[1]

    @property
    def n_states(self) -> int:
        return self.params["b_out"].shape[0]

    @classmethod
    def initialize(cls, n_states: int, hidden_size: int = 64, seed: SeedLike = 0,
                   feature_mean=None, feature_std=None) -> "ClassifierModel":
        """Uniform(-1/sqrt(H), 1/sqrt(H)) init for every tensor."""
        if n_states < 1:
            raise ValueError("n_states must be >= 1")
        rng = as_rng(seed)
        H = hidden_size
        bound = 1.0 / math.sqrt(H)
        shapes = {}
        for d in DIRECTIONS:
            shapes.update({f"Wx_{d}": (3 * H, INPUT_DIM), f"Wh_{d}": (3 * H, H),
                           f"bx_{d}": (3 * H,), f"bh_{d}": (3 * H,)})
        shapes.update({"W_out": (n_states, 2 * H), "b_out": (n_states,)})
        params = {name: rng.uniform(-bound, bound, size=shape) for name, shape in shapes.items()}
        return cls(params,
                   np.zeros(INPUT_DIM) if feature_mean is None else feature_mean,
                   np.ones(INPUT_DIM) if feature_std is None else feature_std)

    def copy(self) -> "ClassifierModel":
        return ClassifierModel({k: v.copy() for k, v in self.params.items()},
                               self.feature_mean.copy(), self.feature_std.copy())

    def swap_directions(self) -> "ClassifierModel":
        """Same network with the forward and backward roles exchanged."""
        H = self.hidden_size
        p = {}
        for t in CELL_TENSORS:
            p[f"{t}_fwd"] = self.params[f"{t}_bwd"].copy()
            p[f"{t}_bwd"] = self.params[f"{t}_fwd"].copy()
        W = self.params["W_out"]
        p["W_out"] = np.concatenate([W[:, H:], W[:, :H]], axis=1)
        p["b_out"] = self.params["b_out"].copy()
        return ClassifierModel(p, self.feature_mean.copy(), self.feature_std.copy())

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_std

    def to_dict(self) -> dict:
        return {
            "input_dim": INPUT_DIM,
            "hidden_size": self.hidden_size,
            "n_states": self.n_states,
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "tensors": {k: {"shape": list(self.params[k].shape), "data": self.params[k].ravel().tolist()}
                        for k in param_names()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        if int(d.get("input_dim", INPUT_DIM)) != INPUT_DIM:
            raise ValueError(f"classifier input_dim must be {INPUT_DIM}")
        params = {}
        for name in param_names():
            t = d["tensors"][name]
            params[name] = np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        return cls(params, d["feature_mean"], d["feature_std"])

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        return (np.array_equal(self.feature_mean, other.feature_mean)
                and np.array_equal(self.feature_std, other.feature_std)
                and set(self.params) == set(other.params)
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))

    __hash__ = None


# --------------------------------------------------------------------------- #
# forward / backward
# --------------------------------------------------------------------------- #

def _run_direction(params, d, X, keep_cache=True):
    """Run one direction over ``X`` of shape (B, T, D) in its own time order.

    Returns hidden states ``(B, T, H)`` in that time order and the step cache.
    """
    Wx, Wh, bx, bh = (params[f"{t}_{d}"] for t in CELL_TENSORS)
    B, T, _ = X.shape
    H = Wh.shape[1]
    gx = X @ Wx.T + bx
    hs = np.empty((B, T, H))
    cache = [] if keep_cache else None
    h = np.zeros((B, H))
    WhT = Wh.T
    for t in range(T):
        gh = h @ WhT + bh
        g = gx[:, t]
        r = _sigmoid(g[:, :H] + gh[:, :H])
        z = _sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
        ghn = gh[:, 2 * H:]
        n = np.tanh(g[:, 2 * H:] + r * ghn)
        h_new = (1.0 - z) * n + z * h
        if keep_cache:
            cache.append((h, r, z, n, ghn))
        hs[:, t] = h_new
        h = h_new
    return hs, cache


def _backprop_direction(params, d, X, cache, dhs):
    """Gradients of one direction given ``dhs`` = dL/dh_t (B, T, H) in its time order."""
    Wh = params[f"Wh_{d}"]
    B, T, H = dhs.shape
    dgx = np.empty((B, T, 3 * H))
    dWh = np.zeros_like(Wh)
    dbh = np.zeros(3 * H)
    dh_next = np.zeros((B, H))
    dgh = np.empty((B, 3 * H))
    for t in range(T - 1, -1, -1):
        h_prev, r, z, n, ghn = cache[t]
        dh = dhs[:, t] + dh_next
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (h_prev - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgx[:, t, :H] = dr_pre
        dgx[:, t, H:2 * H] = dz_pre
        dgx[:, t, 2 * H:] = dn_pre
        dgh[:, :H] = dr_pre
        dgh[:, H:2 * H] = dz_pre
        dgh[:, 2 * H:] = dn_pre * r
        dWh += dgh.T @ h_prev
        dbh += dgh.sum(axis=0)
        dh_next = dh * z + dgh @ Wh
    flat = dgx.reshape(B * T, 3 * H)
    return {
        f"Wx_{d}": flat.T @ X.reshape(B * T, -1),
        f"bx_{d}": flat.sum(axis=0),
        f"Wh_{d}": dWh,
        f"bh_{d}": dbh,
    }


def forward_logits(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    """Logits ``(B, T, K)`` for already-normalized inputs ``X`` of shape (B, T, 2)."""
    hf, _ = _run_direction(model.params, "fwd", X, keep_cache=False)
    hb_rev, _ = _run_direction(model.params, "bwd", X[:, ::-1], keep_cache=False)
    Hcat = np.concatenate([hf, hb_rev[:, ::-1]], axis=2)
    return Hcat @ model.params["W_out"].T + model.params["b_out"]


def loss_and_grads(model: ClassifierModel, X: np.ndarray, Y: np.ndarray,
                   loss_scale: float = 1.0) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean per-timestep cross-entropy (times ``loss_scale``) and its gradients.

    ``X`` is normalized input (B, T, 2); ``Y`` integer labels (B, T).
    """
    params = model.params
    B, T, _ = X.shape
    hf, cache_f = _run_direction(params, "fwd", X)
    Xr = X[:, ::-1]
    hb_rev, cache_b = _run_direction(params, "bwd", Xr)
    Hcat = np.concatenate([hf, hb_rev[:, ::-1]], axis=2)
    logits = Hcat @ params["W_out"].T + params["b_out"]
    m = logits.max(axis=-1, keepdims=True)
    logZ = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    picked = np.take_along_axis(logits, Y[..., None], axis=-1)[..., 0]
    count = B * T
    loss = loss_scale * float(np.sum(logZ - picked)) / count

    probs = np.exp(logits - logZ[..., None])
    dlogits = probs
    onehot_idx = (np.repeat(np.arange(B), T), np.tile(np.arange(T), B), Y.reshape(-1))
    dlogits[onehot_idx] -= 1.0
    dlogits *= loss_scale / count

    H = model.hidden_size
    flat_d = dlogits.reshape(count, -1)
    grads = {
        "W_out": flat_d.T @ Hcat.reshape(count, -1),
        "b_out": flat_d.sum(axis=0),
    }
    dH = dlogits @ params["W_out"]
    grads.update(_backprop_direction(params, "fwd", X, cache_f, dH[:, :, :H]))
    grads.update(_backprop_direction(params, "bwd", Xr, cache_b, dH[:, ::-1, H:]))
    return loss, grads


def predict_state_probs(model: ClassifierModel, features) -> np.ndarray:
    """Per-timestep state probabilities ``(T, K)`` from a full bidirectional pass."""
    return predict_state_probs_batch(model, [features])[0]


def predict_state_probs_batch(model: ClassifierModel, feature_list: Sequence, max_floats: int = 2 ** 25) -> List[np.ndarray]:
    """Probabilities for several sequences; equal-length sequences share one batched pass.

    Only the K-dimensional projections of each direction are kept, so memory is
    ``O(B * T * K)`` rather than ``O(B * T * H)``.
    """
    xs = [_as_matrix(f) for f in feature_list]
    out: List[Optional[np.ndarray]] = [None] * len(xs)
    by_len: Dict[int, List[int]] = {}
    for i, x in enumerate(xs):
        by_len.setdefault(x.shape[0], []).append(i)
    K = model.n_states
    for T, idxs in sorted(by_len.items()):
        per_seq = max(T * (K + 4 * model.hidden_size), 1)
        group = max(1, max_floats // per_seq)
        for g in range(0, len(idxs), group):
            members = idxs[g:g + group]
            X = model.normalize(np.stack([xs[i] for i in members]))
            probs = _softmax(_projected_logits(model, X))
            for j, i in enumerate(members):
                out[i] = probs[j]
    return out


def _projected_logits(model: ClassifierModel, X: np.ndarray) -> np.ndarray:
    params = model.params
    H = model.hidden_size
    W = params["W_out"]
    B, T, _ = X.shape
    logits = np.empty((B, T, W.shape[0]))
    logits[:] = params["b_out"]
    for d, Wd, order in (("fwd", W[:, :H].T, range(T)), ("bwd", W[:, H:].T, range(T - 1, -1, -1))):
        Wx, Wh, bx, bh = (params[f"{t}_{d}"] for t in CELL_TENSORS)
        WhT = Wh.T
        h = np.zeros((B, H))
        for t in order:
            g = X[:, t] @ Wx.T + bx
            gh = h @ WhT + bh
            r = _sigmoid(g[:, :H] + gh[:, :H])
            z = _sigmoid(g[:, H:2 * H] + gh[:, H:2 * H])
            n = np.tanh(g[:, 2 * H:] + r * gh[:, 2 * H:])
            h = (1.0 - z) * n + z * h
            logits[:, t] += h @ Wd
    return logits


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureSeries):
        return features.matrix()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != INPUT_DIM:
        raise ValueError(f"features must be a FeatureSeries or a (T, {INPUT_DIM}) array")
    return x


# --------------------------------------------------------------------------- #
# gradient check
# --------------------------------------------------------------------------- #

def numeric_gradient_check(model: ClassifierModel, X: np.ndarray, Y: np.ndarray, step: float = 1e-4,
                           loss_scale: float = 1.0, max_entries: Optional[int] = None, seed: SeedLike = 0) -> float:
    """Largest per-tensor relative error between analytic and central-difference gradients.

    ``X`` is normalized input (B, T, 2) with T <= 32.  The error of a tensor is
    ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``.  With
    ``max_entries`` only that many randomly chosen entries per tensor are probed.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    if X.ndim == 2:
        X, Y = X[None], Y[None]
    if X.shape[1] > 32:
        raise ValueError("gradient check is limited to sequences of at most 32 steps")
    _, grads = loss_and_grads(model, X, Y, loss_scale)
    rng = as_rng(seed)
    worst = 0.0
    for name in param_names():
        p = model.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx.tolist()):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = _loss_only(model, X, Y, loss_scale)
            flat[i] = orig - step
            lm, _ = _loss_only(model, X, Y, loss_scale)
            flat[i] = orig
            numeric[j] = (lp - lm) / (2 * step)
        analytic = grads[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if denom == 0:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def _loss_only(model, X, Y, loss_scale):
    logits = forward_logits(model, X)
    m = logits.max(axis=-1, keepdims=True)
    logZ = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    picked = np.take_along_axis(logits, Y[..., None], axis=-1)[..., 0]
    return loss_scale * float(np.sum(logZ - picked)) / Y.size, None


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    lr: float = 1e-3
    chunk_len: int = 512
    batch_size: int = 16
    hidden_size: int = 64
    patience: int = 10
    val_fraction: float = 0.15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainingReport:
    epochs_run: int
    final_loss: float
    val_accuracy: float
    loss_curve: List[float]
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return {"epochs_run": self.epochs_run, "final_loss": self.final_loss,
                "val_accuracy": self.val_accuracy, "best_epoch": self.best_epoch,
                "loss_curve": list(self.loss_curve)}


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _chunks(x: np.ndarray, y: np.ndarray, L: int):
    """Fixed-length windows; the last window is aligned to the sequence end (may overlap)."""
    T = x.shape[0]
    if T <= L:
        return [(x, y)]
    starts = list(range(0, T - L + 1, L))
    if starts[-1] + L < T:
        starts.append(T - L)
    return [(x[s:s + L], y[s:s + L]) for s in starts]


def _batches(chunks, batch_size, rng):
    by_len: Dict[int, list] = {}
    for c in chunks:
        by_len.setdefault(c[0].shape[0], []).append(c)
    batches = []
    for L in sorted(by_len):
        group = by_len[L]
        order = rng.permutation(len(group))
        for i in range(0, len(group), batch_size):
            sel = [group[j] for j in order[i:i + batch_size]]
            batches.append((np.stack([c[0] for c in sel]), np.stack([c[1] for c in sel])))
    return [batches[i] for i in rng.permutation(len(batches))]


def _accuracy(model, xs, ys) -> float:
    if not xs:
        return float("nan")
    probs = predict_state_probs_batch(model, xs)
    hits = sum(int(np.sum(np.argmax(p, axis=1) == y)) for p, y in zip(probs, ys))
    return hits / sum(y.size for y in ys)


def train_classifier(dataset: Sequence[Tuple[FeatureSeries, np.ndarray]], n_states: int,
                     hyper: TrainingConfig = TrainingConfig()) -> Tuple[ClassifierModel, TrainingReport]:
    """Fit a classifier to ``(features, labels)`` pairs.

    Validation holds out ``val_fraction`` of the sequences (at least one) when
    there are two or more; a single sequence is split by chunks instead.  The
    snapshot with the best validation accuracy is returned, and training stops
    after ``patience`` epochs without improvement.
    """
    if not dataset:
        raise DataError("need at least one training sequence")
    xs, ys = [], []
    for i, (feat, labels) in enumerate(dataset):
        x = _as_matrix(feat)
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if y.size != x.shape[0]:
            raise DataError(f"sequence {i}: {y.size} labels for {x.shape[0]} feature steps")
        if y.size == 0:
            raise DataError(f"sequence {i} is empty")
        if y.min() < 0 or y.max() >= n_states:
            raise DataError(f"sequence {i}: label {int(y.max()) if y.max() >= n_states else int(y.min())} outside [0, {n_states})")
        xs.append(x)
        ys.append(y)

    rng = np.random.default_rng(hyper.seed)
    if len(xs) >= 2:
        n_val = max(1, int(round(hyper.val_fraction * len(xs))))
        n_val = min(n_val, len(xs) - 1)
        perm = rng.permutation(len(xs))
        val_idx = set(perm[:n_val].tolist())
        train_x = [xs[i] for i in range(len(xs)) if i not in val_idx]
        train_y = [ys[i] for i in range(len(xs)) if i not in val_idx]
        val_x = [xs[i] for i in sorted(val_idx)]
        val_y = [ys[i] for i in sorted(val_idx)]
        train_chunks = [c for x, y in zip(train_x, train_y) for c in _chunks(x, y, hyper.chunk_len)]
    else:
        chunks = _chunks(xs[0], ys[0], hyper.chunk_len)
        train_x = [xs[0]]
        if len(chunks) >= 2:
            n_val = max(1, int(round(hyper.val_fraction * len(chunks))))
            perm = rng.permutation(len(chunks))
            val_set = set(perm[:n_val].tolist())
            val_x = [chunks[i][0] for i in sorted(val_set)]
            val_y = [chunks[i][1] for i in sorted(val_set)]
            train_chunks = [chunks[i] for i in range(len(chunks)) if i not in val_set]
        else:
            val_x, val_y = [xs[0]], [ys[0]]
            train_chunks = chunks

    stacked = np.concatenate(train_x, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std > 0, std, 1.0)

    model = ClassifierModel.initialize(n_states, hyper.hidden_size, rng, mean, std)
    train_chunks = [(model.normalize(x), y) for x, y in train_chunks]
    opt = Adam(model.params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)

    best = model.copy()
    best_acc = _accuracy(model, val_x, val_y)
    best_epoch = 0
    curve: List[float] = []
    stale = 0
    epoch = 0
    for epoch in range(1, hyper.epochs + 1):
        total, weight = 0.0, 0
        for X, Y in _batches(train_chunks, hyper.batch_size, rng):
            loss, grads = loss_and_grads(model, X, Y)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch)
            opt.step(model.params, grads)
            total += loss * Y.size
            weight += Y.size
        epoch_loss = total / weight
        curve.append(epoch_loss)
        acc = _accuracy(model, val_x, val_y)
        log.debug("epoch %d loss %.5f val_acc %.4f", epoch, epoch_loss, acc)
        if acc > best_acc:
            best, best_acc, best_epoch, stale = model.copy(), acc, epoch, 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    report = TrainingReport(epoch, curve[-1] if curve else float("nan"), best_acc, curve, best_epoch)
    return best, report
