"""Small dense classifier with hand-written forward/backward passes.

It is the accuracy oracle for every lock evaluation: big enough that a
trained net is unambiguous against random guessing, small enough that
thousands of brute-force candidates evaluate in seconds. Parameters live in
a ParamStore so every transform applies unchanged.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import SchemaError
from .params import FP32, Dtype, ParamStore, ParamTensor

DEFAULT_SIZES = (2, 64, 64, 4)


@dataclass(frozen=True)
class Dataset:
    """Synthetic Gaussian-blob classification task, one blob per class."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def classes(self) -> int:
        return int(self.y_train.max()) + 1


def make_dataset(
    seed: int = 0,
    classes: int = 4,
    train_per_class: int = 512,
    test_per_class: int = 512,
    radius: float = 2.0,
    noise: float = 0.6,
) -> Dataset:
    """Deterministic blob task; class counts are exactly balanced."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    angles = 2 * np.pi * (np.arange(classes) + 0.5) / classes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def split(per_class):
        xs, ys = [], []
        for c in range(classes):
            xs.append(means[c] + noise * rng.standard_normal((per_class, 2)))
            ys.append(np.full(per_class, c, dtype=np.int64))
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return x[order], y[order]

    x_tr, y_tr = split(train_per_class)
    x_te, y_te = split(test_per_class)
    return Dataset(x_tr, y_tr, x_te, y_te)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    latency: float  # seconds for the full test split
    throughput: float  # samples per second


class TinyNet:
    """Dense tanh MLP; weights is a list of (W, b) float32 pairs."""

    def __init__(self, weights, meta: dict[str, str] | None = None):
        self.weights = [(np.asarray(w, np.float32), np.asarray(b, np.float32)) for w, b in weights]
        sizes = [self.weights[0][0].shape[1]] + [w.shape[0] for w, _ in self.weights]
        for i, (w, b) in enumerate(self.weights):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise SchemaError(f"layer {i} shapes do not chain")
        self.sizes = tuple(sizes)
        self.meta = dict(meta or {})
        self.meta.setdefault("arch", "mlp:" + "-".join(map(str, sizes)))
        self.meta.setdefault("classes", str(sizes[-1]))
        self.meta.setdefault("activation", "tanh")

    @classmethod
    def init(cls, seed: int = 0, sizes=DEFAULT_SIZES) -> "TinyNet":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(
                (
                    (rng.standard_normal((fan_out, fan_in)) * scale).astype(np.float32),
                    np.zeros(fan_out, dtype=np.float32),
                )
            )
        return cls(weights)

    @property
    def classes(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "TinyNet":
        return TinyNet([(w.copy(), b.copy()) for w, b in self.weights], self.meta)

    # --- ParamStore bridge ---

    def to_store(self, dtype: Dtype = FP32, extra_meta: dict[str, str] | None = None) -> ParamStore:
        tensors = []
        for i, (w, b) in enumerate(self.weights):
            tensors.append(ParamTensor.from_values(f"layer{i}.weight", w, dtype))
            tensors.append(ParamTensor.from_values(f"layer{i}.bias", b, dtype))
        meta = dict(self.meta)
        meta.update(extra_meta or {})
        return ParamStore(tensors, meta)

    @classmethod
    def from_store(cls, store: ParamStore) -> "TinyNet":
        weights = []
        i = 0
        while True:
            try:
                w = store[f"layer{i}.weight"].values()
            except KeyError:
                break
            b = store[f"layer{i}.bias"].values()
            weights.append((w, b))
            i += 1
        if not weights:
            raise SchemaError("store holds no layer tensors")
        return cls(weights, {k: v for k, v in store.meta.items()})

    # --- math ---

    def forward(self, x: np.ndarray, weights=None) -> np.ndarray:
        weights = self.weights if weights is None else weights
        with np.errstate(all="ignore"):  # garbage weights must not raise
            h = x
            for w, b in weights[:-1]:
                h = np.tanh(h @ w.T + b)
            w, b = weights[-1]
            return h @ w.T + b

    def predict(self, x: np.ndarray, weights=None) -> np.ndarray:
        return np.argmax(self.forward(x, weights), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray, weights=None) -> float:
        return float((self.predict(x, weights) == y).mean())

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, weights=None):
        """Mean cross-entropy and its gradients w.r.t. the given weights."""
        weights = self.weights if weights is None else weights
        acts = [x]
        h = x
        for w, b in weights[:-1]:
            h = np.tanh(h @ w.T + b)
            acts.append(h)
        w, b = weights[-1]
        logits = h @ w.T + b

        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=1, keepdims=True)
        n = len(y)
        loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())

        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads = [None] * len(weights)
        for i in range(len(weights) - 1, -1, -1):
            a = acts[i]
            grads[i] = ((delta.T @ a).astype(np.float32), delta.sum(axis=0).astype(np.float32))
            if i > 0:
                delta = (delta @ weights[i][0]) * (1.0 - acts[i] ** 2)
        return loss, grads


# --- pruning and fake quantization -------------------------------------------


def magnitude_masks(arrays, p: float):
    """{0,1} masks zeroing the globally smallest-magnitude fraction p.

    Ties break by (array order, flat index) ascending, so the mask is a pure
    function of the values.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    flat = np.concatenate([np.abs(np.asarray(a, np.float32)).reshape(-1) for a in arrays])
    total = flat.size
    kill = int(round(p * total))
    order = np.lexsort((np.arange(total), flat))  # magnitude, then global position
    dead = np.zeros(total, dtype=bool)
    dead[order[:kill]] = True
    masks, at = [], 0
    for a in arrays:
        n = int(np.prod(a.shape, dtype=np.int64))
        masks.append((~dead[at : at + n]).astype(np.float32).reshape(a.shape))
        at += n
    return masks


def prune_l1_unstructured(store: ParamStore, p: float) -> dict[str, np.ndarray]:
    """Zero-mask over the globally smallest-magnitude fraction p of weights.

    Only `.weight` tensors participate. Returns a name -> mask map.
    """
    names = [t.name for t in store.tensors if t.name.endswith(".weight")]
    masks = magnitude_masks([store[n].values() for n in names], p)
    return dict(zip(names, masks))


def mask_weights(weights, masks: dict[str, np.ndarray]):
    """Apply a mask map to a TinyNet weight list (biases untouched)."""
    out = []
    for i, (w, b) in enumerate(weights):
        m = masks.get(f"layer{i}.weight")
        out.append((w * m if m is not None else w, b))
    return out


def net_masks(net: TinyNet, p: float) -> dict[str, np.ndarray]:
    """Magnitude masks recomputed from the net's current weights."""
    if p == 0.0:
        return {}
    return prune_l1_unstructured(net.to_store(), p)


def fake_quantize(store: ParamStore, scheme: Dtype) -> ParamStore:
    """Round every tensor through `scheme` but keep full-precision storage.

    int8 with no explicit scale uses the per-tensor symmetric scale
    max|w|/127.
    """
    tensors = []
    for t in store.tensors:
        tensors.append(
            ParamTensor.from_values(t.name, quantize_values(t.values(), scheme), t.dtype)
        )
    return ParamStore(tensors, store.meta)


def quantize_values(values: np.ndarray, scheme: Dtype) -> np.ndarray:
    if scheme.tag == "int8" and scheme.scale is None:
        peak = float(np.abs(values).max())
        if peak == 0.0:
            return values.astype(np.float32)
        scheme = Dtype("int8", scale=peak / 127.0, zero_point=scheme.zero_point)
    return scheme.decode(scheme.encode(np.asarray(values, dtype=np.float64)))


def quantize_weights(weights, scheme: Dtype):
    return [(quantize_values(w, scheme), quantize_values(b, scheme)) for w, b in weights]


# --- training and evaluation --------------------------------------------------


class Adam:
    def __init__(self, shapes, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s, np.float32) for s in shapes]
        self.v = [np.zeros(s, np.float32) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        corr1 = 1.0 - self.b1**self.t
        corr2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[i] / corr1) / (np.sqrt(self.v[i] / corr2) + self.eps)


def train(
    net: TinyNet,
    data: Dataset,
    epochs: int = 30,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
) -> TinyNet:
    """Plain cross-entropy training; bit-deterministic given the seed."""
    from .softlock import _lock_loop  # single shared loop keeps trajectories comparable

    return _lock_loop(net, data, epochs, lr, seed, batch_size, branch1=None, branch2=None).net


def evaluate(
    net: TinyNet,
    data: Dataset,
    masks: dict[str, np.ndarray] | None = None,
    scheme: Dtype | None = None,
) -> EvalReport:
    """Accuracy and wall-clock latency on the full test split, optionally
    through a prune mask and/or fake quantization."""
    weights = net.weights
    if masks:
        weights = mask_weights(weights, masks)
    if scheme is not None:
        weights = quantize_weights(weights, scheme)
    t0 = time.perf_counter()
    pred = net.predict(data.x_test, weights)
    latency = time.perf_counter() - t0
    acc = float((pred == data.y_test).mean())
    return EvalReport(acc, latency, len(data.y_test) / max(latency, 1e-12))


def accuracy_of_store(store: ParamStore, data: Dataset) -> float:
    """Accuracy oracle used by the cracker: rebuild the net and score it."""
    return TinyNet.from_store(store).accuracy(data.x_test, data.y_test)


# --- sparse vs emulated micro-benchmark ---------------------------------------


@dataclass(frozen=True)
class BenchSide:
    latency: float
    throughput: float  # logical dense op/s, so both sides share one scale


@dataclass(frozen=True)
class BenchReport:
    real: BenchSide
    emulated: BenchSide
    max_rel_err: float
    dim: int
    sparsity: float


def bench_sparse_vs_emulated(
    dim: int,
    sparsity: float,
    batch: int = 256,
    repeats: int = 7,
    seed: int = 0,
) -> BenchReport:
    """Compare a CSR kernel against masked-dense emulation of sparsity.

    The emulated path mirrors software emulation of sparse hardware: keep the
    dense weights plus a mask, apply the mask and run a dense matmul on every
    call. Both paths compute the same product.
    """
    if dim < 1 or not 0.0 <= sparsity <= 1.0:
        raise ValueError("dim must be >= 1 and sparsity in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE4C]))
    w = rng.standard_normal((dim, dim)).astype(np.float32)
    mask = (rng.random((dim, dim)) >= sparsity).astype(np.float32)
    x = rng.standard_normal((dim, batch)).astype(np.float32)
    w_masked = w * mask
    w_csr = sparse.csr_matrix(w_masked)

    def timed(fn):
        best = np.inf
        out = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            best = min(best, time.perf_counter() - t0)
        return out, best

    y_real, t_real = timed(lambda: w_csr @ x)
    y_emu, t_emu = timed(lambda: (w * mask) @ x)

    denom = np.abs(y_emu).max()
    rel = float(np.abs(np.asarray(y_real) - y_emu).max() / denom) if denom > 0 else 0.0
    ops = 2.0 * dim * dim * batch
    return BenchReport(
        BenchSide(t_real, ops / max(t_real, 1e-12)),
        BenchSide(t_emu, ops / max(t_emu, 1e-12)),
        rel,
        dim,
        sparsity,
    )
