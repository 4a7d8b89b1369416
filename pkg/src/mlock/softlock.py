"""Soft locking: fine-tune a net so pruning or quantizing it off the
authorized configuration wrecks accuracy, plus the attacks against it.

The training objective keeps the authorized branch accurate while driving
the unauthorized branch's cross-entropy toward a target value:

    total = CE(authorized branch) + lam * (epsilon - CE(unauthorized branch))^2

Masks are recomputed from the current weights at every step; gradients pass
straight through masks (masked weights get zero gradient from that branch)
and quantizers (identity estimator).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged
from .params import Dtype
from .tinynet import (
    Adam,
    Dataset,
    TinyNet,
    evaluate,
    magnitude_masks,
    net_masks,
    quantize_weights,
)


@dataclass(frozen=True)
class SoftLockConfig:
    """Either a (p1, p2) pruning pair or an (authorized, unauthorized)
    quantization scheme pair."""

    p1: float | None = None
    p2: float | None = None
    schemes: tuple[Dtype, Dtype] | None = None
    lam: float = 1.0
    epsilon: float = 5.0
    epochs: int = 25
    lr: float = 1e-3
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.schemes is not None:
            a, u = self.schemes
            if a == u:
                raise ValueError("authorized and unauthorized schemes must differ")
        else:
            if self.p1 is None or self.p2 is None:
                raise ValueError("need p1/p2 or a scheme pair")
            if not (0.0 <= self.p1 <= 1.0 and 0.0 <= self.p2 <= 1.0):
                raise ValueError("pruning fractions must be in [0, 1]")
            if self.p1 == self.p2:
                raise ValueError("p1 and p2 must differ")

    @property
    def mode(self) -> str:
        return "quant" if self.schemes is not None else "sparsity"


@dataclass(frozen=True)
class LockReport:
    acc_locked_authorized: float
    delta_orig: float
    delta_lock: float
    delta_base: float
    acc_locked_unauthorized: float = 0.0
    acc_original_authorized: float = 0.0
    acc_original_unauthorized: float = 0.0

    def to_dict(self) -> dict:
        return {
            "acc_locked_authorized": self.acc_locked_authorized,
            "delta_orig": self.delta_orig,
            "delta_lock": self.delta_lock,
            "delta_base": self.delta_base,
            "acc_locked_unauthorized": self.acc_locked_unauthorized,
            "acc_original_authorized": self.acc_original_authorized,
            "acc_original_unauthorized": self.acc_original_unauthorized,
        }


@dataclass
class TrainResult:
    net: TinyNet
    history: list = field(default_factory=list)  # {"epoch", "acc_auth", "acc_unauth"}


def _apply_branch(weights, branch):
    """Transform weights for a branch; returns (branch weights, weight masks)."""
    if branch is None:
        return weights, None
    kind, arg = branch
    if kind == "prune":
        if arg == 0.0:
            return weights, None
        masks = magnitude_masks([w for w, _ in weights], arg)
        return [(w * m, b) for (w, b), m in zip(weights, masks)], masks
    if kind == "quant":
        return quantize_weights(weights, arg), None  # straight-through: no mask
    raise ValueError(kind)


def _backmap(grads, masks):
    if masks is None:
        return grads
    return [(gw * m, gb) for (gw, gb), m in zip(grads, masks)]


def _lock_loop(
    net: TinyNet,
    data: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int,
    branch1,
    branch2,
    lam: float = 0.0,
    epsilon: float = 5.0,
) -> TrainResult:
    """Shared training loop for plain training, fine-tuning, and both lock
    modes. lam == 0 takes exactly the plain fine-tuning path, so those
    trajectories are bit-identical by construction."""
    net = net.copy()
    weights = net.weights
    params = [a for pair in weights for a in pair]
    opt = Adam([p.shape for p in params], lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70]))
    history = []
    step = 0
    use_second = lam > 0.0 and branch2 is not None
    for epoch in range(epochs):
        order = rng.permutation(len(data.y_train))
        for at in range(0, len(order), batch_size):
            idx = order[at : at + batch_size]
            x, y = data.x_train[idx], data.y_train[idx]
            w1, m1 = _apply_branch(weights, branch1)
            loss1, g1 = net.loss_and_grads(x, y, w1)
            grads = _backmap(g1, m1)
            total = loss1
            if use_second:
                w2, m2 = _apply_branch(weights, branch2)
                loss2, g2 = net.loss_and_grads(x, y, w2)
                g2 = _backmap(g2, m2)
                coef = -2.0 * lam * (epsilon - loss2)
                grads = [(gw1 + coef * gw2, gb1 + coef * gb2) for (gw1, gb1), (gw2, gb2) in zip(grads, g2)]
                total = loss1 + lam * (epsilon - loss2) ** 2
            if not np.isfinite(total):
                raise TrainingDiverged(step)
            opt.step(params, [a for pair in grads for a in pair])
            step += 1
        entry = {"epoch": epoch, "acc_auth": _branch_accuracy(net, data, branch1)}
        if branch2 is not None:
            entry["acc_unauth"] = _branch_accuracy(net, data, branch2)
        history.append(entry)
    return TrainResult(net, history)


def _branch_accuracy(net: TinyNet, data: Dataset, branch) -> float:
    w, _ = _apply_branch(net.weights, branch)
    return net.accuracy(data.x_test, data.y_test, w)


def finetune(
    net: TinyNet,
    data: Dataset,
    p: float = 0.0,
    epochs: int = 10,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
) -> TrainResult:
    """Plain fine-tuning, optionally through a pruning mask."""
    return _lock_loop(net, data, epochs, lr, seed, batch_size, ("prune", p), None)


def sparsity_lock_train(net: TinyNet, data: Dataset, cfg: SoftLockConfig) -> TrainResult:
    """Lock the net to pruning level p1: accurate at p1, broken at p2."""
    if cfg.mode != "sparsity":
        raise ValueError("config has a scheme pair; use quant_lock_train")
    return _lock_loop(
        net,
        data,
        cfg.epochs,
        cfg.lr,
        cfg.seed,
        cfg.batch_size,
        ("prune", cfg.p1),
        ("prune", cfg.p2),
        cfg.lam,
        cfg.epsilon,
    )


def quant_lock_train(net: TinyNet, data: Dataset, cfg: SoftLockConfig) -> TrainResult:
    """Lock the net to the authorized arithmetic; the unauthorized one
    collapses. Cross-arithmetic pairs at equal precision may not lock, which
    is reported, not hidden."""
    if cfg.mode != "quant":
        raise ValueError("config has pruning fractions; use sparsity_lock_train")
    auth, unauth = cfg.schemes
    return _lock_loop(
        net,
        data,
        cfg.epochs,
        cfg.lr,
        cfg.seed,
        cfg.batch_size,
        ("quant", auth),
        ("quant", unauth),
        cfg.lam,
        cfg.epsilon,
    )


def _branches(cfg: SoftLockConfig):
    if cfg.mode == "sparsity":
        return ("prune", cfg.p1), ("prune", cfg.p2)
    auth, unauth = cfg.schemes
    return ("quant", auth), ("quant", unauth)


def _eval_with_branch(net: TinyNet, data: Dataset, branch) -> float:
    kind, arg = branch
    if kind == "prune":
        return evaluate(net, data, masks=net_masks(net, arg)).accuracy
    return evaluate(net, data, scheme=arg).accuracy


def lock_metrics(original: TinyNet, locked: TinyNet, data: Dataset, cfg: SoftLockConfig) -> LockReport:
    """The delta triple: locking cost on authorized hardware, locked penalty
    on unauthorized hardware, and the unlocked baseline's penalty under the
    same unauthorized configuration."""
    auth, unauth = _branches(cfg)
    acc_orig_auth = _eval_with_branch(original, data, auth)
    acc_orig_unauth = _eval_with_branch(original, data, unauth)
    acc_lock_auth = _eval_with_branch(locked, data, auth)
    acc_lock_unauth = _eval_with_branch(locked, data, unauth)
    return LockReport(
        acc_locked_authorized=acc_lock_auth,
        delta_orig=acc_orig_auth - acc_lock_auth,
        delta_lock=acc_lock_auth - acc_lock_unauth,
        delta_base=acc_orig_auth - acc_orig_unauth,
        acc_locked_unauthorized=acc_lock_unauth,
        acc_original_authorized=acc_orig_auth,
        acc_original_unauthorized=acc_orig_unauth,
    )


def attack_retrain(
    locked: TinyNet,
    data: Dataset,
    cfg: SoftLockConfig,
    epochs: int = 10,
    lr: float | None = None,
    seed: int = 1,
) -> list[dict]:
    """Re-train the locked net with the unauthorized-configuration loss.

    Returns the per-epoch unauthorized accuracy curve; entry 0 is the locked
    model before any retraining.
    """
    _, unauth = _branches(cfg)
    curve = [{"epoch": 0, "acc_unauth": _eval_with_branch(locked, data, unauth)}]
    if epochs == 0:
        return curve
    result = _lock_loop(
        locked, data, epochs, lr if lr is not None else cfg.lr, seed, cfg.batch_size, unauth, None
    )
    for h in result.history:
        curve.append({"epoch": h["epoch"] + 1, "acc_unauth": h["acc_auth"]})
    return curve


@dataclass(frozen=True)
class NoiseAttackResult:
    noise_param: float
    mean_accuracy: float
    std_accuracy: float
    accuracies: tuple


def attack_noise(
    locked: TinyNet,
    data: Dataset,
    noise_param: float,
    trials: int = 5,
    seed: int = 0,
    cfg: SoftLockConfig | None = None,
) -> NoiseAttackResult:
    """Add per-tensor Gaussian noise scaled by the tensor's own std, then
    score the unauthorized configuration."""
    branch = _branches(cfg)[1] if cfg is not None else ("prune", 0.0)
    accs = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial, 0x401]))
        noisy = []
        for w, b in locked.weights:
            noisy.append(
                (
                    w + rng.standard_normal(w.shape).astype(np.float32) * noise_param * w.std(),
                    b + rng.standard_normal(b.shape).astype(np.float32) * noise_param * (b.std() or 0.0),
                )
            )
        accs.append(_eval_with_branch(TinyNet(noisy, locked.meta), data, branch))
    arr = np.asarray(accs)
    return NoiseAttackResult(noise_param, float(arr.mean()), float(arr.std()), tuple(accs))


def noise_sweep(
    locked: TinyNet,
    data: Dataset,
    noise_params,
    trials: int = 5,
    seed: int = 0,
    cfg: SoftLockConfig | None = None,
) -> list[NoiseAttackResult]:
    return [attack_noise(locked, data, s, trials, seed, cfg) for s in noise_params]
