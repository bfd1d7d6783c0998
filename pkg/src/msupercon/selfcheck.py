"""Self-verification: per-op gradient checks, loss oracles and freeze invariants.

Every check returns a :class:`CheckResult`; :func:`run_selfcheck` runs them all.
The oracles here are deliberately naive (explicit loops over anchors and
pairs) so they share no code path with the vectorized implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .losses import LossConfig, cross_entropy, focal_loss, supervised_contrastive_loss
from .model import CANONICAL_AUX, ModelConfig, classifier_logits, encoder_forward, fused_features, init_params, projection_forward

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-9
WORKED_EXAMPLE = 1.006409

# small model used by the composite and freeze checks
CHECK_MODEL = ModelConfig(image_shape=(3, 8, 8), rep_dim=5, proj_hidden=6, proj_out=4, conv_channels=(2, 3),
                          classifier_hidden=(6,), num_aux=2, aux_feature_dim=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float | None = None
    detail: str = ""
    error_kind: str = "err"  # "rel_err" for gradient checks, "err" for absolute differences

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        err = f" max_{self.error_kind}={self.max_error:.3e}" if self.max_error is not None else ""
        detail = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}{err}{detail}"


# ---------------------------------------------------------------- gradients


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.uniform(-1.0, 1.0, shape)
    return np.where(np.abs(x) < margin, 2 * margin, x)


def _take(a):
    return a[np.array([0, 2, 2]), np.array([1, 0, 3])]


# op name -> (function of the inputs, input shapes)
OP_CASES: dict[str, tuple[Callable, list[tuple[int, ...]]]] = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4), (1, 4)]),
    "div": (lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    "neg": (lambda a: -a, [(2, 3)]),
    "power": (lambda a: nx.power(a * a + 0.1, 2.5), [(5,)]),
    "exp": (lambda a: nx.exp(a), [(5,)]),
    "log": (lambda a: nx.log(a * a + 0.5), [(5,)]),
    "relu": (lambda a: nx.relu(a), [(4, 5)]),
    "sum": (lambda a: nx.tsum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: nx.mean(a, axis=(1, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: nx.reshape(a, (4, 3)), [(3, 4)]),
    "transpose": (lambda a: nx.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "take": (_take, [(3, 4)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "matmul": (lambda a, b: nx.matmul(a, b), [(3, 4), (4, 2)]),
    "linear": (lambda x, w, b: nx.linear(x, w, b), [(3, 4), (4, 2), (2,)]),
    "conv2d": (lambda x, w, b: nx.conv2d(x, w, b, stride=2, padding=1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    "l2_normalize": (lambda a: nx.l2_normalize(a, axis=-1), [(3, 4)]),
    "log_softmax": (lambda a: nx.log_softmax(a, axis=-1), [(3, 4)]),
    "log_softmax_masked": (lambda a: nx.log_softmax(a, axis=-1, mask=~np.eye(4, dtype=bool)), [(4, 4)]),
    "softmax": (lambda a: nx.softmax(a, axis=-1), [(3, 4)]),
}


def _op_check(name: str, instances: int, seed: int) -> CheckResult:
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng([seed, sorted(OP_CASES).index(name)])
    worst = 0.0
    for _ in range(instances):
        inputs = [nx.Tensor(_away_from_zero(rng, s), requires_grad=True) for s in shapes]
        probe = nx.Tensor(rng.standard_normal(fn(*inputs).shape))
        worst = max(worst, *nx.gradcheck(lambda: nx.tsum(fn(*inputs) * probe), inputs))
    return CheckResult(f"gradcheck/{name}", worst <= GRAD_TOL, worst, f"{instances} instances", "rel_err")


def _composite_check(kind: str, instances: int, seed: int, max_coords: int = 6) -> CheckResult:
    worst = 0.0
    for k in range(instances):
        rng = np.random.default_rng([seed, 100, k])
        params = init_params(CHECK_MODEL, seed=k)
        # positive biases keep ReLUs active, away from kinks and all-zero outputs
        for name, t in params.named():
            if name.endswith(".b"):
                t.data = rng.uniform(0.05, 0.5, t.shape)
        x = rng.uniform(0, 1, (4, *CHECK_MODEL.image_shape))
        labels = np.array([0, 0, 1, int(rng.integers(4))])
        if kind == "contrastive":
            tensors = [t for _, t in params.named(["encoder", "projection"])]

            def fn():
                return supervised_contrastive_loss(projection_forward(encoder_forward(x, params), params), labels, 0.5)
        else:
            tensors = [t for _, t in params.named()]
            stats = {n: rng.standard_normal((4, 4)) for n in CANONICAL_AUX}

            def fn():
                logits = classifier_logits(fused_features(x, stats, params), params)
                return focal_loss(labels=labels, config=LossConfig(), log_probabilities=nx.log_softmax(logits, axis=-1))
        worst = max(worst, *nx.gradcheck(fn, tensors, max_coords=max_coords, seed=k))
    return CheckResult(f"gradcheck/composite_{kind}", worst <= GRAD_TOL, worst, f"{instances} instances", "rel_err")


def gradient_checks(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    out = [_op_check(name, instances, seed) for name in OP_CASES]
    out.append(_composite_check("contrastive", instances, seed))
    out.append(_composite_check("focal", instances, seed))
    return out


# ------------------------------------------------------------- loss oracles


def naive_contrastive_loss(z: np.ndarray, labels, tau: float) -> float:
    """One anchor, one pair at a time; anchors without positives are skipped."""
    n = len(labels)
    total = 0.0
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        sims = [math.fsum(z[i][k] * z[a][k] for k in range(len(z[i]))) / tau for a in range(n) if a != i]
        top = max(sims)
        log_denom = top + math.log(math.fsum(math.exp(s - top) for s in sims))
        term = 0.0
        for p in positives:
            s_ip = math.fsum(z[i][k] * z[p][k] for k in range(len(z[i]))) / tau
            term += s_ip - log_denom
        total -= term / len(positives)
    return total


def naive_focal_loss(probs: np.ndarray, labels, alpha: np.ndarray, gamma: float) -> float:
    vals = []
    for row, y in zip(probs, labels):
        pt = max(float(row[y]), 1e-15)
        vals.append(-alpha[y] * (1.0 - pt) ** gamma * math.log(pt))
    return math.fsum(vals) / len(vals)


def _unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def loss_oracle_checks(batches: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 200])
    worst = 0.0
    for k in range(batches):
        n, d = int(rng.integers(2, 17)), int(rng.integers(1, 33))
        tau = (0.1, 0.5, 1.0)[k % 3]
        z = _unit_rows(rng, n, d)
        labels = rng.integers(0, 4, size=n)
        worst = max(worst, abs(supervised_contrastive_loss(z, labels, tau).item() - naive_contrastive_loss(z, labels, tau)))
    results = [CheckResult("oracle/contrastive_double_loop", worst <= ORACLE_TOL, worst, f"{batches} batches, abs error")]

    z3 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    value = supervised_contrastive_loss(z3, [0, 0, 1], tau=1.0).item()
    err = abs(value - WORKED_EXAMPLE)
    results.append(CheckResult("oracle/contrastive_worked_example", err <= 1e-6, err, f"value={value:.6f}"))

    worst_focal = worst_ce = 0.0
    for _ in range(batches):
        n, c = int(rng.integers(1, 20)), int(rng.integers(2, 6))
        logits = rng.standard_normal((n, c)) * 3
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        y = rng.integers(0, c, size=n)
        alpha = rng.uniform(0, 1, c)
        gamma = float(rng.uniform(0, 4))
        want = naive_focal_loss(probs, y, alpha, gamma)
        got = focal_loss(probs, y, LossConfig(alpha=tuple(alpha), gamma=gamma)).item()
        worst_focal = max(worst_focal, abs(got - want) / max(1.0, abs(want)))
        logp = nx.log_softmax(logits, axis=1)
        a = focal_loss(labels=y, config=LossConfig(alpha=1.0, gamma=0.0), log_probabilities=logp).item()
        b = cross_entropy(labels=y, log_probabilities=logp).item()
        worst_ce = max(worst_ce, abs(a - b))
    results.append(CheckResult("oracle/focal_direct", worst_focal <= 1e-12, worst_focal, f"{batches} batches"))
    results.append(CheckResult("oracle/focal_gamma0_is_cross_entropy", worst_ce <= 1e-12, worst_ce, f"{batches} batches"))
    return results


# ---------------------------------------------------------- freeze invariants


def _grads(params, x, stats, labels, stage: int):
    with nx.GradientTape() as tape:
        if stage == 1:
            loss = supervised_contrastive_loss(projection_forward(encoder_forward(x, params), params), labels, 0.1)
        else:
            logits = classifier_logits(fused_features(x, stats, params), params)
            loss = focal_loss(labels=labels, config=LossConfig(), log_probabilities=nx.log_softmax(logits, axis=-1))
    grads = tape.backward(loss)
    return {name: grads[t] for name, t in params.named() if t in grads}


def freeze_checks(steps: int = 3, seed: int = 0) -> list[CheckResult]:
    from .training import Optimizer, OptimizerConfig

    rng = np.random.default_rng([seed, 300])
    x = rng.uniform(0, 1, (6, *CHECK_MODEL.image_shape))
    stats = {n: rng.standard_normal((6, 4)) for n in CANONICAL_AUX}
    labels = np.array([0, 0, 1, 1, 2, 3])
    results = []

    for stage, frozen, trained in ((2, ("encoder", "projection"), ("aux_featurizer", "classifier")),
                                   (1, ("aux_featurizer", "classifier"), ("encoder", "projection"))):
        params = init_params(CHECK_MODEL, seed)
        for g in frozen:
            params.freeze(g)
        before_frozen, before_trained = params.checksum(frozen), params.checksum(trained)
        opt = Optimizer(OptimizerConfig(kind="adam", learning_rate=1e-2))
        zero_grads = True
        for _ in range(steps):
            g = _grads(params, x, stats, labels, stage)
            zero_grads &= all(n not in g or not np.any(g[n]) for n, _ in params.named(frozen))
            opt.step(params, g)
        ok = params.checksum(frozen) == before_frozen and params.checksum(trained) != before_trained and zero_grads
        results.append(CheckResult(f"freeze/stage{stage}_leaves_{'_'.join(frozen)}_unchanged", ok,
                                   detail=f"{steps} adam steps, bitwise"))

    for kind in ("sgd", "adam"):
        params = init_params(CHECK_MODEL, seed)
        before = params.checksum()
        opt = Optimizer(OptimizerConfig(kind=kind, learning_rate=0.0))
        for _ in range(steps):
            opt.step(params, _grads(params, x, stats, labels, 2))
        results.append(CheckResult(f"freeze/zero_learning_rate_{kind}", params.checksum() == before, detail="bitwise"))

    params = init_params(CHECK_MODEL, seed)
    lr = 0.05
    old = {n: t.data.copy() for n, t in params.named()}
    g = _grads(params, x, stats, labels, 2)
    Optimizer(OptimizerConfig(kind="sgd", learning_rate=lr)).step(params, g)
    worst = max(float(np.max(np.abs(t.data - (old[n] - lr * g[n])))) for n, t in params.named() if n in g)
    results.append(CheckResult("freeze/sgd_step_exact", worst == 0.0, worst, "max |w' - (w - lr g)|"))
    return results


# ---------------------------------------------------------------------- all


def run_selfcheck(instances: int = 20, seed: int = 0, perturb: str | None = None, factor: float = 1.01) -> list[CheckResult]:
    """Run every check; ``perturb`` names an op whose gradient rule is corrupted by ``factor``."""
    if perturb is not None:
        with nx.perturbed_gradient(perturb, factor):
            return run_selfcheck(instances, seed, None)
    return gradient_checks(instances, seed) + loss_oracle_checks(seed=seed) + freeze_checks(seed=seed)
