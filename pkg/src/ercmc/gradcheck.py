"""Finite-difference verification of the backward pass.

Each check builds a scalar loss twice: once recorded (backward gives analytic
gradients) and once per perturbed entry under ``no_grad`` for central
differences. Checks run in 64-bit with step 1e-3 and pass when the worst
relative error stays under 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-3
FD_TOL = 1e-4
_ERR_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    param_count: int
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status:4s} {self.name:<28s} params={self.param_count:<6d} "
                f"max_rel_err={self.max_rel_err:.3e}")


def relative_error(a: float, b: float, floor: float = _ERR_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_gradient(fn: Callable[[], float], param: Tensor, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` with respect to every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = fn()
            flat[i] = orig - step
            minus = fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def check_gradients(name: str, build_loss: Callable[[], Tensor],
                    params: Sequence[Tensor], step: float = FD_STEP,
                    tol: float = FD_TOL) -> CheckResult:
    """Compare backward against central differences for one loss function.

    ``build_loss`` must be a pure function of the parameters' current data
    (any randomness fixed beforehand) and return a 1x1 tensor.
    """
    T.clear_tape()
    T.zero_grads(params)
    loss = build_loss()
    T.backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    T.zero_grads(params)

    def value() -> float:
        return build_loss().item()

    worst = 0.0
    count = 0
    for p, a in zip(params, analytic):
        count += p.data.size
        numeric = fd_gradient(value, p, step)
        got = a if a is not None else np.zeros_like(numeric)
        for x, y in zip(got.reshape(-1), numeric.reshape(-1)):
            err = relative_error(float(x), float(y))
            if err > worst:
                worst = err
    return CheckResult(name, worst, count, worst < tol)


def _leaf(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return Tensor(rng.standard_normal((rows, cols)), requires_grad=True)


def primitive_suite(seed: int = 0) -> list[CheckResult]:
    """One check per differentiable primitive on small random instances."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)
    row = _leaf(rng, 1, 4)
    results.append(check_gradients(
        "add", lambda: T.sum_all(T.tanh(T.add(a, b))), [a, b]))
    results.append(check_gradients(
        "add_broadcast", lambda: T.sum_all(T.tanh(T.add(a, row))), [a, row]))
    results.append(check_gradients(
        "sub", lambda: T.sum_all(T.tanh(T.sub(a, b))), [a, b]))
    results.append(check_gradients(
        "mul", lambda: T.sum_all(T.tanh(T.mul(a, b))), [a, b]))
    results.append(check_gradients(
        "mul_broadcast", lambda: T.sum_all(T.tanh(T.mul(a, row))), [a, row]))
    results.append(check_gradients(
        "scale", lambda: T.sum_all(T.tanh(T.scale(a, 0.7))), [a]))

    m1 = _leaf(rng, 3, 4)
    m2 = _leaf(rng, 4, 2)
    results.append(check_gradients(
        "matmul", lambda: T.sum_all(T.tanh(T.matmul(m1, m2))), [m1, m2]))
    results.append(check_gradients(
        "transpose", lambda: T.sum_all(T.tanh(T.matmul(T.transpose(m1), a))), [m1, a]))

    c1 = _leaf(rng, 2, 3)
    c2 = _leaf(rng, 2, 2)
    results.append(check_gradients(
        "concat_lastdim",
        lambda: T.sum_all(T.tanh(T.concat_lastdim([c1, c2]))), [c1, c2]))
    r1 = _leaf(rng, 2, 3)
    r2 = _leaf(rng, 3, 3)
    results.append(check_gradients(
        "concat_rows", lambda: T.sum_all(T.tanh(T.concat_rows([r1, r2]))), [r1, r2]))
    s = _leaf(rng, 5, 3)
    results.append(check_gradients(
        "slice_rows", lambda: T.sum_all(T.tanh(T.slice_rows(s, 1, 4))), [s]))

    x = _leaf(rng, 3, 5)
    # keep relu inputs away from the kink: bias them off zero
    x_off = Tensor(rng.standard_normal((3, 5)) + np.where(
        rng.standard_normal((3, 5)) > 0, 2.0, -2.0), requires_grad=True)
    results.append(check_gradients(
        "relu", lambda: T.sum_all(T.tanh(T.relu(x_off))), [x_off]))
    results.append(check_gradients("tanh", lambda: T.sum_all(T.tanh(x)), [x]))
    results.append(check_gradients(
        "sigmoid", lambda: T.sum_all(T.sigmoid(x)), [x]))

    sm = _leaf(rng, 3, 5)
    weight = Tensor(rng.standard_normal((3, 5)))
    results.append(check_gradients(
        "softmax", lambda: T.sum_all(T.mul(T.softmax_lastdim(sm), weight)), [sm]))
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 2] = False
    mask[2, 0] = False
    mask[2, 4] = False
    results.append(check_gradients(
        "softmax_masked",
        lambda: T.sum_all(T.mul(T.softmax_lastdim(sm, mask), weight)), [sm]))
    results.append(check_gradients(
        "log_softmax",
        lambda: T.sum_all(T.mul(T.log_softmax_lastdim(sm), weight)), [sm]))

    d = _leaf(rng, 4, 6)

    def dropout_loss() -> Tensor:
        # same mask every call: rebuild the generator from a fixed seed
        return T.sum_all(T.tanh(T.dropout(d, 0.3, True, np.random.default_rng(7))))

    results.append(check_gradients("dropout", dropout_loss, [d]))

    logits = _leaf(rng, 4, 5)
    targets = [0, 2, 4, 1]
    results.append(check_gradients(
        "nll_loss",
        lambda: T.nll_loss(T.log_softmax_lastdim(logits), targets), [logits]))

    q = _leaf(rng, 3, 4)
    table = _leaf(rng, 5, 4)
    index = np.random.default_rng(3).integers(0, 5, size=(3, 6))
    w = _leaf(rng, 3, 6)
    results.append(check_gradients(
        "relpos_score",
        lambda: T.sum_all(T.tanh(T.relpos_score(q, table, index))), [q, table]))
    results.append(check_gradients(
        "relpos_combine",
        lambda: T.sum_all(T.tanh(T.relpos_combine(w, table, index))), [w, table]))

    return results


def model_suite(seed: int = 0) -> list[CheckResult]:
    """Finite-difference check of the full composed conversation forward."""
    from .model import ModelConfig, ContextModel
    from .data import Conversation, Utterance

    cfg = ModelConfig(d_m=8, n_heads=2, window=3, n_futures=3, n_labels=4,
                      dropout=0.0, seed=seed)
    model = ContextModel(cfg)
    rng = np.random.default_rng(seed + 1)
    n_utt = 3
    conv = Conversation(
        conv_id="gradcheck",
        utterances=[
            Utterance(speaker=f"s{idx % 2}", text=f"u{idx}", label=idx % cfg.n_labels)
            for idx in range(n_utt)
        ],
    )
    embeddings = rng.standard_normal((n_utt, cfg.d_m))
    futures = rng.standard_normal((n_utt, cfg.n_futures, cfg.d_m))
    targets = [u.label for u in conv.utterances]

    def build_loss() -> Tensor:
        log_probs = model.forward_conversation(conv, embeddings, futures, training=False)
        return T.nll_loss(log_probs, targets)

    return [check_gradients("composed_model", build_loss, model.parameters())]


def run_all(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    results = primitive_suite(seed)
    if include_model:
        results.extend(model_suite(seed))
    return results
