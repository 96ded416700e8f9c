"""Finite-difference verification of every reverse-mode gradient.

Three scopes build on each other:

* ops: every registered differentiable primitive against central
  differences on random inputs (the registry lives next to the ops, so a
  new op without a case fails the coverage test).
* networks: full forward+backward through denoiser, generator and
  discriminator, probing random parameter entries.
* losses: the composite training losses, including the gradient penalty
  differentiated through its inner backward.

Everything runs in float64 with step h = 1e-4; errors are relative with an
absolute floor so near-zero gradients do not blow up the ratio.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine, nets
from .tensor import Tape, Tensor, backward, no_grad, recording
from .tensor import ops

DEFAULT_TOL = 1e-3
FD_STEP = 1e-4
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    worst_rel: float
    n_checks: int

    def ok(self, tol: float = DEFAULT_TOL) -> bool:
        return self.worst_rel < tol


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def worst(self) -> float:
        return max((r.worst_rel for r in self.results), default=0.0)

    def failures(self, tol: float = DEFAULT_TOL) -> list[CheckResult]:
        return [r for r in self.results if not r.ok(tol)]

    def lines(self, tol: float = DEFAULT_TOL) -> list[str]:
        out = []
        for r in self.results:
            mark = "ok " if r.ok(tol) else "FAIL"
            out.append(f"{mark} {r.name:<28} worst rel {r.worst_rel:.3e} ({r.n_checks} checks)")
        out.append(
            f"gradcheck: {len(self.results)} targets, worst rel {self.worst:.3e}, "
            f"{len(self.failures(tol))} failures, {self.elapsed:.1f}s"
        )
        return out


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def _probe_indices(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return rng.choice(size, size=limit, replace=False)


def _fd_check(eval_loss, tensors: list[Tensor], analytic: list[np.ndarray],
              rng: np.random.Generator, probes: int | None = None, h: float = FD_STEP):
    """Central differences on selected entries of each tensor.

    eval_loss() must recompute the scalar loss from the tensors' current
    .data; entries are perturbed in place and restored.

    The networks are piecewise linear in every parameter, so a leaky-ReLU
    or L1 kink inside the +-h interval biases the central difference by
    exactly the second difference |f(x+h) + f(x-h) - 2 f(x)| / 2h.  That
    measured non-smoothness is subtracted from the discrepancy before the
    relative error is formed; a wrong VJP still shows up because it
    produces a discrepancy with no matching curvature.
    """
    worst, count = 0.0, 0
    base = eval_loss()
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in _probe_indices(flat.size, probes, rng):
            keep = flat[i]
            flat[i] = keep + h
            up = eval_loss()
            flat[i] = keep - h
            dn = eval_loss()
            flat[i] = keep
            num = (up - dn) / (2.0 * h)
            a = float(g.reshape(-1)[i])
            curvature = abs(up + dn - 2.0 * base) / (2.0 * h)
            gap = max(abs(a - num) - curvature, 0.0)
            worst = max(worst, gap / max(abs(a), abs(num), REL_FLOOR))
            count += 1
    return worst, count


def _case_loss(fn, inputs: list[Tensor], w: Tensor):
    return ops.sum_all(ops.mul(fn(*inputs), w)).item()


def check_op(name: str, rng: np.random.Generator, h: float = FD_STEP) -> CheckResult:
    """One registered op case: random float64 inputs, weighted-sum reduction."""
    build = ops.OP_CASES[name]
    fn, inputs = build(rng, np.float64)
    for t in inputs:
        t.requires_grad = True
    with no_grad():
        out = fn(*inputs)
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)

    tape = Tape()
    with recording(tape):
        loss = ops.sum_all(ops.mul(fn(*inputs), w))
    store = backward(loss, tape)
    analytic = []
    for t in inputs:
        g = store.of(t)
        analytic.append(g.data if g is not None else np.zeros_like(t.data))

    def eval_loss():
        with no_grad():
            return _case_loss(fn, inputs, w)

    worst, count = _fd_check(eval_loss, inputs, analytic, rng, probes=None, h=h)
    return CheckResult(f"op:{name}", worst, count)


def check_ops(seed: int = 0, rounds: int = 2, h: float = FD_STEP) -> list[CheckResult]:
    results = []
    for name in sorted(ops.OP_CASES):
        worst, count = 0.0, 0
        for r in range(rounds):
            rng = np.random.default_rng([seed, r, hash(name) & 0xFFFF])
            res = check_op(name, rng, h)
            worst = max(worst, res.worst_rel)
            count += res.n_checks
        results.append(CheckResult(f"op:{name}", worst, count))
    return results


def registry_names() -> list[str]:
    return sorted(ops.OP_CASES)


# ---------------------------------------------------------------------------
# whole networks


def _randomize(net: nets.NetworkParams, rng: np.random.Generator, bias_std: float = 0.05):
    """He-scale parameter draw for every role.

    The production critic init (N(0, 0.02), zero biases) drives deep-stage
    activations to ~1e-6, where an h=1e-4 step crosses leaky-ReLU kinks
    wholesale and central differences stop meaning anything.  The check
    verifies the reverse pass, not the init policy, so it runs at a scale
    where the forward map is locally linear around almost every probe.
    """
    for name, t in net.params.items():
        if name.endswith(".b"):
            data = rng.normal(0.0, bias_std, size=t.shape)
        else:
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=t.shape)
        net.params[name] = Tensor(data.astype(t.dtype), requires_grad=True)


def _tiny_nets(seed: int):
    rng = np.random.default_rng(seed)
    r_cfg = nets.UNetConfig(in_channels=3, out_channels=3, depth=3, base_channels=4)
    g_cfg = nets.UNetConfig(in_channels=4, out_channels=3, depth=3, base_channels=4)
    d_cfg = nets.DiscConfig(in_channels=6, base_channels=4, stages=5, patch=32)
    r_net = nets.build_denoiser(r_cfg, rng, dtype=np.float64)
    g_net = nets.build_generator(g_cfg, 1, rng, dtype=np.float64)
    d_net = nets.build_discriminator(d_cfg, rng, dtype=np.float64)
    for net in (r_net, g_net, d_net):
        _randomize(net, rng)
    return r_net, g_net, d_net


def check_network(role: str, seed: int = 0, probes_per_param: int = 3,
                  h: float = FD_STEP) -> CheckResult:
    """Forward+backward of a full network against finite differences on a
    random subset of entries of every parameter tensor."""
    rng = np.random.default_rng([seed, 77])
    r_net, g_net, d_net = _tiny_nets(seed)
    if role == "denoiser":
        net = r_net
        y = Tensor(rng.uniform(size=(2, 3, 8, 8)), dtype=np.float64)
        fwd = lambda: nets.denoiser_forward(net, y)
    elif role == "generator":
        net = g_net
        x = Tensor(rng.uniform(size=(2, 3, 8, 8)), dtype=np.float64)
        z = Tensor(rng.normal(size=(2, 1, 8, 8)), dtype=np.float64)
        fwd = lambda: nets.generator_forward(net, x, z)
    elif role == "discriminator":
        net = d_net
        x = Tensor(rng.uniform(size=(2, 3, 32, 32)), dtype=np.float64)
        y = Tensor(rng.uniform(size=(2, 3, 32, 32)), dtype=np.float64)
        fwd = lambda: nets.disc_forward(net, x, y)
    else:
        raise ValueError(f"unknown role {role}")

    with no_grad():
        out = fwd()
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)

    tape = Tape()
    with recording(tape):
        loss = ops.sum_all(ops.mul(fwd(), w))
    store = backward(loss, tape)

    tensors = list(net.params.values())
    analytic = []
    for t in tensors:
        g = store.of(t)
        analytic.append(g.data if g is not None else np.zeros_like(t.data))

    def eval_loss():
        with no_grad():
            return ops.sum_all(ops.mul(fwd(), w)).item()

    worst, count = _fd_check(eval_loss, tensors, analytic, rng, probes=probes_per_param, h=h)
    return CheckResult(f"net:{role}", worst, count)


# ---------------------------------------------------------------------------
# composite losses


def check_losses(seed: int = 0, h: float = FD_STEP) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 13])
    results = []

    # denoiser fidelity w.r.t. the estimate; keep residuals away from the
    # L1 kink so central differences are valid
    x = Tensor(rng.uniform(size=(2, 3, 8, 8)), dtype=np.float64)
    gap = Tensor(rng.uniform(0.05, 0.3, size=(2, 3, 8, 8)) * np.where(rng.random((2, 3, 8, 8)) < 0.5, -1, 1),
                 dtype=np.float64)
    xhat = Tensor(x.data + gap.data, dtype=np.float64, requires_grad=True)
    tape = Tape()
    with recording(tape):
        loss = engine.denoiser_fidelity(xhat, x)
    store = backward(loss, tape)

    def eval_fid():
        with no_grad():
            return engine.denoiser_fidelity(xhat, x).item()

    worst, count = _fd_check(eval_fid, [xhat], [store.of(xhat).data], rng, probes=40, h=h)
    results.append(CheckResult("loss:denoiser_fidelity", worst, count))

    # noise consistency w.r.t. the synthetic noisy image
    y = Tensor(x.data + rng.normal(0, 0.1, size=x.shape), dtype=np.float64)
    yhat = Tensor(x.data + rng.normal(0, 0.25, size=x.shape), dtype=np.float64, requires_grad=True)
    tape = Tape()
    with recording(tape):
        loss = engine.noise_consistency(yhat, y, x, size=5, sigma=1.5)
    store = backward(loss, tape)

    def eval_nc():
        with no_grad():
            return engine.noise_consistency(yhat, y, x, size=5, sigma=1.5).item()

    worst, count = _fd_check(eval_nc, [yhat], [store.of(yhat).data], rng, probes=40, h=h)
    results.append(CheckResult("loss:noise_consistency", worst, count))

    # adversarial surrogate w.r.t. all three score batches
    scores = [Tensor(rng.normal(size=(4, 1, 1, 1)), dtype=np.float64, requires_grad=True)
              for _ in range(3)]
    tape = Tape()
    with recording(tape):
        loss = engine.adversarial_score(scores[0], scores[1], scores[2], alpha=0.3)
    store = backward(loss, tape)

    def eval_adv():
        with no_grad():
            return engine.adversarial_score(scores[0], scores[1], scores[2], alpha=0.3).item()

    worst, count = _fd_check(eval_adv, scores, [store.of(s).data for s in scores], rng, h=h)
    results.append(CheckResult("loss:adversarial_score", worst, count))

    # gradient penalty w.r.t. critic parameters (differentiates through the
    # inner backward); epsilon draw is re-seeded per evaluation
    d_cfg = nets.DiscConfig(in_channels=6, base_channels=2, stages=5, patch=32)
    d_net = nets.build_discriminator(d_cfg, np.random.default_rng([seed, 5]), dtype=np.float64)
    _randomize(d_net, np.random.default_rng([seed, 6]))
    xr = Tensor(rng.uniform(size=(2, 3, 32, 32)), dtype=np.float64)
    yr = Tensor(np.clip(xr.data + rng.normal(0, 0.1, size=xr.shape), 0, 1), dtype=np.float64)
    xf = xr
    yf = Tensor(np.clip(xr.data + rng.normal(0, 0.3, size=xr.shape), 0, 1), dtype=np.float64)

    def gp_value():
        tape = Tape()
        with recording(tape):
            pen = engine.gradient_penalty(
                lambda a, b: nets.disc_forward(d_net, a, b),
                (xr, yr), (xf, yf), lam=10.0, rng=np.random.default_rng([seed, 99]),
            )
        return pen, tape

    pen, tape = gp_value()
    store = backward(pen, tape)
    tensors = list(d_net.params.values())
    analytic = [store.of(t).data if store.of(t) is not None else np.zeros_like(t.data)
                for t in tensors]

    def eval_gp():
        return gp_value()[0].item()

    worst, count = _fd_check(eval_gp, tensors, analytic, rng, probes=2, h=h)
    results.append(CheckResult("loss:gradient_penalty", worst, count))
    return results


def run(scopes=("ops", "networks", "losses"), seed: int = 0,
        tol: float = DEFAULT_TOL) -> SuiteReport:
    t0 = time.perf_counter()
    report = SuiteReport()
    if "ops" in scopes:
        report.results.extend(check_ops(seed))
    if "networks" in scopes:
        for role in ("denoiser", "generator", "discriminator"):
            report.results.append(check_network(role, seed))
    if "losses" in scopes:
        report.results.extend(check_losses(seed))
    report.elapsed = time.perf_counter() - t0
    return report
