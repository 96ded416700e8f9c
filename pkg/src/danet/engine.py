"""Adversarial losses, gradient penalty, and the Adam update rule.

The training loop in danet.train composes these pieces; everything here is
also exercised directly by closed-form unit oracles, so reductions and sign
conventions are pinned down in one place:

* adversarial_score is the Wasserstein surrogate the critic maximizes,
  E[D(x, y)] - alpha E[D(xhat, y)] - (1 - alpha) E[D(x, yhat)].
* gradient_penalty pushes the per-pair input gradient norm of the critic
  toward 1, with one interpolation coefficient per batch element.
* denoiser_fidelity / noise_consistency are the mean-reduced L1 terms for
  the denoiser and generator respectively.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .tensor import ContractError, NonFiniteError, ParamError, ShapeError, Tensor
from .tensor import backward, current_tape
from .tensor import ops
from .nets import NetworkParams


def _check_scores(name: str, s: Tensor) -> None:
    if s.shape[1:] != (1, 1, 1):
        raise ShapeError(f"{name}: scores must be (N, 1, 1, 1), got {s.shape}")


def adversarial_score(
    d_real: Tensor,
    d_fake_r: Tensor | None,
    d_fake_g: Tensor | None,
    alpha: float,
) -> Tensor:
    """Wasserstein surrogate over critic scores.

    Either fake family may be None (single-branch ablations); its term is
    dropped while the remaining one keeps its alpha weighting.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParamError(f"adversarial_score: alpha must be in [0, 1], got {alpha}")
    if d_fake_r is None and d_fake_g is None:
        raise ContractError("adversarial_score: need at least one fake score batch")
    _check_scores("adversarial_score", d_real)
    out = ops.mean_all(d_real)
    if d_fake_r is not None:
        _check_scores("adversarial_score", d_fake_r)
        out = ops.sub(out, ops.scale(ops.mean_all(d_fake_r), alpha))
    if d_fake_g is not None:
        _check_scores("adversarial_score", d_fake_g)
        out = ops.sub(out, ops.scale(ops.mean_all(d_fake_g), 1.0 - alpha))
    return out


def denoiser_fidelity(xhat: Tensor, x: Tensor) -> Tensor:
    """Mean absolute error between the denoised estimate and the clean image."""
    return ops.mean_all(ops.absolute(ops.sub(xhat, x)))


def noise_consistency(
    yhat: Tensor, y: Tensor, x: Tensor, size: int = 11, sigma: float = 3.0
) -> Tensor:
    """Mean L1 gap between smoothed synthetic and real noise residuals.

    Both residuals are passed through the same Gaussian window, so constant
    offsets survive smoothing and the loss sees local noise statistics
    rather than individual pixels.
    """
    fake_stat = ops.gaussian_filter(ops.sub(yhat, x), size, sigma)
    real_stat = ops.gaussian_filter(ops.sub(y, x), size, sigma)
    return ops.mean_all(ops.absolute(ops.sub(fake_stat, real_stat)))


def gradient_penalty(
    critic: Callable[[Tensor, Tensor], Tensor],
    real_pair: tuple[Tensor, Tensor],
    fake_pair: tuple[Tensor, Tensor],
    lam: float,
    rng: np.random.Generator,
) -> Tensor:
    """Two-sided gradient penalty on pair interpolates.

    Draws one epsilon ~ U(0, 1) per batch element, shared by both members
    of the pair, and penalizes lam * mean((||grad|| - 1)^2) where the norm
    runs over both interpolated inputs of one batch element.

    Must run under an active tape; the inner backward records its VJP graph
    so the result is differentiable in the critic parameters.  The
    per-element gradients come from one backward of the score sum, which is
    exact because the critic scores batch elements independently.
    """
    tape = current_tape()
    if tape is None:
        raise ContractError("gradient_penalty: no active tape to record on")
    x_r, y_r = real_pair
    x_f, y_f = fake_pair
    for a, b in ((x_r, x_f), (y_r, y_f), (x_r, y_r)):
        if a.shape != b.shape:
            raise ShapeError(f"gradient_penalty: pair shapes {a.shape} and {b.shape} differ")
    n = x_r.shape[0]
    eps = rng.uniform(size=(n, 1, 1, 1)).astype(x_r.dtype)
    eps = np.broadcast_to(eps, x_r.shape)
    ix = Tensor(eps * x_r.data + (1.0 - eps) * x_f.data, requires_grad=True)
    iy = Tensor(eps * y_r.data + (1.0 - eps) * y_f.data, requires_grad=True)
    scores = critic(ix, iy)
    _check_scores("gradient_penalty", scores)
    grads = backward(ops.sum_all(scores), tape, wrt=(ix, iy), create_graph=True)
    gx = grads.of(ix)
    gy = grads.of(iy)
    if gx is None:
        gx = Tensor.zeros(ix.shape, dtype=ix.dtype)
    if gy is None:
        gy = Tensor.zeros(iy.shape, dtype=iy.dtype)
    sq = ops.add(
        ops.sum_to4(ops.square(gx), (n, 1, 1, 1)),
        ops.sum_to4(ops.square(gy), (n, 1, 1, 1)),
    )
    norm = ops.sqrt(ops.add_scalar(sq, 1e-12))
    return ops.scale(ops.mean_all(ops.square(ops.add_scalar(norm, -1.0))), lam)


# ---------------------------------------------------------------------------
# optimizer


def collect_grads(net: NetworkParams, store) -> dict[str, Tensor]:
    """Pull this net's gradients out of a GradStore, keyed by parameter name."""
    out = {}
    for name, p in net.params.items():
        g = store.of(p)
        if g is not None:
            out[name] = g
    return out


def adam_step(
    net: NetworkParams,
    grads: dict[str, Tensor],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update.

    Moments are updated in place; parameters are replaced by fresh Tensors
    (tensors are immutable by convention, so anything holding the old ones
    keeps seeing the old values).  Missing gradient entries count as zero.
    """
    if lr < 0:
        raise ParamError(f"adam_step: negative learning rate {lr}")
    b1, b2 = float(betas[0]), float(betas[1])
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
        raise ParamError(f"adam_step: betas must lie in [0, 1), got {betas}")
    net.t += 1
    t = net.t
    for name, p in net.params.items():
        dt = p.data.dtype
        g = grads.get(name)
        if g is None:
            g_arr = np.zeros_like(p.data)
        else:
            g_arr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=dt)
            if g_arr.shape != p.shape:
                raise ShapeError(f"adam_step: grad shape {g_arr.shape} != param {p.shape} ({name})")
        m, v = net.m[name], net.v[name]
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g_arr
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g_arr * g_arr)
        mhat = m / dt.type(1.0 - b1**t)
        vhat = v / dt.type(1.0 - b2**t)
        new = p.data - dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))
        net.params[name] = Tensor(new, requires_grad=True)


def lr_schedule(epoch: int, base_lr: float, half_period: int) -> float:
    """Stepwise decay: halve the rate every ``half_period`` epochs (0-based)."""
    if half_period < 1:
        raise ParamError(f"lr_schedule: half_period must be >= 1, got {half_period}")
    return base_lr * 0.5 ** (epoch // half_period)


def check_finite(term: str, value: float, context: str) -> float:
    """Abort training with a named term and step when a loss goes NaN/Inf."""
    if not math.isfinite(value):
        raise NonFiniteError(f"{term} became non-finite ({value}) at {context}")
    return value
