"""Network definitions and checkpointing.

Three roles share one parameter container:

* denoiser: residual UNet, predicts the noise and subtracts it from the input.
* generator: residual UNet over the clean image concatenated with a latent
  noise map, adds its prediction to the clean image.
* discriminator: strided-conv critic scoring (image, image) pairs stacked
  along channels; no normalization layers, unconstrained scalar output.

Parameters live in an insertion-ordered dict of Tensors; Adam moments are
plain float arrays updated in place by the engine.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .tensor import ContractError, ShapeError, Tensor, no_grad
from .tensor import ops
from .tensor.dtn import DtnFormatError, read_array, write_array


@dataclass(frozen=True)
class UNetConfig:
    """Shape of the residual UNet used by denoiser and generator."""

    in_channels: int = 3
    out_channels: int = 3
    depth: int = 3
    base_channels: int = 32
    slope: float = 0.2

    def __post_init__(self):
        if self.depth < 1:
            raise ShapeError(f"UNetConfig: depth must be >= 1, got {self.depth}")
        if min(self.in_channels, self.out_channels, self.base_channels) < 1:
            raise ShapeError(f"UNetConfig: channel counts must be positive: {self}")


@dataclass(frozen=True)
class DiscConfig:
    """Shape of the pair critic: ``stages`` stride-2 4x4 convs, then a
    fully connected head expressed as a 1x1 conv over the flattened map."""

    in_channels: int = 6
    base_channels: int = 32
    stages: int = 5
    patch: int = 32
    slope: float = 0.2

    def __post_init__(self):
        if self.patch % (2**self.stages):
            raise ShapeError(
                f"DiscConfig: patch {self.patch} not divisible by 2^{self.stages}"
            )


class NetworkParams:
    """One network's parameters plus optimizer state.

    Attributes:
        role: "denoiser", "generator" or "discriminator".
        config: UNetConfig or DiscConfig.
        latent_channels: generator latent map channels (0 otherwise).
        params: name -> Tensor with requires_grad=True.
        m, v: Adam moment arrays, same keys as params.
        t: Adam step counter.
    """

    def __init__(self, role, config, params, latent_channels=0):
        self.role = role
        self.config = config
        self.latent_channels = int(latent_channels)
        self.params: dict[str, Tensor] = params
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def param_shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self.params.items()}

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "NetworkParams":
        clone = NetworkParams(
            self.role,
            self.config,
            {k: Tensor(t.data.astype(dtype), requires_grad=True) for k, t in self.params.items()},
            self.latent_channels,
        )
        clone.t = self.t
        return clone


def _unet_layer_plan(cfg: UNetConfig) -> list[tuple[str, int, int, int, int]]:
    """(name, out_ch, in_ch, kh, kw) for every conv, in forward order."""
    plan = []
    ch = cfg.in_channels
    for i in range(cfg.depth):
        co = cfg.base_channels * (2**i)
        plan.append((f"enc{i}.conv0", co, ch, 3, 3))
        plan.append((f"enc{i}.conv1", co, co, 3, 3))
        ch = co
    co = cfg.base_channels * (2**cfg.depth)
    plan.append(("bottleneck.conv0", co, ch, 3, 3))
    plan.append(("bottleneck.conv1", co, co, 3, 3))
    ch = co
    for i in reversed(range(cfg.depth)):
        skip = cfg.base_channels * (2**i)
        plan.append((f"dec{i}.conv0", skip, ch + skip, 3, 3))
        plan.append((f"dec{i}.conv1", skip, skip, 3, 3))
        ch = skip
    plan.append(("head", cfg.out_channels, ch, 3, 3))
    return plan


def _disc_layer_plan(cfg: DiscConfig) -> list[tuple[str, int, int, int, int]]:
    plan = []
    ch = cfg.in_channels
    for i in range(cfg.stages):
        co = cfg.base_channels * (2**i)
        plan.append((f"stage{i}", co, ch, 4, 4))
        ch = co
    final = cfg.patch // (2**cfg.stages)
    plan.append(("fc", 1, ch * final * final, 1, 1))
    return plan


def _alloc(plan, dtype) -> dict[str, Tensor]:
    params = {}
    for name, co, ci, kh, kw in plan:
        params[f"{name}.w"] = Tensor(np.zeros((co, ci, kh, kw), dtype=dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros((1, co, 1, 1), dtype=dtype), requires_grad=True)
    return params


def init_weights(net: NetworkParams, rng: np.random.Generator) -> None:
    """Draw fresh weights in place and reset optimizer state.

    UNet roles use He initialization (std sqrt(2 / fan_in)); the critic
    uses N(0, 0.02^2).  Biases start at zero.
    """
    for name, t in net.params.items():
        if name.endswith(".b"):
            data = np.zeros_like(t.data)
        elif net.role == "discriminator":
            data = rng.normal(0.0, 0.02, size=t.shape).astype(t.dtype)
        else:
            fan_in = t.shape[1] * t.shape[2] * t.shape[3]
            std = np.sqrt(2.0 / fan_in)
            data = rng.normal(0.0, std, size=t.shape).astype(t.dtype)
        net.params[name] = Tensor(data, requires_grad=True)
    net.m = {k: np.zeros_like(t.data) for k, t in net.params.items()}
    net.v = {k: np.zeros_like(t.data) for k, t in net.params.items()}
    net.t = 0


def build_denoiser(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> NetworkParams:
    if cfg.in_channels != cfg.out_channels:
        raise ShapeError("denoiser UNet must map channels onto themselves")
    net = NetworkParams("denoiser", cfg, _alloc(_unet_layer_plan(cfg), dtype))
    init_weights(net, rng)
    return net


def build_generator(
    cfg: UNetConfig, latent_channels: int, rng: np.random.Generator, dtype=np.float32
) -> NetworkParams:
    if latent_channels < 1:
        raise ShapeError(f"generator needs >= 1 latent channel, got {latent_channels}")
    if cfg.in_channels != cfg.out_channels + latent_channels:
        raise ShapeError(
            f"generator UNet input channels {cfg.in_channels} must equal "
            f"image channels {cfg.out_channels} + latent {latent_channels}"
        )
    net = NetworkParams("generator", cfg, _alloc(_unet_layer_plan(cfg), dtype), latent_channels)
    init_weights(net, rng)
    return net


def build_discriminator(cfg: DiscConfig, rng: np.random.Generator, dtype=np.float32) -> NetworkParams:
    net = NetworkParams("discriminator", cfg, _alloc(_disc_layer_plan(cfg), dtype))
    init_weights(net, rng)
    return net


def _conv_block(params, prefix, h, slope):
    h = ops.leaky_relu(
        ops.conv2d(h, params[f"{prefix}.conv0.w"], params[f"{prefix}.conv0.b"], 1, 1), slope
    )
    h = ops.leaky_relu(
        ops.conv2d(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], 1, 1), slope
    )
    return h


def unet_forward(net: NetworkParams, x: Tensor) -> Tensor:
    """Plain UNet body; callers add the residual wiring."""
    cfg = net.config
    if not isinstance(cfg, UNetConfig):
        raise ContractError(f"unet_forward needs a UNet-configured net, got role {net.role}")
    N, C, H, W = x.shape
    if C != cfg.in_channels:
        raise ShapeError(f"unet_forward: input has {C} channels, config expects {cfg.in_channels}")
    div = 2**cfg.depth
    if H % div or W % div:
        raise ShapeError(
            f"unet_forward: spatial extents {H}x{W} must be divisible by {div} "
            f"(depth {cfg.depth})"
        )
    P, s = net.params, cfg.slope
    skips = []
    h = x
    for i in range(cfg.depth):
        h = _conv_block(P, f"enc{i}", h, s)
        skips.append(h)
        h = ops.scale(ops.sum_pool(h, 2), 0.25)
    h = _conv_block(P, "bottleneck", h, s)
    for i in reversed(range(cfg.depth)):
        h = ops.upsample_nearest(h, 2)
        h = ops.concat_channels(h, skips[i])
        h = _conv_block(P, f"dec{i}", h, s)
    return ops.conv2d(h, P["head.w"], P["head.b"], stride=1, padding=1)


def denoiser_forward(net: NetworkParams, y: Tensor) -> Tensor:
    """Residual denoising: estimate x = y - body(y)."""
    return ops.sub(y, unet_forward(net, y))


def generator_forward(net: NetworkParams, x: Tensor, z: Tensor) -> Tensor:
    """Residual noise synthesis: yhat = x + body(concat(x, z))."""
    if net.latent_channels < 1:
        raise ContractError(f"generator_forward needs a generator net, got role {net.role}")
    if z.shape != (x.shape[0], net.latent_channels, x.shape[2], x.shape[3]):
        raise ShapeError(
            f"generator_forward: latent shape {z.shape} does not match image {x.shape} "
            f"with {net.latent_channels} latent channels"
        )
    return ops.add(x, unet_forward(net, ops.concat_channels(x, z)))


def disc_forward(net: NetworkParams, x: Tensor, y: Tensor) -> Tensor:
    """Score image pairs: returns (N, 1, 1, 1) unconstrained values."""
    cfg = net.config
    if not isinstance(cfg, DiscConfig):
        raise ContractError(f"disc_forward needs a discriminator net, got role {net.role}")
    if x.shape != y.shape:
        raise ShapeError(f"disc_forward: pair shapes {x.shape} and {y.shape} differ")
    h = ops.concat_channels(x, y)
    N, C, H, W = h.shape
    if C != cfg.in_channels:
        raise ShapeError(f"disc_forward: pair has {C} stacked channels, config expects {cfg.in_channels}")
    if H != cfg.patch or W != cfg.patch:
        raise ShapeError(
            f"disc_forward: spatial extents {H}x{W} must equal configured patch {cfg.patch}"
        )
    P, s = net.params, cfg.slope
    for i in range(cfg.stages):
        h = ops.leaky_relu(ops.conv2d(h, P[f"stage{i}.w"], P[f"stage{i}.b"], 2, 1), s)
    flat = ops.reshape4(h, (N, h.size // N, 1, 1))
    return ops.conv2d(flat, P["fc.w"], P["fc.b"], 1, 0)


def generator_sampler(net: NetworkParams):
    """Adapt a trained generator to the (clean image, rng) -> noisy sampler
    interface shared by the metrics and the augmentation builder."""

    def sample(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        z = rng.standard_normal((1, net.latent_channels, x.shape[1], x.shape[2]))
        with no_grad():
            out = generator_forward(net, Tensor(x[None]), Tensor(z.astype(np.float32)))
        return out.data[0]

    return sample


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DNCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


def save_checkpoint(path, net: NetworkParams, include_moments: bool = True) -> None:
    """Write role tag, config, parameters and (optionally) Adam state."""
    kind = "unet" if isinstance(net.config, UNetConfig) else "disc"
    manifest = {
        "role": net.role,
        "kind": kind,
        "config": asdict(net.config),
        "latent_channels": net.latent_channels,
        "t": net.t,
        "names": list(net.params.keys()),
        "with_moments": bool(include_moments),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<B", CKPT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for name in manifest["names"]:
        write_array(buf, net.params[name].data)
    if include_moments:
        for name in manifest["names"]:
            write_array(buf, net.m[name])
            write_array(buf, net.v[name])
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<B", buf.read(1))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version} unsupported (expected {CKPT_VERSION})")
    (mlen,) = struct.unpack("<Q", buf.read(8))
    manifest = json.loads(buf.read(mlen).decode("utf-8"))
    cfg_cls = UNetConfig if manifest["kind"] == "unet" else DiscConfig
    cfg = cfg_cls(**manifest["config"])
    params = {}
    for name in manifest["names"]:
        try:
            params[name] = Tensor(read_array(buf), requires_grad=True)
        except DtnFormatError as e:
            raise CheckpointError(f"{path}: corrupt block {name}: {e}") from e
    net = NetworkParams(manifest["role"], cfg, params, manifest["latent_channels"])
    net.t = int(manifest["t"])
    if manifest["with_moments"]:
        for name in manifest["names"]:
            net.m[name] = read_array(buf)
            net.v[name] = read_array(buf)
    return net
