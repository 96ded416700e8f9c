"""Training loops: the alternating adversarial schedule and the L1 recipe.

One outer iteration runs ``n_critic`` discriminator updates on fresh patch
batches, then one denoiser update and one generator update on a shared
batch.  Modes drop one side of the triangle:

* danet: denoiser R, generator G and discriminator D, full objective.
* based: no generator; the critic sees only (denoised, noisy) fakes.
* baseg: no denoiser; the critic sees only (clean, generated) fakes.
* plus:  fresh denoiser trained with L1 only on a generator-augmented set.

Every random draw comes from a named stream under the run seed, so a rerun
with the same seed reproduces losses and parameters bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import engine, metrics, nets
from .data import ImagePairSet, augment_with_generator
from .tensor import ContractError, Tape, Tensor, backward, no_grad, recording
from .tensor import ops
from .tensor.rngtools import stream

MODES = ("danet", "based", "baseg", "plus")

CSV_COLUMNS = [
    "epoch", "lr_R", "lr_G", "lr_D",
    "loss_D", "loss_R", "loss_G", "gp", "psnr_val", "akld_val",
]


class ConfigError(ValueError):
    """Raised with every offending key listed, not just the first."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "danet"
    epochs: int = 10
    batch_size: int = 16
    patch_size: int = 32
    epoch_patches: int = 200
    n_critic: int = 3
    alpha: float = 0.5
    tau1: float = 1000.0
    tau2: float = 10.0
    gp_lambda: float = 10.0
    lr_r: float = 1e-4
    lr_g: float = 1e-4
    lr_d: float = 2e-4
    betas_r: tuple = (0.9, 0.999)
    betas_g: tuple = (0.5, 0.9)
    betas_d: tuple = (0.5, 0.9)
    lr_half_period: int = 10
    adam_eps: float = 1e-8
    gf_size: int = 11
    gf_sigma: float = 3.0
    latent_channels: int = 1
    depth: int = 3
    base_channels: int = 32
    disc_base_channels: int = 32
    disc_stages: int = 5
    augment: bool = False
    plus_ratio: float = 1.0
    val_samples: int = 4

    def validate(self) -> None:
        bad = []
        if self.mode not in MODES:
            bad.append(f"mode={self.mode!r} (choose from {MODES})")
        for key in ("epochs", "batch_size", "patch_size", "epoch_patches",
                    "n_critic", "lr_half_period", "latent_channels", "depth",
                    "base_channels", "disc_base_channels", "disc_stages", "val_samples"):
            if getattr(self, key) < 1:
                bad.append(f"{key}={getattr(self, key)}")
        if not 0.0 <= self.alpha <= 1.0:
            bad.append(f"alpha={self.alpha}")
        for key in ("tau1", "tau2", "gp_lambda", "plus_ratio"):
            if getattr(self, key) < 0:
                bad.append(f"{key}={getattr(self, key)}")
        for key in ("lr_r", "lr_g", "lr_d", "gf_sigma", "adam_eps"):
            if getattr(self, key) <= 0:
                bad.append(f"{key}={getattr(self, key)}")
        for key in ("betas_r", "betas_g", "betas_d"):
            b = getattr(self, key)
            if len(b) != 2 or not all(0.0 <= v < 1.0 for v in b):
                bad.append(f"{key}={b}")
        if self.gf_size < 1 or self.gf_size % 2 == 0:
            bad.append(f"gf_size={self.gf_size} (must be odd)")
        if self.patch_size % (2**self.depth):
            bad.append(f"patch_size={self.patch_size} (not divisible by 2^depth={2**self.depth})")
        if self.patch_size % (2**self.disc_stages):
            bad.append(
                f"patch_size={self.patch_size} (not divisible by 2^disc_stages={2**self.disc_stages})"
            )
        if self.epoch_patches < self.batch_size:
            bad.append(f"epoch_patches={self.epoch_patches} < batch_size={self.batch_size}")
        if bad:
            raise ConfigError("invalid config values: " + "; ".join(bad))

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
        clean = dict(d)
        for key in ("betas_r", "betas_g", "betas_d"):
            if key in clean:
                clean[key] = tuple(clean[key])
        cfg = TrainConfig(**clean)
        cfg.validate()
        return cfg


@dataclass
class TrainResult:
    nets: dict[str, nets.NetworkParams]
    rows: list[dict]
    updates: dict[str, int]
    out_dir: Path | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])


def _build_nets(config: TrainConfig, channels: int, seed: int):
    rng = stream(seed, "init")
    r_net = g_net = None
    if config.mode in ("danet", "based"):
        r_cfg = nets.UNetConfig(channels, channels, config.depth, config.base_channels)
        r_net = nets.build_denoiser(r_cfg, rng)
    if config.mode in ("danet", "baseg"):
        g_cfg = nets.UNetConfig(
            channels + config.latent_channels, channels, config.depth, config.base_channels
        )
        g_net = nets.build_generator(g_cfg, config.latent_channels, rng)
    d_cfg = nets.DiscConfig(
        2 * channels, config.disc_base_channels, config.disc_stages, config.patch_size
    )
    d_net = nets.build_discriminator(d_cfg, rng)
    return r_net, g_net, d_net


def _val_latents(config: TrainConfig, val: ImagePairSet | None, seed: int):
    """Fixed latent draws per validation image, reused every epoch so the
    logged generator metric moves only when the generator does."""
    if val is None:
        return None
    rng = stream(seed, "val-latents")
    out = []
    for rec in val.records:
        H, W = rec.clean.shape[1:]
        out.append(
            rng.standard_normal((config.val_samples, config.latent_channels, H, W)).astype(
                np.float32
            )
        )
    return out


def _val_akld(g_net, val: ImagePairSet, latents, config: TrainConfig) -> float:
    vals = []
    for rec, zs in zip(val.records, latents):
        v_real = metrics.variance_map(rec.noisy, rec.clean, config.gf_size, config.gf_sigma)
        acc = 0.0
        for z in zs:
            with no_grad():
                yhat = nets.generator_forward(
                    g_net, Tensor(rec.clean[None]), Tensor(z[None])
                ).data[0]
            v_fake = metrics.variance_map(yhat, rec.clean, config.gf_size, config.gf_sigma)
            ratio = v_fake / v_real
            acc += float(np.mean(0.5 * (ratio - np.log(ratio) - 1.0)))
        vals.append(acc / len(zs))
    return float(np.mean(vals))


def _save_nets(out_dir: Path, tag: str, result_nets: dict, with_moments: bool) -> None:
    for role, net in result_nets.items():
        if net is not None:
            nets.save_checkpoint(out_dir / f"{role}_{tag}.ckpt", net, with_moments)


def train(
    config: TrainConfig,
    data: ImagePairSet,
    val: ImagePairSet | None = None,
    seed: int = 0,
    out_dir=None,
    generator: nets.NetworkParams | None = None,
    clean_pool: list[np.ndarray] | None = None,
) -> TrainResult:
    """Run one training job according to ``config.mode``.

    The plus mode needs a trained ``generator`` and a ``clean_pool`` to
    build its augmented set; the adversarial modes ignore both.  When
    ``out_dir`` is given it receives log.csv, per-epoch parameter
    checkpoints and final checkpoints with optimizer moments.
    """
    config.validate()
    if config.mode == "plus":
        if generator is None or clean_pool is None:
            raise ContractError("plus mode needs generator= and clean_pool=")
        aug = augment_with_generator(
            data, clean_pool, nets.generator_sampler(generator), config.plus_ratio, seed
        )
        return _train_l1(config, aug, val, seed, out_dir)
    return _train_adversarial(config, data, val, seed, out_dir)


def train_l1(config: TrainConfig, data: ImagePairSet, val=None, seed: int = 0, out_dir=None):
    """Plain L1 denoiser training; returns just the trained net (the full
    result is available through train() with a single-branch config)."""
    return _train_l1(config, data, val, seed, out_dir).nets["denoiser"]


def _train_l1(config, data, val, seed, out_dir) -> TrainResult:
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "init")
    r_cfg = nets.UNetConfig(data.channels, data.channels, config.depth, config.base_channels)
    r_net = nets.build_denoiser(r_cfg, rng)
    iters = config.epoch_patches // config.batch_size
    val_pairs = val.pairs() if val is not None else None
    rows = []
    u_r = 0
    for epoch in range(config.epochs):
        lr = engine.lr_schedule(epoch, config.lr_r, config.lr_half_period)
        draw = data.batch_stream(seed, epoch, config.augment)
        loss_sum = 0.0
        for it in range(iters):
            xb, yb = draw(config.batch_size)
            x, y = Tensor(xb), Tensor(yb)
            tape = Tape()
            with recording(tape):
                loss = engine.denoiser_fidelity(nets.denoiser_forward(r_net, y), x)
            val_f = engine.check_finite("loss_R", loss.item(), f"epoch {epoch} iter {it}")
            loss_sum += val_f
            store = backward(loss, tape, wrt=r_net.params.values())
            engine.adam_step(r_net, engine.collect_grads(r_net, store), lr,
                             config.betas_r, config.adam_eps)
            u_r += 1
        row = {
            "epoch": epoch + 1,
            "lr_R": lr, "lr_G": None, "lr_D": None,
            "loss_D": None, "loss_R": loss_sum / iters, "loss_G": None, "gp": None,
            "psnr_val": metrics.evaluate_psnr(r_net, val_pairs) if val_pairs else None,
            "akld_val": None,
        }
        rows.append(row)
        if out_dir is not None:
            write_log(rows, out_dir / "log.csv")
            _save_nets(out_dir, f"e{epoch + 1:03d}", {"denoiser": r_net}, False)
    result = TrainResult({"denoiser": r_net}, rows, {"denoiser": u_r}, out_dir)
    if out_dir is not None:
        _save_nets(out_dir, "final", result.nets, True)
    return result


def _train_adversarial(config, data, val, seed, out_dir) -> TrainResult:
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    r_net, g_net, d_net = _build_nets(config, data.channels, seed)
    critic = lambda a, b: nets.disc_forward(d_net, a, b)
    iters = config.epoch_patches // config.batch_size
    alpha, lam = config.alpha, config.gp_lambda
    val_pairs = val.pairs() if val is not None else None
    latents = _val_latents(config, val, seed) if g_net is not None else None
    result_nets = {
        k: v
        for k, v in (("denoiser", r_net), ("generator", g_net), ("discriminator", d_net))
        if v is not None
    }
    rows = []
    u_d = u_r = u_g = 0

    for epoch in range(config.epochs):
        lr_r = engine.lr_schedule(epoch, config.lr_r, config.lr_half_period)
        lr_g = engine.lr_schedule(epoch, config.lr_g, config.lr_half_period)
        lr_d = engine.lr_schedule(epoch, config.lr_d, config.lr_half_period)
        draw = data.batch_stream(seed, epoch, config.augment)
        rng_gp = stream(seed, "gp", epoch)
        rng_z = stream(seed, "latent", epoch)
        sums = {"loss_D": 0.0, "loss_R": 0.0, "loss_G": 0.0, "gp": 0.0}

        for it in range(iters):
            where = f"epoch {epoch} iter {it}"

            for j in range(config.n_critic):
                xb, yb = draw(config.batch_size)
                x, y = Tensor(xb), Tensor(yb)
                with no_grad():
                    xhat = nets.denoiser_forward(r_net, y) if r_net is not None else None
                    yhat = _gen_sample(g_net, x, rng_z) if g_net is not None else None
                tape = Tape()
                with recording(tape):
                    d_real = nets.disc_forward(d_net, x, y)
                    d_fake_r = nets.disc_forward(d_net, xhat, y) if xhat is not None else None
                    d_fake_g = nets.disc_forward(d_net, x, yhat) if yhat is not None else None
                    adv = engine.adversarial_score(d_real, d_fake_r, d_fake_g, alpha)
                    loss_d = ops.neg(adv)
                    gp_val = 0.0
                    if xhat is not None:
                        gp_r = engine.gradient_penalty(critic, (x, y), (xhat, y), lam, rng_gp)
                        loss_d = ops.add(loss_d, ops.scale(gp_r, alpha))
                        gp_val += gp_r.item()
                    if yhat is not None:
                        gp_g = engine.gradient_penalty(critic, (x, y), (x, yhat), lam, rng_gp)
                        loss_d = ops.add(loss_d, ops.scale(gp_g, 1.0 - alpha))
                        gp_val += gp_g.item()
                sums["loss_D"] += engine.check_finite("loss_D", loss_d.item(), f"{where} critic {j}")
                sums["gp"] += gp_val
                store = backward(loss_d, tape, wrt=d_net.params.values())
                engine.adam_step(d_net, engine.collect_grads(d_net, store), lr_d,
                                 config.betas_d, config.adam_eps)
                u_d += 1

            xb, yb = draw(config.batch_size)
            x, y = Tensor(xb), Tensor(yb)

            if r_net is not None:
                tape = Tape()
                with recording(tape):
                    xhat = nets.denoiser_forward(r_net, y)
                    adv_r = ops.mean_all(nets.disc_forward(d_net, xhat, y))
                    fid = engine.denoiser_fidelity(xhat, x)
                    loss_r = ops.add(ops.scale(adv_r, -alpha), ops.scale(fid, config.tau1))
                sums["loss_R"] += engine.check_finite("loss_R", loss_r.item(), where)
                store = backward(loss_r, tape, wrt=r_net.params.values())
                engine.adam_step(r_net, engine.collect_grads(r_net, store), lr_r,
                                 config.betas_r, config.adam_eps)
                u_r += 1

            if g_net is not None:
                z = Tensor(
                    rng_z.standard_normal(
                        (x.shape[0], config.latent_channels, x.shape[2], x.shape[3])
                    ).astype(np.float32)
                )
                tape = Tape()
                with recording(tape):
                    yhat = nets.generator_forward(g_net, x, z)
                    adv_g = ops.mean_all(nets.disc_forward(d_net, x, yhat))
                    stat = engine.noise_consistency(yhat, y, x, config.gf_size, config.gf_sigma)
                    loss_g = ops.add(ops.scale(adv_g, -(1.0 - alpha)), ops.scale(stat, config.tau2))
                sums["loss_G"] += engine.check_finite("loss_G", loss_g.item(), where)
                store = backward(loss_g, tape, wrt=g_net.params.values())
                engine.adam_step(g_net, engine.collect_grads(g_net, store), lr_g,
                                 config.betas_g, config.adam_eps)
                u_g += 1

            gen_updates = u_r if r_net is not None else u_g
            if u_d != config.n_critic * gen_updates:
                raise ContractError(
                    f"update bookkeeping broke at {where}: {u_d} critic updates vs "
                    f"{gen_updates} generator-side updates with n_critic={config.n_critic}"
                )

        row = {
            "epoch": epoch + 1,
            "lr_R": lr_r if r_net is not None else None,
            "lr_G": lr_g if g_net is not None else None,
            "lr_D": lr_d,
            "loss_D": sums["loss_D"] / (iters * config.n_critic),
            "loss_R": sums["loss_R"] / iters if r_net is not None else None,
            "loss_G": sums["loss_G"] / iters if g_net is not None else None,
            "gp": sums["gp"] / (iters * config.n_critic),
            "psnr_val": (
                metrics.evaluate_psnr(r_net, val_pairs)
                if r_net is not None and val_pairs
                else None
            ),
            "akld_val": (
                _val_akld(g_net, val, latents, config) if g_net is not None and val else None
            ),
        }
        rows.append(row)
        if out_dir is not None:
            write_log(rows, out_dir / "log.csv")
            _save_nets(out_dir, f"e{epoch + 1:03d}", result_nets, False)

    updates = {"discriminator": u_d}
    if r_net is not None:
        updates["denoiser"] = u_r
    if g_net is not None:
        updates["generator"] = u_g
    result = TrainResult(result_nets, rows, updates, out_dir)
    if out_dir is not None:
        _save_nets(out_dir, "final", result.nets, True)
    return result


def _gen_sample(g_net, x: Tensor, rng: np.random.Generator) -> Tensor:
    z = Tensor(
        rng.standard_normal((x.shape[0], g_net.latent_channels, x.shape[2], x.shape[3])).astype(
            np.float32
        )
    )
    return nets.generator_forward(g_net, x, z)
