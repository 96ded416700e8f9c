"""Synthetic-noise oracles, image I/O, pair sets and patch sampling.

Noise models are closed-form samplers with known per-pixel standard
deviation, which is what makes the generator metrics verifiable: any
statistic of an oracle-corrupted dataset can be computed analytically and
compared against the trained pipeline.

All images are (C, H, W) float32 with clean values in [0, 1].  Noisy
values may leave [0, 1] unless clipping was requested; the pair set
records which convention was used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .tensor import ParamError, ShapeError, Tensor, no_grad
from .tensor import ops
from .tensor.dtn import read_array, write_array
from .tensor.rngtools import stream

NOISE_KINDS = ("gaussian", "signal", "stripes")


@dataclass(frozen=True)
class NoiseModel:
    """Closed-form noise law with a known stddev at every pixel.

    kinds:
        gaussian: homoscedastic, stddev ``sigma`` everywhere.
        signal:   variance sigma1^2 * x + sigma2^2 (Poisson-Gaussian shape).
        stripes:  horizontal bands of width ``band`` rows alternating
                  between stddev ``sigma_lo`` and ``sigma_hi``.
    """

    kind: str = "gaussian"
    sigma: float = 0.1
    sigma1: float = 0.12
    sigma2: float = 0.03
    sigma_lo: float = 0.05
    sigma_hi: float = 0.2
    band: int = 4

    def __post_init__(self):
        bad = []
        if self.kind not in NOISE_KINDS:
            bad.append(f"kind={self.kind!r} (choose from {NOISE_KINDS})")
        if self.kind == "gaussian" and self.sigma < 0:
            bad.append(f"sigma={self.sigma}")
        if self.kind == "signal" and (self.sigma1 < 0 or self.sigma2 < 0):
            bad.append(f"sigma1={self.sigma1}, sigma2={self.sigma2}")
        if self.kind == "stripes":
            if self.sigma_lo < 0 or self.sigma_hi < 0:
                bad.append(f"sigma_lo={self.sigma_lo}, sigma_hi={self.sigma_hi}")
            if self.band < 1:
                bad.append(f"band={self.band}")
        if bad:
            raise ParamError("NoiseModel: invalid parameters: " + "; ".join(bad))

    def stddev_map(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel noise stddev for clean image x, float64, same shape."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "gaussian":
            return np.full_like(x, self.sigma)
        if self.kind == "signal":
            return np.sqrt(self.sigma1**2 * np.clip(x, 0.0, None) + self.sigma2**2)
        rows = (np.arange(x.shape[-2]) // self.band) % 2
        sig = np.where(rows == 0, self.sigma_lo, self.sigma_hi)
        return np.broadcast_to(sig[:, None], x.shape).copy()

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One noise field for clean image x."""
        sd = self.stddev_map(x)
        return (rng.standard_normal(x.shape) * sd).astype(np.float32)

    def to_json(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": self.kind, "sigma": self.sigma}
        if self.kind == "signal":
            return {"kind": self.kind, "sigma1": self.sigma1, "sigma2": self.sigma2}
        return {
            "kind": self.kind,
            "sigma_lo": self.sigma_lo,
            "sigma_hi": self.sigma_hi,
            "band": self.band,
        }

    @staticmethod
    def from_json(d: dict) -> "NoiseModel":
        allowed = {"kind", "sigma", "sigma1", "sigma2", "sigma_lo", "sigma_hi", "band"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ParamError(f"NoiseModel: unknown keys: {', '.join(unknown)}")
        return NoiseModel(**d)


def synth_noisy(
    x: np.ndarray, model: NoiseModel, rng: np.random.Generator, clip: bool = False
) -> np.ndarray:
    """Corrupt a clean image; optionally clip back to [0, 1]."""
    y = np.asarray(x, dtype=np.float32) + model.sample(x, rng)
    return np.clip(y, 0.0, 1.0) if clip else y


def model_sampler(model: NoiseModel, clip: bool = False):
    """Adapt a NoiseModel to the sampler interface used by the metrics."""
    return lambda x, rng: synth_noisy(x, model, rng, clip)


# ---------------------------------------------------------------------------
# PNG I/O


def load_image(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG (grayscale or RGB) as (C, H, W) in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ParamError(f"{path}: unsupported sample type {img.dtype}, need uint8 or uint16")
    if img.ndim == 2:
        arr = img[None].astype(np.float32)
    elif img.ndim == 3 and img.shape[2] == 3:
        arr = np.ascontiguousarray(img[:, :, ::-1].transpose(2, 0, 1)).astype(np.float32)
    else:
        raise ParamError(f"{path}: unsupported channel layout {img.shape}, need grayscale or RGB")
    return arr / np.float32(scale)


def save_image(img: np.ndarray, path, bits: int = 8) -> None:
    """Write (C, H, W) float data in [0, 1] as PNG, rounding half away from zero."""
    if bits == 8:
        scale, dtype = 255.0, np.uint8
    elif bits == 16:
        scale, dtype = 65535.0, np.uint16
    else:
        raise ParamError(f"save_image: bit depth must be 8 or 16, got {bits}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError(f"save_image: expected (1|3, H, W), got {arr.shape}")
    q = np.floor(np.clip(arr, 0.0, 1.0) * scale + 0.5).astype(dtype)
    if q.shape[0] == 1:
        out = q[0]
    else:
        out = np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1])
    if not cv2.imwrite(str(path), out):
        raise OSError(f"failed to write image {path}")


# ---------------------------------------------------------------------------
# pair sets


@dataclass
class PairRecord:
    clean: np.ndarray
    noisy: np.ndarray
    source: str = "real"  # "real" or "synthetic"
    name: str = ""


class ImagePairSet:
    """Aligned clean/noisy image pairs plus patch-sampling parameters.

    ``synth_fraction`` declares the stratification used when both real and
    synthetic records are present: each sampled patch draws its source
    label first, then a record uniformly within that source.
    """

    def __init__(
        self,
        records: list[PairRecord],
        patch_size: int = 32,
        epoch_patches: int = 200,
        clip: bool = False,
        synth_fraction: float | None = None,
    ):
        if not records:
            raise ParamError("ImagePairSet: no records")
        ch = records[0].clean.shape[0]
        for i, r in enumerate(records):
            if r.clean.shape != r.noisy.shape:
                raise ShapeError(
                    f"ImagePairSet: record {i} clean {r.clean.shape} != noisy {r.noisy.shape}"
                )
            if r.clean.ndim != 3 or r.clean.shape[0] != ch:
                raise ShapeError(
                    f"ImagePairSet: record {i} shape {r.clean.shape} inconsistent with {ch} channels"
                )
            if r.source not in ("real", "synthetic"):
                raise ParamError(f"ImagePairSet: record {i} has source {r.source!r}")
        if patch_size < 1 or epoch_patches < 1:
            raise ParamError(
                f"ImagePairSet: patch_size={patch_size}, epoch_patches={epoch_patches}"
            )
        self.records = records
        self.patch_size = int(patch_size)
        self.epoch_patches = int(epoch_patches)
        self.clip = bool(clip)
        self.synth_fraction = synth_fraction

    @property
    def channels(self) -> int:
        return self.records[0].clean.shape[0]

    def __len__(self) -> int:
        return len(self.records)

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(r.clean, r.noisy) for r in self.records]

    def _pools(self):
        real = [i for i, r in enumerate(self.records) if r.source == "real"]
        synth = [i for i, r in enumerate(self.records) if r.source == "synthetic"]
        return real, synth

    def sample_patches(
        self, count: int, rng: np.random.Generator, augment: bool = False
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw aligned clean/noisy patch batches of shape (count, C, p, p)."""
        p = self.patch_size
        real, synth = self._pools()
        stratified = self.synth_fraction is not None and real and synth
        cleans, noisys = [], []
        for _ in range(int(count)):
            if stratified:
                pool = synth if rng.random() < self.synth_fraction else real
                idx = int(pool[rng.integers(len(pool))])
            else:
                idx = int(rng.integers(len(self.records)))
            rec = self.records[idx]
            H, W = rec.clean.shape[1:]
            if H < p or W < p:
                raise ShapeError(
                    f"sample_patches: record {idx} of shape {rec.clean.shape} "
                    f"smaller than patch {p}"
                )
            i = int(rng.integers(H - p + 1))
            j = int(rng.integers(W - p + 1))
            c = rec.clean[:, i : i + p, j : j + p]
            n = rec.noisy[:, i : i + p, j : j + p]
            if augment:
                t = int(rng.integers(8))
                c = _dihedral(c, t)
                n = _dihedral(n, t)
            cleans.append(c)
            noisys.append(n)
        return np.ascontiguousarray(np.stack(cleans)), np.ascontiguousarray(np.stack(noisys))

    def batch_stream(self, seed: int, epoch: int, augment: bool = False):
        """Patch batches as a pure function of (seed, epoch)."""
        rng = stream(seed, "patches", epoch)

        def draw(count: int):
            return self.sample_patches(count, rng, augment)

        return draw


def _dihedral(img: np.ndarray, t: int) -> np.ndarray:
    """One of the 8 axis-aligned flips/rotations, same for any (C, H, W)."""
    out = np.rot90(img, k=t % 4, axes=(1, 2))
    if t >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# procedural toy images


def make_toy_image(size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field plus a few flat shapes and a gradient, in [0, 1].

    Enough structure for PSNR/SSIM to move and for patches to differ, while
    staying cheap to synthesize at any size.
    """
    coarse = rng.normal(size=(channels, 8, 8))
    up = np.kron(coarse, np.ones((size // 8, size // 8)))
    with no_grad():
        up = ops.gaussian_filter(Tensor(up[None], dtype=np.float32), 11, 3.0).data[0]
    img = up.astype(np.float64)

    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    a, b = rng.uniform(-0.6, 0.6, size=2)
    img += (a * xs + b * ys)[None]

    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(-0.5, 0.5, size=(channels, 1, 1))
        if rng.random() < 0.5:
            h = int(rng.integers(size // 8, size // 2))
            w = int(rng.integers(size // 8, size // 2))
            i = int(rng.integers(size - h + 1))
            j = int(rng.integers(size - w + 1))
            img[:, i : i + h, j : j + w] += color
        else:
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 10, size / 3)
            mask = (ys * (size - 1) - cy) ** 2 + (xs * (size - 1) - cx) ** 2 < r * r
            img[:, mask] += color[:, 0, 0][:, None]

    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo + 1e-9)

    # Fine grain, shared across channels and band-limited: unlike sensor
    # noise it is spatially correlated and identical per channel, so a
    # denoiser can keep it while smoothing, and anything that blurs
    # indiscriminately pays for the texture it erases.  Added after range
    # normalization so its contrast does not depend on the base field.
    grain = rng.normal(size=(1, 1, size, size))
    with no_grad():
        grain = ops.gaussian_filter(Tensor(grain, dtype=np.float32), 5, 0.8).data[0]
    grain = grain / (grain.std() + 1e-9)
    img = 0.08 + 0.84 * img + rng.uniform(0.05, 0.09) * grain

    # A few patches of per-channel white micropattern for variety; kept mild
    # so denoising gains stay mostly about the noise.  The concentrated form
    # of this texture lives in make_texture_pairs.
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 6, size / 3.2, size=2)
        d2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = np.maximum(mask, np.clip(1.3 - d2, 0.0, 1.0))
    micro = rng.normal(size=(channels, size, size))
    img += rng.uniform(0.05, 0.08) * mask[None] * micro

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_toy_pairs(
    count: int,
    size: int,
    model: NoiseModel,
    seed: int,
    channels: int = 3,
    patch_size: int = 32,
    epoch_patches: int = 200,
    clip: bool = False,
    name_prefix: str = "toy",
) -> ImagePairSet:
    """Deterministic procedural dataset: clean textures plus oracle noise."""
    records = []
    for i in range(int(count)):
        clean = make_toy_image(size, channels, stream(seed, "toy-clean", i))
        noisy = synth_noisy(clean, model, stream(seed, "toy-noise", i), clip)
        records.append(PairRecord(clean, noisy, "real", f"{name_prefix}{i:03d}"))
    return ImagePairSet(records, patch_size, epoch_patches, clip)


# ---------------------------------------------------------------------------
# derived sets: synthetic twins and generator augmentation


def make_texture_image(
    size: int, channels: int, rng: np.random.Generator, amp: float = 0.18
) -> np.ndarray:
    """Smooth base field under a full-frame per-channel white micropattern.

    The micropattern has the same local signature as white sensor noise, so
    a denoiser cannot separate it by structure; all it can do is pick a
    suppression strength, and the cost of that choice depends directly on
    the noise level the model was trained against.  This makes the family
    the right substrate for experiments that compare denoisers trained on
    different noise levels, where plainer toy images let a mistuned model
    hide behind generic smoothing.
    """
    coarse = rng.normal(size=(channels, 8, 8))
    up = np.kron(coarse, np.ones((size // 8, size // 8)))
    with no_grad():
        up = ops.gaussian_filter(Tensor(up[None], dtype=np.float32), 11, 3.0).data[0]
    base = up.astype(np.float64)
    lo, hi = base.min(), base.max()
    base = (base - lo) / (hi - lo + 1e-9)
    img = 0.25 + 0.5 * base + amp * rng.normal(size=(channels, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_texture_pairs(
    count: int,
    size: int,
    model: NoiseModel,
    seed: int,
    channels: int = 3,
    patch_size: int = 32,
    epoch_patches: int = 200,
    clip: bool = False,
    amp: float = 0.18,
) -> ImagePairSet:
    """Deterministic micropattern dataset; see make_texture_image."""
    records = []
    for i in range(int(count)):
        clean = make_texture_image(size, channels, stream(seed, "tex-clean", i), amp)
        noisy = synth_noisy(clean, model, stream(seed, "tex-noise", i), clip)
        records.append(PairRecord(clean, noisy, "real", f"tex{i:03d}"))
    return ImagePairSet(records, patch_size, epoch_patches, clip)


def synth_twin_set(base: ImagePairSet, sampler, seed: int) -> ImagePairSet:
    """Same clean images, noise re-drawn from ``sampler``; tagged synthetic."""
    records = []
    for i, rec in enumerate(base.records):
        noisy = np.asarray(sampler(rec.clean, stream(seed, "twin", i)), dtype=np.float32)
        records.append(PairRecord(rec.clean, noisy, "synthetic", rec.name + "+twin"))
    return ImagePairSet(records, base.patch_size, base.epoch_patches, base.clip)


def augment_with_generator(
    base: ImagePairSet,
    clean_pool: list[np.ndarray],
    sampler,
    ratio: float,
    seed: int,
) -> ImagePairSet:
    """Extend real pairs with sampler-corrupted clean images.

    Adds round(ratio * len(base)) synthetic records drawn cyclically from
    the clean pool and declares the matching stratification fraction, so
    patch sampling hits synthetic data in proportion ratio / (1 + ratio).
    """
    if ratio < 0:
        raise ParamError(f"augment_with_generator: negative ratio {ratio}")
    if not clean_pool:
        raise ParamError("augment_with_generator: empty clean pool")
    n_extra = int(round(ratio * len(base)))
    records = list(base.records)
    for i in range(n_extra):
        clean = np.asarray(clean_pool[i % len(clean_pool)], dtype=np.float32)
        noisy = np.asarray(sampler(clean, stream(seed, "augment", i)), dtype=np.float32)
        records.append(PairRecord(clean, noisy, "synthetic", f"aug{i:03d}"))
    frac = n_extra / max(len(records), 1)
    return ImagePairSet(records, base.patch_size, base.epoch_patches, base.clip, synth_fraction=frac)


# ---------------------------------------------------------------------------
# manifests and caches

_MANIFEST_KEYS = {
    "version",
    "patch_size",
    "epoch_patches",
    "clip",
    "images",
    "noise_model",
    "noise_seed",
    "procedural",
    "cache",
}


def load_manifest(path) -> ImagePairSet:
    """Build a pair set from a JSON manifest.

    Sources, in combination: explicit image pairs ("images", each entry a
    clean path plus either a noisy path or nothing), a procedural block
    ("procedural": count/size/seed), and a DTN1 cache ("cache": clean/noisy
    paths).  Entries without a noisy side require a top-level "noise_model"
    and "noise_seed".  Relative paths resolve against the manifest.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParamError(f"{path}: not valid JSON: {e}") from e
    unknown = sorted(set(spec) - _MANIFEST_KEYS)
    if unknown:
        raise ParamError(f"{path}: unknown manifest keys: {', '.join(unknown)}")
    if spec.get("version", 1) != 1:
        raise ParamError(f"{path}: unsupported manifest version {spec.get('version')}")
    base = path.parent
    clip = bool(spec.get("clip", False))
    model = NoiseModel.from_json(spec["noise_model"]) if "noise_model" in spec else None
    noise_seed = spec.get("noise_seed")

    records: list[PairRecord] = []
    for i, entry in enumerate(spec.get("images", [])):
        bad = sorted(set(entry) - {"clean", "noisy", "source"})
        if bad or "clean" not in entry:
            raise ParamError(f"{path}: images[{i}]: bad keys {bad or ['missing clean']}")
        clean = load_image(base / entry["clean"])
        if "noisy" in entry:
            noisy = load_image(base / entry["noisy"])
        else:
            if model is None or noise_seed is None:
                raise ParamError(
                    f"{path}: images[{i}] has no noisy side and the manifest "
                    f"lacks noise_model/noise_seed"
                )
            noisy = synth_noisy(clean, model, stream(int(noise_seed), "manifest", i), clip)
        records.append(PairRecord(clean, noisy, entry.get("source", "real"), entry["clean"]))

    if "procedural" in spec:
        proc = spec["procedural"]
        bad = sorted(set(proc) - {"count", "size", "seed", "channels"})
        if bad:
            raise ParamError(f"{path}: procedural: unknown keys {', '.join(bad)}")
        if model is None or "seed" not in proc:
            raise ParamError(f"{path}: procedural block needs noise_model and a seed")
        toy = make_toy_pairs(
            proc["count"], proc["size"], model, proc["seed"],
            channels=proc.get("channels", 3), clip=clip,
        )
        records.extend(toy.records)

    if "cache" in spec:
        cache = spec["cache"]
        clean_stack = read_array(base / cache["clean"])
        noisy_stack = read_array(base / cache["noisy"])
        if clean_stack.shape != noisy_stack.shape:
            raise ShapeError(
                f"{path}: cache stacks {clean_stack.shape} and {noisy_stack.shape} differ"
            )
        for i in range(clean_stack.shape[0]):
            records.append(
                PairRecord(clean_stack[i], noisy_stack[i], "real", f"cache{i:03d}")
            )

    return ImagePairSet(
        records,
        patch_size=spec.get("patch_size", 32),
        epoch_patches=spec.get("epoch_patches", 200),
        clip=clip,
    )


def write_cache(pairset: ImagePairSet, clean_path, noisy_path) -> None:
    """Dump a uniform-size pair set as two DTN1 stacks."""
    shapes = {r.clean.shape for r in pairset.records}
    if len(shapes) != 1:
        raise ShapeError(f"write_cache: records have mixed shapes {sorted(shapes)}")
    write_array(clean_path, np.stack([r.clean for r in pairset.records]))
    write_array(noisy_path, np.stack([r.noisy for r in pairset.records]))
