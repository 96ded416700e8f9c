"""Command-line interface.

Subcommands: train, denoise, generate, eval (psnr/ssim/akld/pgap),
gradcheck, report.  Global flags --config/--seed/--out/--threads plus
dotted-key overrides such as ``--train.tau1 500`` that patch the config
file in place.

Exit codes: 0 on success, 1 on runtime failures (non-finite losses,
tolerance violations), 2 on usage and config errors.

This module imports numpy-heavy code lazily so --threads can pin the BLAS
thread pools before numpy initializes; apart from run.log, no output file
contains a timestamp.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class UsageError(ValueError):
    pass


def _peek_threads(argv: list[str]) -> int | None:
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            try:
                return int(argv[i + 1])
            except ValueError:
                return None
        if tok.startswith("--threads="):
            try:
                return int(tok.split("=", 1)[1])
            except ValueError:
                return None
    return None


def _pin_threads(n: int) -> None:
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="danet", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="root RNG seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread count")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run a training job")
    t.add_argument("--data", help="training-set manifest")
    t.add_argument("--val", help="validation-set manifest")
    t.add_argument("--mode", help="danet | based | baseg | plus")
    t.add_argument("--generator", help="generator checkpoint (plus mode)")
    t.add_argument("--pool", help="clean-pool manifest (plus mode)")

    d = sub.add_parser("denoise", parents=[common], help="denoise PNG images")
    d.add_argument("--ckpt", required=True, help="denoiser checkpoint")
    d.add_argument("--in", dest="inputs", required=True, help="input image or directory")
    d.add_argument("--bits", type=int, default=8, choices=(8, 16))

    g = sub.add_parser("generate", parents=[common], help="sample noisy versions of clean PNGs")
    g.add_argument("--ckpt", required=True, help="generator checkpoint")
    g.add_argument("--in", dest="inputs", required=True, help="clean image or directory")
    g.add_argument("--count", type=int, default=1, help="samples per image")
    g.add_argument("--bits", type=int, default=8, choices=(8, 16))

    e = sub.add_parser("eval", parents=[common], help="metrics")
    esub = e.add_subparsers(dest="metric", required=True)
    for name in ("psnr", "ssim"):
        m = esub.add_parser(name, parents=[common])
        m.add_argument("--a", required=True, help="first image directory")
        m.add_argument("--b", required=True, help="second image directory")
    a = esub.add_parser("akld", parents=[common])
    a.add_argument("--data", required=True, help="pair-set manifest")
    a.add_argument("--ckpt", help="generator checkpoint sampler")
    a.add_argument("--model", help="oracle noise model as JSON (instead of --ckpt)")
    a.add_argument("--samples", type=int, default=50)
    pg = esub.add_parser("pgap", parents=[common])
    pg.add_argument("--real", required=True, help="real pair manifest")
    pg.add_argument("--synth", required=True, help="synthetic pair manifest")
    pg.add_argument("--eval-data", required=True, help="held-out pair manifest")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification")
    gc.add_argument("--scope", default="ops,networks,losses",
                    help="comma-separated: ops, networks, losses")
    gc.add_argument("--tol", type=float, default=1e-3)

    r = sub.add_parser("report", parents=[common], help="render figures from a run directory")
    r.add_argument("--run", required=True, help="run directory with log.csv")
    return p


def parse_overrides(tokens: list[str]) -> dict[str, object]:
    """Turn leftover ``--section.key value`` tokens into a flat dict.

    Values parse as JSON when possible (numbers, booleans, lists) and fall
    back to plain strings.
    """
    out: dict[str, object] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            key = tok[2:]
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok!r} is missing a value")
            raw = tokens[i + 1]
            i += 2
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    cfg["_base"] = str(p.parent)
    return cfg


def apply_overrides(cfg: dict, overrides: dict) -> None:
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {dotted!r} descends into a non-object")
        node[parts[-1]] = value


def _resolve_path(value: str | None, cfg: dict) -> str | None:
    if value is None:
        return None
    p = Path(value)
    if not p.is_absolute() and "_base" in cfg and not p.exists():
        candidate = Path(cfg["_base"]) / p
        if candidate.exists():
            return str(candidate)
    return str(p)


def write_resolved(out_dir: Path, payload: dict) -> None:
    payload = {k: v for k, v in payload.items() if not k.startswith("_")}
    (out_dir / "config.resolved.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _log_line(out_dir: Path | None, text: str) -> None:
    # run.log is the one place timestamps are allowed
    if out_dir is None:
        return
    import datetime

    stamp = datetime.datetime.now().isoformat(timespec="seconds")
    with open(out_dir / "run.log", "a") as f:
        f.write(f"{stamp} {text}\n")


# ---------------------------------------------------------------------------
# command implementations


def cmd_train(args, overrides) -> int:
    from .data import load_manifest
    from .nets import load_checkpoint
    from .train import ConfigError, TrainConfig, train

    cfg = load_config(args.config)
    apply_overrides(cfg, overrides)
    train_section = dict(cfg.get("train", {}))
    if args.mode is not None:
        train_section["mode"] = args.mode
    tconf = TrainConfig.from_dict(train_section)

    data_section = dict(cfg.get("data", {}))
    data_path = args.data or _resolve_path(data_section.get("train"), cfg)
    val_path = args.val or _resolve_path(data_section.get("val"), cfg)
    pool_path = args.pool or _resolve_path(data_section.get("pool"), cfg)
    gen_path = args.generator or _resolve_path(data_section.get("generator"), cfg)
    if data_path is None:
        raise UsageError("train: no training data (use --data or config data.train)")
    data = load_manifest(_resolve_path(data_path, cfg))
    val = load_manifest(_resolve_path(val_path, cfg)) if val_path else None

    generator = clean_pool = None
    if tconf.mode == "plus":
        if gen_path is None or pool_path is None:
            raise UsageError("train: plus mode needs --generator and --pool")
        generator = load_checkpoint(gen_path)
        if generator.role != "generator":
            raise UsageError(f"{gen_path}: role {generator.role!r}, expected generator")
        clean_pool = [r.clean for r in load_manifest(pool_path).records]

    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        resolved = {
            "command": "train",
            "seed": seed,
            "threads": args.threads,
            "data": {"train": data_path, "val": val_path, "pool": pool_path,
                     "generator": gen_path},
            "train": _config_dict(tconf),
        }
        write_resolved(out_dir, resolved)
    _log_line(out_dir, f"train start mode={tconf.mode} seed={seed}")
    try:
        result = train(tconf, data, val, seed=seed, out_dir=out_dir,
                       generator=generator, clean_pool=clean_pool)
    except Exception as e:
        _log_line(out_dir, f"train failed: {e}")
        raise
    _log_line(out_dir, f"train done: updates {result.updates}")
    last = result.rows[-1] if result.rows else {}
    bits = [f"epochs={len(result.rows)}"]
    for key in ("loss_D", "loss_R", "loss_G", "psnr_val", "akld_val"):
        if last.get(key) is not None:
            bits.append(f"{key}={last[key]:.4f}")
    print("train finished: " + " ".join(bits))
    return 0


def _config_dict(tconf) -> dict:
    from dataclasses import asdict

    d = asdict(tconf)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _png_inputs(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob("*.png"))
        if not files:
            raise UsageError(f"{spec}: no PNG files")
        return files
    if not p.exists():
        raise UsageError(f"{spec}: no such file or directory")
    return [p]


def cmd_denoise(args) -> int:
    from .data import load_image, save_image
    from .metrics import denoise_image
    from .nets import load_checkpoint

    net = load_checkpoint(args.ckpt)
    if net.role != "denoiser":
        raise UsageError(f"{args.ckpt}: role {net.role!r}, expected denoiser")
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = _png_inputs(args.inputs)
    for path in inputs:
        img = load_image(path)
        restored = denoise_image(net, img)
        save_image(restored, out_dir / path.name, bits=args.bits)
    print(f"denoised {len(inputs)} image(s) -> {out_dir}")
    return 0


def cmd_generate(args) -> int:
    from .data import load_image, save_image
    from .nets import generator_sampler, load_checkpoint
    from .tensor.rngtools import stream

    net = load_checkpoint(args.ckpt)
    if net.role != "generator":
        raise UsageError(f"{args.ckpt}: role {net.role!r}, expected generator")
    sampler = generator_sampler(net)
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    import numpy as np

    n = 0
    for idx, path in enumerate(_png_inputs(args.inputs)):
        img = load_image(path)
        rng = stream(seed, "generate", idx)
        for k in range(args.count):
            noisy = np.clip(sampler(img, rng), 0.0, 1.0)
            save_image(noisy, out_dir / f"{path.stem}_s{seed}_k{k}.png", bits=args.bits)
            n += 1
    print(f"wrote {n} sample(s) -> {out_dir}")
    return 0


def _pair_folders(a: str, b: str):
    from .data import load_image

    fa = {p.name: p for p in _png_inputs(a)}
    fb = {p.name: p for p in _png_inputs(b)}
    names = sorted(fa.keys() & fb.keys())
    if not names:
        raise UsageError(f"no common PNG names between {a} and {b}")
    return [(name, load_image(fa[name]), load_image(fb[name])) for name in names]


def _write_metric_outputs(out: str | None, rows: list[dict], summary: dict) -> None:
    if out is None:
        return
    import csv

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = summary["metric"]
    with open(out_dir / f"{name}.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    (out_dir / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_eval(args, overrides) -> int:
    import numpy as np

    from . import metrics

    if args.metric in ("psnr", "ssim"):
        fn = metrics.psnr if args.metric == "psnr" else metrics.ssim
        rows = []
        for name, ia, ib in _pair_folders(args.a, args.b):
            rows.append({"name": name, args.metric: repr(float(fn(ia, ib)))})
        mean = float(np.mean([float(r[args.metric]) for r in rows]))
        summary = {"metric": args.metric, "value": mean, "count": len(rows)}
        _write_metric_outputs(args.out, rows, summary)
        print(f"{args.metric}: mean {mean:.4f} over {len(rows)} image(s)")
        return 0

    if args.metric == "akld":
        from .data import NoiseModel, load_manifest, model_sampler
        from .nets import generator_sampler, load_checkpoint
        from .tensor.rngtools import stream

        pairset = load_manifest(args.data)
        if (args.ckpt is None) == (args.model is None):
            raise UsageError("eval akld: pass exactly one of --ckpt or --model")
        if args.ckpt:
            net = load_checkpoint(args.ckpt)
            if net.role != "generator":
                raise UsageError(f"{args.ckpt}: role {net.role!r}, expected generator")
            sampler = generator_sampler(net)
        else:
            sampler = model_sampler(NoiseModel.from_json(json.loads(args.model)))
        seed = args.seed if args.seed is not None else 0
        rng = stream(seed, "akld")
        rows = []
        for rec in pairset.records:
            val = metrics.akld(sampler, rec.clean, rec.noisy, args.samples, rng)
            rows.append({"name": rec.name, "akld": repr(float(val))})
        mean = float(np.mean([float(r["akld"]) for r in rows]))
        summary = {
            "metric": "akld", "value": mean, "count": len(rows), "seed": seed,
            "params": {"samples": args.samples},
        }
        _write_metric_outputs(args.out, rows, summary)
        print(f"akld: mean {mean:.5f} over {len(rows)} image(s), {args.samples} sample(s) each")
        return 0

    # pgap
    from .data import load_manifest
    from .train import TrainConfig

    cfg = load_config(args.config)
    apply_overrides(cfg, overrides)
    tconf = TrainConfig.from_dict(dict(cfg.get("train", {})))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    real_set = load_manifest(args.real)
    synth_set = load_manifest(args.synth)
    eval_set = load_manifest(args.eval_data)
    res = metrics.pgap(real_set, synth_set, eval_set.pairs(), tconf, seed)
    summary = {
        "metric": "pgap", "value": res.value, "count": len(eval_set.records), "seed": seed,
        "params": {"psnr_real": res.psnr_real, "psnr_synth": res.psnr_synth},
    }
    rows = [{"psnr_real": repr(res.psnr_real), "psnr_synth": repr(res.psnr_synth),
             "pgap": repr(res.value)}]
    _write_metric_outputs(args.out, rows, summary)
    print(f"pgap: {res.value:+.4f} dB (real {res.psnr_real:.3f}, synth {res.psnr_synth:.3f})")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    scopes = tuple(s.strip() for s in args.scope.split(",") if s.strip())
    bad = [s for s in scopes if s not in ("ops", "networks", "losses")]
    if bad:
        raise UsageError(f"gradcheck: unknown scope(s) {', '.join(bad)}")
    seed = args.seed if args.seed is not None else 0
    report = gradcheck.run(scopes, seed=seed, tol=args.tol)
    for line in report.lines(args.tol):
        print(line)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "tol": args.tol, "seed": seed, "worst": report.worst,
            "failures": [r.name for r in report.failures(args.tol)],
            "results": [
                {"name": r.name, "worst_rel": r.worst_rel, "n_checks": r.n_checks}
                for r in report.results
            ],
        }
        (out_dir / "gradcheck.json").write_text(json.dumps(payload, indent=2) + "\n")
    return 0 if not report.failures(args.tol) else 1


def cmd_report(args) -> int:
    from .report import render_run

    run_dir = Path(args.run)
    if not (run_dir / "log.csv").exists():
        raise UsageError(f"{run_dir}: no log.csv (not a run directory?)")
    out_dir = Path(args.out) if args.out else run_dir / "figures"
    written = render_run(run_dir, out_dir)
    for p in written:
        print(p)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(argv)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        _pin_threads(threads)

    parser = build_parser()
    try:
        args, leftover = parser.parse_known_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0

    try:
        overrides = parse_overrides(leftover)
        if args.command == "train":
            return cmd_train(args, overrides)
        if overrides and args.command not in ("eval",):
            raise UsageError(f"unexpected arguments: {' '.join(leftover)}")
        if args.command == "denoise":
            return cmd_denoise(args)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "eval":
            return cmd_eval(args, overrides)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "report":
            return cmd_report(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - boundary between library and shell
        from .tensor import ContractError, NonFiniteError, ParamError, ShapeError

        from .train import ConfigError

        if isinstance(e, (ConfigError, ParamError, ShapeError, ContractError)):
            print(f"error: {e}", file=sys.stderr)
            return 2
        if isinstance(e, NonFiniteError):
            print(f"error: {e}", file=sys.stderr)
            return 1
        try:
            from .nets import CheckpointError
            from .tensor.dtn import DtnFormatError

            if isinstance(e, (CheckpointError, DtnFormatError)):
                print(f"error: {e}", file=sys.stderr)
                return 2
        except ImportError:
            pass
        raise


if __name__ == "__main__":
    sys.exit(main())
