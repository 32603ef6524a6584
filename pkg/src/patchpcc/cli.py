"""Command-line entry points: train, encode, decode, eval, sweep, upsample.

Exit codes: 0 ok, 2 usage, 3 data / digest error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

import torch

from patchpcc import codec, geometry, metrics
from patchpcc.network import CheckpointError, ModelConfig, load_checkpoint
from patchpcc.training import DatasetSpec, NonFiniteLoss, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SWEEP_HEADER = ["d", "S", "K", "bpp", "d2_psnr", "chamfer"]

log = logging.getLogger("patchpcc")


class UsageError(Exception):
    pass


def _csv_list(text: str, conv=str) -> list:
    return [conv(t.strip()) for t in text.split(",") if t.strip()]


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _loss_csv_path(out: str) -> str:
    return os.path.splitext(out)[0] + "_loss.csv"


def _add_train_options(p):
    p.add_argument("--dataset", help="directory of .off meshes (overrides --shapes)")
    p.add_argument("--shapes", default="sphere", help="comma-separated synthetic shape kinds")
    p.add_argument("--points", type=int, default=1024, help="points per training cloud")
    p.add_argument("--S", type=int, help="patch count; checked against alpha*N/K")
    p.add_argument("--K", type=int, default=128)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchpcc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="optional 'key = value' file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the compression autoencoder")
    _add_train_options(p)
    p.add_argument("--out", help="checkpoint path (.ppcc)")
    p.add_argument("--log", help="loss CSV path (default: <out>_loss.csv)")

    p = sub.add_parser("encode", help="compress a PLY cloud")
    p.add_argument("--model")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--K", type=int)
    p.add_argument("--precision", type=int, default=16, help="centroid bits per axis")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("decode", help="decompress a .ppc stream to PLY")
    p.add_argument("--model")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")

    p = sub.add_parser("eval", help="quality metrics as one CSV row")
    p.add_argument("--ref")
    p.add_argument("--deg")
    p.add_argument("--bitstream", help="optional .ppc to report bpp")
    p.add_argument("--peak", type=float, default=geometry.BOX_SIZE)
    p.add_argument("--normalize", action="store_true",
                   help="map both clouds with the reference's [0, 64] normalization first")

    p = sub.add_parser("sweep", help="rate-distortion sweep over d and (S, K)")
    _add_train_options(p)
    p.add_argument("--d-values", default="4,8,16")
    p.add_argument("--sk", default="16x128", help="comma-separated SxK pairs, e.g. 16x128,32x64")
    p.add_argument("--models-dir", help="cache trained models here and reuse them")
    p.add_argument("--out", help="RD CSV path")

    p = sub.add_parser("train-upsampler", help="train the patch upsampler")
    p.add_argument("--shapes", default="sphere")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--K", type=int, default=128)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("upsample", help="upsample a PLY cloud")
    p.add_argument("--model")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out")
    p.add_argument("--M", type=int, help="expected multiple; must match the checkpoint")
    p.add_argument("--ascii", action="store_true")
    return parser


REQUIRED = {
    "train": ["out"],
    "encode": ["model", "inp", "out"],
    "decode": ["model", "inp", "out"],
    "eval": ["ref", "deg"],
    "sweep": ["out"],
    "train-upsampler": ["out"],
    "upsample": ["model", "inp", "out"],
}


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest != "help"}
    values = read_config_file(args.config)
    defaults = {}
    for key, raw in values.items():
        key = {"in": "inp", "lambda": "lam"}.get(key, key)
        if key not in actions:
            raise UsageError(f"unknown config key {key!r} for command {args.command!r}")
        act = actions[key]
        if act.const is True and act.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = act.type(raw) if act.type else raw
            except ValueError:
                raise UsageError(f"bad value for config key {key!r}: {raw!r}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _print_config(args) -> None:
    items = {k: v for k, v in sorted(vars(args).items())}
    print("# config " + " ".join(f"{k}={v}" for k, v in items.items()), file=sys.stderr)


def _train_config(args, d=None, K=None, S=None, out=None, log_csv=None) -> TrainConfig:
    d = args.d if d is None else d
    K = args.K if K is None else K
    S = args.S if S is None else S
    n = args.points
    alpha = args.alpha if S is None else S * K / n
    k = K / alpha
    if k != int(k) or k < 1:
        raise UsageError(f"K/alpha = {k} is not a positive integer")
    ds = DatasetSpec(shapes=_csv_list(args.shapes), points=n, mesh_dir=args.dataset)
    for kind in ds.shapes:
        if not args.dataset and kind not in geometry.SHAPE_KINDS:
            raise UsageError(f"unknown shape {kind!r}")
    cfg = TrainConfig(model=ModelConfig(K=K, k=int(k), d=d), dataset=ds, alpha=alpha, lam=args.lam,
                      lr=args.lr, batch=args.batch, max_steps=args.steps, seed=args.seed,
                      out=out, log_csv=log_csv)
    cfg.patch_config(n)
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args, out=args.out, log_csv=args.log or _loss_csv_path(args.out))
    train(cfg, progress=lambda r: log.info("step %d loss %.5f", r.step, r.loss))
    print(f"wrote {cfg.out} and {cfg.log_csv}", file=sys.stderr)
    return EXIT_OK


def _load_model(path, kind="autoencoder"):
    model, cfg = load_checkpoint(path)
    want = "upsampler" if kind == "upsampler" else "autoencoder"
    have = "upsampler" if model.kind == 1 else "autoencoder"
    if want != have:
        raise CheckpointError(f"{path} holds a {have} checkpoint, expected {want}")
    return model, cfg


def format_breakdown(bs: codec.Bitstream) -> str:
    b = codec.bpp_breakdown(bs)
    return f"bpp total={b.total:.6f} centroids={b.centroids:.6f} latents={b.latents:.6f} header={b.header:.6f}"


def cmd_encode(args) -> int:
    model, _ = _load_model(args.model)
    cloud = geometry.load_ply(args.inp)
    settings = codec.CodecSettings(alpha=args.alpha, K=args.K, precision=args.precision,
                                   threads=args.threads)
    bs = codec.encode(cloud, model, settings)
    codec.save_bitstream(bs, args.out)
    print(format_breakdown(bs))
    return EXIT_OK


def cmd_decode(args) -> int:
    model, _ = _load_model(args.model)
    bs = codec.load_bitstream(args.inp)
    cloud = codec.decode(bs, model, threads=args.threads)
    geometry.save_ply(cloud, args.out, "ascii" if args.ascii else "binary")
    print(format_breakdown(bs))
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = geometry.load_ply(args.ref)
    deg = geometry.load_ply(args.deg)
    if args.normalize:
        ref, scale = geometry.normalize_to_box(ref)
        deg = geometry.apply_scale(deg, scale)
    rate = float("nan")
    if args.bitstream:
        rate = codec.bpp(codec.load_bitstream(args.bitstream), ref.shape[0])
    report = metrics.evaluate(ref, deg, bpp=rate, name=os.path.basename(args.deg), peak=args.peak)
    print(report.csv_row())
    return EXIT_OK


def _parse_sk(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in _csv_list(text):
        try:
            s, k = item.lower().split("x")
            pairs.append((int(s), int(k)))
        except ValueError:
            raise UsageError(f"bad S x K pair {item!r}") from None
    return pairs


def sweep_point(args, d: int, S: int, K: int) -> list:
    ckpt = None
    if args.models_dir:
        os.makedirs(args.models_dir, exist_ok=True)
        ckpt = os.path.join(args.models_dir, f"d{d}_S{S}_K{K}_seed{args.seed}.ppcc")
    if ckpt and os.path.exists(ckpt):
        model, _ = _load_model(ckpt)
    else:
        cfg = _train_config(args, d=d, K=K, S=S, out=ckpt)
        model = train(cfg).model
    cfg = _train_config(args, d=d, K=K, S=S)
    rates, psnrs, cds = [], [], []
    for cloud in cfg.dataset.raw_clouds():
        bs = codec.encode(cloud, model, codec.CodecSettings(alpha=cfg.alpha))
        rec = codec.decode(bs, model)
        ref_n, scale = geometry.normalize_to_box(cloud)
        rec_n = geometry.apply_scale(rec, scale)
        rates.append(codec.bpp(bs))
        psnrs.append(metrics.p2plane_psnr(ref_n, rec_n))
        cds.append(metrics.chamfer_np(ref_n, rec_n))
    mean = lambda v: sum(v) / len(v)  # noqa: E731
    return [d, S, K, mean(rates), mean(psnrs), mean(cds)]


def cmd_sweep(args) -> int:
    ds = _csv_list(args.d_values, int)
    sks = _parse_sk(args.sk)
    if not ds or not sks:
        raise UsageError("sweep grid is empty")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for S, K in sks:
            for d in ds:
                try:
                    row = sweep_point(args, d, S, K)
                except Exception as exc:  # recorded, sweep continues
                    log.error("sweep point d=%d S=%d K=%d failed: %s", d, S, K, exc)
                    row = [d, S, K, math.nan, math.nan, math.nan]
                w.writerow([row[0], row[1], row[2]] + [repr(float(v)) for v in row[3:]])
                fh.flush()
                print(",".join(str(v) for v in row), file=sys.stderr)
    return EXIT_OK


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"d": int(r["d"]), "S": int(r["S"]), "K": int(r["K"]), "bpp": float(r["bpp"]),
             "d2_psnr": float(r["d2_psnr"]), "chamfer": float(r["chamfer"])}
            for r in csv.DictReader(fh)
        ]


def cmd_train_upsampler(args) -> int:
    from patchpcc.upsampler import UpsampleConfig, UpsampleTrainConfig, train_upsampler

    cfg = UpsampleConfig(M=args.M, alpha=args.alpha, K=args.K, d=args.d)
    cfg.patch_count(args.points)
    tc = UpsampleTrainConfig(model=cfg, shapes=_csv_list(args.shapes), points=args.points,
                             lr=args.lr, batch=args.batch, max_steps=args.steps, seed=args.seed,
                             out=args.out, log_csv=_loss_csv_path(args.out))
    train_upsampler(tc)
    print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_upsample(args) -> int:
    from patchpcc.upsampler import upsample

    model, cfg = _load_model(args.model, "upsampler")
    if args.M is not None and args.M != cfg.M:
        raise UsageError(f"--M {args.M} does not match the checkpoint's M={cfg.M}")
    cloud = geometry.load_ply(args.inp)
    out = upsample(cloud, model)
    geometry.save_ply(out, args.out, "ascii" if args.ascii else "binary")
    print(f"upsampled {cloud.shape[0]} -> {out.shape[0]} points", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "train-upsampler": cmd_train_upsampler,
    "upsample": cmd_upsample,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, "")]
        if missing:
            flags = ", ".join("--" + ("in" if m == "inp" else m) for m in missing)
            raise UsageError(f"{args.command}: missing required option(s) {flags}")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    _print_config(args)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except codec.DigestMismatch as exc:
        print(f"digest mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
