"""Command-line entry point wiring the package into reproducible experiments.

Subcommand settings resolve as: explicit flags > config file > defaults. The
config file is UTF-8 ``key: value`` lines using flag names with underscores;
unknown keys are hard errors. Exit codes: 0 success, 1 runtime or I/O
failure, 2 bad usage or arguments, 3 non-finite numerics.
"""

import argparse
import os
import sys

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_PLACEMENTS = ("decoder", "encoder", "both")
_MODES = ("three_branch", "ref_anchored")
_REF_TIMES = ("same", "zero")


class _Opt:
    def __init__(self, typ, default, help_text):
        self.typ = typ
        self.default = default
        self.help = help_text


def _dataset_opts():
    return {
        "ids": _Opt("int", 64, "number of identities"),
        "per_id": _Opt("int", 20, "images per identity"),
        "seed": _Opt("int", 0, "generation seed"),
        "out": _Opt("str", None, "output dataset directory"),
    }


def _train_opts():
    return {
        "data": _Opt("str", None, "dataset directory"),
        "out": _Opt("str", None, "output directory for weights and logs"),
        "iters": _Opt("int", 3000, "optimization steps"),
        "batch_ids": _Opt("int", 8, "identity clusters per step"),
        "lr": _Opt("float", 1e-3, "Adam learning rate"),
        "drop_prob": _Opt("float", 0.1, "condition dropout probability"),
        "min_refs": _Opt("int", 1, "minimum references per cluster draw"),
        "max_refs": _Opt("int", 4, "maximum references per cluster draw"),
        "seed": _Opt("int", 0, "training seed"),
        "placement": _Opt("str", "decoder", "reference attention placement: "
                          + "|".join(_PLACEMENTS)),
        "base_channels": _Opt("int", 16, "channels at full resolution"),
        "levels": _Opt("int", 2, "downsampling levels"),
        "heads": _Opt("int", 1, "attention heads"),
        "inpainting": _Opt("bool", False, "add masked-image input channel"),
        "no_position_mask": _Opt("bool", False, "drop the face position mask channel"),
        "ref_timestep": _Opt("str", "same", "reference encoding time: same|zero"),
        "reconstruction": _Opt("bool", False, "use target crops as references"),
        "checkpoint_every": _Opt("int", 0, "also save weights every K iters (0 = final only)"),
        "holdout": _Opt("float", 0.0, "fraction of identities excluded from training"),
        "verbose": _Opt("bool", False, "print progress lines"),
    }


def _weight_opts():
    # defaults follow the trained operating point: feature strength 0.85,
    # text guidance 7.5, reference guidance 2.0
    return {
        "lambda_feat": _Opt("float", 0.85, "reference feature strength in [0,1]"),
        "lambda_text": _Opt("float", 7.5, "text guidance weight"),
        "lambda_ref": _Opt("float", 2.0, "reference guidance weight"),
        "mode": _Opt("str", "three_branch", "guidance mode: " + "|".join(_MODES)),
    }


def _sample_opts():
    opts = {
        "model": _Opt("str", None, "model directory (from train)"),
        "out": _Opt("str", None, "output path stem (writes .tnsr and .pgm)"),
        "data": _Opt("str", None, "dataset directory supplying references"),
        "ref_index": _Opt("ints", (), "dataset record indices used as references"),
        "ref_id": _Opt("int", None, "identity whose first --n-refs images are references"),
        "n_refs": _Opt("int", 4, "reference count used with --ref-id"),
        "prompt": _Opt("str", "", "space-separated prompt tokens"),
        "bbox": _Opt("ints", (8, 8, 24, 24), "face box r0,c0,r1,c1 for the position mask"),
        "steps": _Opt("int", 50, "DDIM steps"),
        "seed": _Opt("int", 0, "sampling seed"),
        "ref_timestep": _Opt("str", "same", "reference encoding time: same|zero"),
        "mix_ref_index": _Opt("ints", (), "second-identity record indices for mixing"),
        "mix_ref_id": _Opt("int", None, "second identity for mixing"),
        "lambda_id1": _Opt("float", 1.0, "mixing weight of the first identity in [0,1]"),
        "inpaint_index": _Opt("int", None, "dataset record supplying the masked image"),
    }
    opts.update(_weight_opts())
    return opts


def _curate_opts():
    return {
        "data": _Opt("str", None, "dataset directory"),
        "out": _Opt("str", None, "report output directory"),
        "k": _Opt("int", 3, "k-means cluster count"),
        "threshold": _Opt("float", 0.6, "cosine keep threshold"),
        "seed": _Opt("int", 0, "clustering seed"),
    }


def _eval_opts():
    opts = {
        "model": _Opt("str", None, "model directory"),
        "data": _Opt("str", None, "dataset directory"),
        "out": _Opt("str", None, "output directory"),
        "holdout": _Opt("float", 0.2, "benchmark identity fraction"),
        "n_refs": _Opt("int", 4, "references per benchmark row"),
        "steps": _Opt("int", 50, "DDIM steps"),
        "seed": _Opt("int", 0, "evaluation seed"),
        "ref_timestep": _Opt("str", "same", "reference encoding time: same|zero"),
    }
    opts.update(_weight_opts())
    return opts


def _sweep_opts():
    return {
        "model": _Opt("str", None, "model directory"),
        "data": _Opt("str", None, "dataset directory"),
        "out": _Opt("str", None, "sweep CSV path"),
        "feat_grid": _Opt("floats", (0.0, 0.25, 0.5, 0.75, 1.0), "lambda_feat grid"),
        "ref_grid": _Opt("floats", (2.0,), "lambda_ref grid"),
        "lambda_text": _Opt("float", 7.5, "text guidance weight"),
        "holdout": _Opt("float", 0.2, "benchmark identity fraction"),
        "steps": _Opt("int", 50, "DDIM steps"),
        "seed": _Opt("int", 0, "evaluation seed"),
        "ref_timestep": _Opt("str", "same", "reference encoding time: same|zero"),
    }


def _gradcheck_opts():
    return {
        "seed": _Opt("int", 1, "probe seed"),
        "eps": _Opt("float", 1e-5, "finite difference step"),
        "tol": _Opt("float", 1e-3, "max relative error allowed"),
    }


_COMMANDS = {
    "gen-data": (_dataset_opts, "write a procedural sprite dataset"),
    "train": (_train_opts, "train the denoiser and reference encoder"),
    "sample": (_sample_opts, "generate one image from a trained model"),
    "curate": (_curate_opts, "cluster and filter identity sets"),
    "eval": (_eval_opts, "run the identity benchmark"),
    "sweep": (_sweep_opts, "benchmark over a strength grid"),
    "gradcheck": (_gradcheck_opts, "compare gradients against finite differences"),
}


def _coerce(typ, value):
    if isinstance(value, str):
        value = value.strip()
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "str":
        return str(value)
    if typ == "bool":
        if isinstance(value, bool):
            return value
        low = str(value).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ == "floats":
        if isinstance(value, (tuple, list)):
            return tuple(float(v) for v in value)
        return tuple(float(v) for v in str(value).split(",") if v != "")
    if typ == "ints":
        if isinstance(value, (tuple, list)):
            return tuple(int(v) for v in value)
        return tuple(int(v) for v in str(value).split(",") if v != "")
    raise ValueError(f"unknown option type {typ!r}")


def _load_config_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key: value', got {line!r}")
            key, _, val = line.partition(":")
            out[key.strip().replace("-", "_")] = val.strip()
    return out


def _resolve(opts: dict, args: argparse.Namespace) -> dict:
    cfg = {name: opt.default for name, opt in opts.items()}
    if getattr(args, "config", None):
        for key, val in _load_config_file(args.config).items():
            if key not in opts:
                raise ValueError(f"unknown config key {key!r} "
                                 f"(valid: {', '.join(sorted(opts))})")
            cfg[key] = _coerce(opts[key].typ, val)
    for name, opt in opts.items():
        flag_val = getattr(args, name)
        if flag_val is not None:
            cfg[name] = _coerce(opt.typ, flag_val)
    return cfg


def _require(cfg: dict, *names):
    for name in names:
        if cfg.get(name) in (None, ""):
            raise ValueError(f"--{name.replace('_', '-')} is required")


def _choice(cfg: dict, name: str, allowed):
    if cfg[name] not in allowed:
        raise ValueError(f"--{name.replace('_', '-')} must be one of "
                         f"{', '.join(allowed)}, got {cfg[name]!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idsprite",
        description="identity-conditioned sprite diffusion laboratory")
    parser.add_argument("--threads", type=int, default=1,
                        help="cap for math library threads (default: 1, reproducible)")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, (opts_fn, blurb) in _COMMANDS.items():
        sub = subs.add_parser(name, help=blurb)
        sub.add_argument("--config", default=None,
                         help="key: value settings file; flags override it")
        for opt_name, opt in opts_fn().items():
            flag = "--" + opt_name.replace("_", "-")
            if opt.typ == "bool":
                sub.add_argument(flag, action="store_true", default=None,
                                 help=f"{opt.help} (default: {opt.default})")
            else:
                sub.add_argument(flag, default=None, metavar=opt.typ.upper(),
                                 help=f"{opt.help} (default: {opt.default})")
    return parser


# -- commands -------------------------------------------------------------------


def cmd_gen_data(cfg) -> int:
    from .sprites import make_dataset
    _require(cfg, "out")
    manifest = make_dataset(cfg["ids"], cfg["per_id"], cfg["seed"], cfg["out"])
    print(manifest)
    return EXIT_OK


def _denoiser_config(cfg):
    from .attention import RefAttnConfig
    from .unet import DenoiserConfig
    return DenoiserConfig(
        base_channels=cfg["base_channels"],
        levels=cfg["levels"],
        heads=cfg["heads"],
        inpainting=cfg["inpainting"],
        use_position_mask=not cfg["no_position_mask"],
        refattn=RefAttnConfig(placement=cfg["placement"]),
    )


def cmd_train(cfg) -> int:
    from .metrics import train_split
    from .sprites import load_dataset
    from .training import TrainConfig, train
    _require(cfg, "data", "out")
    _choice(cfg, "placement", _PLACEMENTS)
    _choice(cfg, "ref_timestep", _REF_TIMES)
    dataset = load_dataset(cfg["data"])
    if cfg["holdout"] > 0.0:
        dataset = train_split(dataset, cfg["holdout"])
    tcfg = TrainConfig(
        batch_ids=cfg["batch_ids"], min_refs=cfg["min_refs"], max_refs=cfg["max_refs"],
        drop_prob=cfg["drop_prob"], lr=cfg["lr"], iters=cfg["iters"], seed=cfg["seed"],
        ref_timestep=cfg["ref_timestep"], reconstruction=cfg["reconstruction"],
        checkpoint_every=cfg["checkpoint_every"])
    os.makedirs(cfg["out"], exist_ok=True)
    log_path = os.path.join(cfg["out"], "train_log.csv")
    train(dataset, _denoiser_config(cfg), tcfg, log_path=log_path,
          ckpt_dir=cfg["out"], quiet=not cfg["verbose"])
    print(cfg["out"])
    return EXIT_OK


def write_pgm(path: str, img) -> None:
    """8-bit binary PGM preview of a [0,1] grayscale image."""
    import numpy as np
    from .tensor import Tensor
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    arr = arr.reshape(arr.shape[-2], arr.shape[-1])
    byte = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{byte.shape[1]} {byte.shape[0]}\n255\n".encode("ascii"))
        fh.write(byte.tobytes())


def _gather_refs(dataset, cfg, index_key, id_key):
    import numpy as np
    from .sprites import crop_face
    from .tensor import Tensor
    indices = list(cfg[index_key])
    if not indices and cfg[id_key] is not None:
        members = dataset.by_id.get(cfg[id_key])
        if not members:
            raise ValueError(f"identity {cfg[id_key]} not in dataset")
        indices = members[:cfg["n_refs"]]
    if not indices:
        return None
    crops = [crop_face(dataset.records[i].pixels, dataset.records[i].bbox)[None]
             for i in indices]
    return Tensor(np.stack(crops))


def _make_cache(refnet, crops, ref_timestep):
    import numpy as np
    from .refnet import encode_references
    if crops is None:
        return None
    if ref_timestep == "same":
        return lambda t: encode_references(refnet, crops, np.full(crops.shape[0], t))
    return encode_references(refnet, crops, 0)


def cmd_sample(cfg) -> int:
    import numpy as np
    from .diffusion import GuidanceWeights, NoiseSchedule, ddim_sample
    from .sprites import load_dataset
    from .tensor import Tensor, save_tnsr
    from .training import load_models
    from .unet import make_position_mask
    _require(cfg, "model", "out")
    _choice(cfg, "mode", _MODES)
    _choice(cfg, "ref_timestep", _REF_TIMES)
    denoiser, refnet = load_models(cfg["model"])
    dataset = load_dataset(cfg["data"]) if cfg["data"] else None

    needs_data = cfg["ref_index"] or cfg["ref_id"] is not None \
        or cfg["mix_ref_index"] or cfg["mix_ref_id"] is not None \
        or cfg["inpaint_index"] is not None
    if needs_data and dataset is None:
        raise ValueError("--data is required to reference dataset images")
    crops = _gather_refs(dataset, cfg, "ref_index", "ref_id") if dataset else None
    mix_crops = _gather_refs(dataset, cfg, "mix_ref_index", "mix_ref_id") if dataset else None
    if mix_crops is not None and crops is None:
        raise ValueError("identity mixing needs primary references too")
    cache = _make_cache(refnet, crops, cfg["ref_timestep"])
    cache2 = _make_cache(refnet, mix_crops, cfg["ref_timestep"])

    tokens = tuple(cfg["prompt"].split()) if cfg["prompt"] else None
    size = denoiser.config.img_size
    if len(cfg["bbox"]) != 4:
        raise ValueError(f"--bbox needs r0,c0,r1,c1, got {cfg['bbox']}")
    mask = None
    if denoiser.config.use_position_mask or denoiser.config.inpainting:
        mask = make_position_mask([tuple(cfg["bbox"])], size)
    masked_latent = None
    if denoiser.config.inpainting:
        if cfg["inpaint_index"] is None:
            raise ValueError("--inpaint-index is required for an inpainting model")
        rec = dataset.records[cfg["inpaint_index"]]
        masked_latent = Tensor(rec.pixels[None] * (1.0 - mask.data))

    w = GuidanceWeights(lambda_feat=cfg["lambda_feat"], lambda_text=cfg["lambda_text"],
                        lambda_ref=cfg["lambda_ref"], mode=cfg["mode"])
    img = ddim_sample(denoiser, NoiseSchedule(), (1, 1, size, size), tokens, cache, w,
                      seed=cfg["seed"], steps=cfg["steps"], position_mask=mask,
                      masked_latent=masked_latent, cache2=cache2,
                      lambda_id1=cfg["lambda_id1"])
    stem = cfg["out"]
    if stem.endswith(".tnsr"):
        stem = stem[:-5]
    parent = os.path.dirname(os.path.abspath(stem))
    os.makedirs(parent, exist_ok=True)
    save_tnsr(stem + ".tnsr", img.data[0])
    write_pgm(stem + ".pgm", img.data[0])
    print(stem + ".tnsr")
    return EXIT_OK


def cmd_curate(cfg) -> int:
    from .curation import CurationConfig, curate_dataset, write_report
    from .sprites import load_dataset
    _require(cfg, "data", "out")
    dataset = load_dataset(cfg["data"])
    clusters = curate_dataset(dataset, CurationConfig(k=cfg["k"], threshold=cfg["threshold"]),
                              seed=cfg["seed"])
    report, stats = write_report(clusters, cfg["out"])
    print(report)
    print(stats)
    return EXIT_OK


def cmd_eval(cfg) -> int:
    from .diffusion import GuidanceWeights
    from .metrics import build_benchmark, run_benchmark
    from .sprites import load_dataset
    from .training import load_models
    _require(cfg, "model", "data", "out")
    _choice(cfg, "mode", _MODES)
    _choice(cfg, "ref_timestep", _REF_TIMES)
    denoiser, refnet = load_models(cfg["model"])
    benchmark = build_benchmark(load_dataset(cfg["data"]), cfg["holdout"])
    w = GuidanceWeights(lambda_feat=cfg["lambda_feat"], lambda_text=cfg["lambda_text"],
                        lambda_ref=cfg["lambda_ref"], mode=cfg["mode"])
    os.makedirs(cfg["out"], exist_ok=True)
    rows_csv = os.path.join(cfg["out"], "eval_rows.csv")
    report = run_benchmark(denoiser, refnet, benchmark, w, n_refs=cfg["n_refs"],
                           steps=cfg["steps"], seed=cfg["seed"],
                           ref_timestep=cfg["ref_timestep"], csv_path=rows_csv)
    summary = os.path.join(cfg["out"], "eval_report.txt")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write(f"sim_ref: {report.sim_ref:.6f}\n")
        fh.write(f"sim_target: {report.sim_target:.6f}\n")
        fh.write(f"paste: {report.paste:.6f}\n")
        fh.write(f"adherence: {report.adherence:.6f}\n")
        fh.write(f"fid: {report.fid:.6f}\n")
        fh.write(f"n_refs: {report.n_refs}\n")
        fh.write(f"placement: {report.placement}\n")
        fh.write(f"lambda_feat: {w.lambda_feat}\n")
        fh.write(f"lambda_text: {w.lambda_text}\n")
        fh.write(f"lambda_ref: {w.lambda_ref}\n")
        fh.write(f"mode: {w.mode}\n")
    print(summary)
    return EXIT_OK


def cmd_sweep(cfg) -> int:
    from .metrics import build_benchmark, strength_sweep
    from .sprites import load_dataset
    from .training import load_models
    _require(cfg, "model", "data", "out")
    _choice(cfg, "ref_timestep", _REF_TIMES)
    denoiser, refnet = load_models(cfg["model"])
    benchmark = build_benchmark(load_dataset(cfg["data"]), cfg["holdout"])
    strength_sweep(denoiser, refnet, benchmark, cfg["feat_grid"], cfg["ref_grid"],
                   lambda_text=cfg["lambda_text"], steps=cfg["steps"], seed=cfg["seed"],
                   ref_timestep=cfg["ref_timestep"], csv_path=cfg["out"])
    print(cfg["out"])
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    import numpy as np
    from .attention import RefAttnConfig
    from .gradcheck import grad_check
    from .refnet import build_reference_net, encode_references
    from .rng import Rng
    from .tensor import Tensor
    from .unet import DenoiserConfig, build_denoiser, build_input, cast_net, predict_noise
    seed = cfg["seed"]
    dcfg = DenoiserConfig(base_channels=8, refattn=RefAttnConfig())
    den = cast_net(build_denoiser(dcfg, seed=seed), np.float64)
    refn = cast_net(build_reference_net(dcfg, seed=seed), np.float64)
    # the zero-initialized output head blocks upstream gradients; perturb it
    head = den.params()["out.c.w"]
    head.data += Rng(seed).child("head").normal(head.shape, dtype=np.float64) * 0.3
    crops = Tensor(Rng(seed).child("crops").normal((1, 1, 16, 16), dtype=np.float64))
    x = build_input(Tensor(Rng(seed).child("x").normal((1, 1, 32, 32), dtype=np.float64)),
                    None, None, dcfg)
    target = Tensor(Rng(seed).child("target").normal((1, 1, 32, 32), dtype=np.float64))
    probe = [refn.params()["mid1.c1.w"], refn.params()["enc1.attn.self.w_v"],
             den.params()["mid.attn.ref.w_k"], den.params()["dec1.attn.ref.w_out"],
             den.params()["text.table"], den.params()["out.c.w"]]

    def f(_):
        cache = encode_references(refn, crops, 30)
        pred = predict_noise(den, x, 30, ("a", "face", "with", "hat"), cache, 0.85)
        return ((pred - target) ** 2).mean()

    err = grad_check(f, probe, eps=cfg["eps"], max_entries_per_param=3, rng=Rng(seed + 1))
    print(f"max relative error: {err:.3e}")
    return EXIT_OK if err < cfg["tol"] else EXIT_RUNTIME


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "curate": cmd_curate,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    opts = _COMMANDS[args.command][0]()
    try:
        cfg = _resolve(opts, args)
        return _DISPATCH[args.command](cfg)
    except ArithmeticError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
