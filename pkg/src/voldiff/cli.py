"""Command-line pipeline: gen-data, pretrain, finetune, train-baseline,
denoise, evaluate.

Every command writes its fully resolved configuration and git-style
content digests of all file inputs into the run directory, so any
result can be traced back to exactly what produced it. Outputs are
written atomically (temp file + rename). Environment variables are
never consulted; flags and config files fully describe a run.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 contract
violation (e.g. the freeze audit), 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import diffusion
from .checkpoint import blob_digest, parameter_digest
from .config import RunConfig, load_config, write_resolved_config
from .controlnet import freeze_check, init_adapter
from .datasets import generate_dataset, load_dataset
from .errors import (
    ConfigError,
    ContractViolationError,
    DataError,
    NumericError,
    ParameterError,
    ShapeError,
    VoldiffError,
)
from .inference import InferenceConfig, denoise_volume, regress_volume
from .metrics import evaluate_suite
from .montage import render_montage
from .persist import (
    ROLE_CONDITIONAL,
    ROLE_DIFFUSION,
    ROLE_REGRESSOR,
    load_adapter,
    load_model,
    save_adapter,
    save_model,
)
from .training import (
    finetune_adapter,
    optimizer_tensors,
    pretrain_diffusion,
    restore_optimizer,
    train_conditional_diffusion,
    train_supervised_regressor,
)
from .unet import build_unet
from .volume import UNITS_NORMALIZED, denormalize, load_volume, normalize, save_volume

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONTRACT = 4
EXIT_NUMERIC = 5


def _exit_code(exc: VoldiffError) -> int:
    if isinstance(exc, (ConfigError, ParameterError)):
        return EXIT_CONFIG
    if isinstance(exc, ContractViolationError):
        return EXIT_CONTRACT
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, ShapeError)):
        return EXIT_DATA
    return EXIT_DATA


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", type=Path, required=True, help="run directory for outputs and provenance")
    parser.add_argument("--force", action="store_true", help="allow writing into non-empty directories")
    parser.add_argument("--workers", type=int, default=1, help="worker threads for patch inference")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _echo_provenance(args, cfg: RunConfig, inputs: list) -> None:
    run_dir = Path(args.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, run_dir)
    digests = {}
    if args.config:
        digests[str(args.config)] = blob_digest(args.config)
    for path in inputs:
        digests[str(path)] = blob_digest(path)
    payload = json.dumps({"inputs": digests}, indent=2, sort_keys=True) + "\n"
    (run_dir / "inputs.json").write_text(payload, encoding="utf-8")


def _log_step(tag: str):
    def log(step: int, loss: float) -> None:
        print(f"[{tag}] step {step}: loss {loss:.6f}")

    return log


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    ds = generate_dataset(cfg.data, cfg.seed, args.out_dir, force=args.force)
    _echo_provenance(args, cfg, [])
    n_pre = len(ds.manifest["splits"]["pretrain"])
    n_ft = len(ds.manifest["splits"]["finetune"])
    n_val = len(ds.manifest["splits"]["val"])
    n_test = len(ds.manifest["splits"]["test"])
    print(
        f"dataset written to {args.out_dir}: {n_pre} pretrain, {n_ft} finetune pairs, "
        f"{n_val} val pairs, {n_test} test pairs (vmax={ds.vmax:.4f})"
    )
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data_dir)
    volumes = [v.data for v in ds.pretrain_volumes()]
    sched = diffusion.make_linear_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end
    )
    start_step = 0
    optimizer = None
    if args.resume:
        net, _, extra, raw = load_model(args.resume, expected_role=ROLE_DIFFUSION)
        if net.config.to_dict() != cfg.network.to_dict():
            raise ConfigError("resume checkpoint architecture differs from the config")
        start_step = int(extra.get("step", 0))
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.training.lr)
        restore_optimizer(optimizer, list(net.named_parameters()), raw)
        print(f"resumed from {args.resume} at step {start_step}")
    else:
        net = build_unet(cfg.network, cfg.seed)
    remaining = cfg.training.steps - start_step
    if remaining < 0:
        raise ConfigError(
            f"checkpoint already at step {start_step} > configured steps {cfg.training.steps}"
        )
    optimizer, losses = pretrain_diffusion(
        net,
        volumes,
        sched,
        steps=remaining,
        batch_size=cfg.training.batch_size,
        lr=cfg.training.lr,
        seed=cfg.seed,
        optimizer=optimizer,
        start_step=start_step,
        log=_log_step("pretrain"),
        log_every=cfg.training.log_every,
    )
    save_model(
        args.out_ckpt,
        net,
        ROLE_DIFFUSION,
        cfg.schedule,
        extra={"step": cfg.training.steps, "seed": cfg.seed},
        opt_tensors=optimizer_tensors(optimizer, list(net.named_parameters())),
    )
    inputs = ds.all_files() + ([Path(args.resume)] if args.resume else [])
    _echo_provenance(args, cfg, inputs)
    if losses:
        print(f"pretraining done: first loss {losses[0]:.5f}, last loss {losses[-1]:.5f}")
    print(f"checkpoint written to {args.out_ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data_dir)
    pairs = ds.pairs("finetune")
    base, sched_cfg, _, _ = load_model(args.base_ckpt, expected_role=ROLE_DIFFUSION)
    sched = diffusion.make_linear_schedule(
        sched_cfg.T, sched_cfg.beta_start, sched_cfg.beta_end
    )
    adapter = init_adapter(base)
    snapshot = adapter.base_digest
    optimizer, losses = finetune_adapter(
        base,
        adapter,
        [p.x0.data for p in pairs],
        [p.y.data for p in pairs],
        sched,
        steps=cfg.finetune.steps,
        batch_size=cfg.finetune.batch_size,
        lr=cfg.finetune.lr,
        seed=cfg.seed,
        log=_log_step("finetune"),
        log_every=cfg.finetune.log_every,
    )
    if not freeze_check(base, snapshot):
        raise ContractViolationError("freeze audit failed: base parameters changed during fine-tuning")
    print("freeze audit passed: base parameters bit-identical")
    save_adapter(
        args.out_ckpt,
        adapter,
        sched_cfg,
        extra={"step": cfg.finetune.steps, "seed": cfg.seed},
        opt_tensors=optimizer_tensors(optimizer, list(adapter.named_parameters())),
    )
    _echo_provenance(args, cfg, ds.all_files() + [Path(args.base_ckpt)])
    if losses:
        print(f"fine-tuning done: first loss {losses[0]:.5f}, last loss {losses[-1]:.5f}")
    print(f"adapter checkpoint written to {args.out_ckpt}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.data_dir)
    pairs = ds.pairs("finetune")
    x0 = [p.x0.data for p in pairs]
    y = [p.y.data for p in pairs]
    if args.kind == "con_ddpm":
        net_cfg = cfg.network
        net_cfg.in_channels = 2
        net = build_unet(net_cfg, cfg.seed)
        sched = diffusion.make_linear_schedule(
            cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end
        )
        losses = train_conditional_diffusion(
            net,
            x0,
            y,
            sched,
            steps=cfg.baseline.steps,
            batch_size=cfg.baseline.batch_size,
            lr=cfg.baseline.lr,
            seed=cfg.seed,
            log=_log_step("con_ddpm"),
            log_every=cfg.baseline.log_every,
        )
        role = ROLE_CONDITIONAL
    else:
        net = build_unet(cfg.network, cfg.seed)
        losses = train_supervised_regressor(
            net,
            x0,
            y,
            steps=cfg.baseline.steps,
            batch_size=cfg.baseline.batch_size,
            lr=cfg.baseline.lr,
            seed=cfg.seed,
            log=_log_step("unet"),
            log_every=cfg.baseline.log_every,
        )
        role = ROLE_REGRESSOR
    save_model(
        args.out_ckpt, net, role, cfg.schedule, extra={"step": cfg.baseline.steps, "seed": cfg.seed}
    )
    _echo_provenance(args, cfg, ds.all_files())
    if losses:
        print(f"baseline {args.kind} done: first loss {losses[0]:.5f}, last loss {losses[-1]:.5f}")
    print(f"checkpoint written to {args.out_ckpt}")
    return EXIT_OK


def _build_method(tag: str, ckpts: dict, workers: int, cfg: RunConfig):
    """Returns (denoise callable on normalized Volumes, list of input files).

    ckpts maps flag names ('base', 'adapter', 'con_ddpm', 'unet') to paths.
    """
    inf = cfg.inference
    common = dict(
        patch_edge=inf.patch_edge,
        stride=inf.stride,
        sample_stride=inf.sample_stride,
        seed=cfg.seed,
        workers=workers,
    )
    if tag == "controlnet":
        if not ckpts.get("base") or not ckpts.get("adapter"):
            raise ConfigError("method 'controlnet' needs --base-ckpt and --adapter-ckpt")
        base, sched_cfg, _, _ = load_model(ckpts["base"], expected_role=ROLE_DIFFUSION)
        base.freeze()
        adapter, _, _, _ = load_adapter(ckpts["adapter"], base)
        sched = diffusion.make_linear_schedule(sched_cfg.T, sched_cfg.beta_start, sched_cfg.beta_end)
        icfg = InferenceConfig(method="controlnet", **common)
        return (
            lambda v: denoise_volume(base, adapter, v, sched, icfg),
            [Path(ckpts["base"]), Path(ckpts["adapter"])],
        )
    if tag == "ddpm_dc":
        if not ckpts.get("base"):
            raise ConfigError("method 'ddpm_dc' needs --base-ckpt")
        base, sched_cfg, _, _ = load_model(ckpts["base"], expected_role=ROLE_DIFFUSION)
        sched = diffusion.make_linear_schedule(sched_cfg.T, sched_cfg.beta_start, sched_cfg.beta_end)
        icfg = InferenceConfig(method="ddpm_dc", dc_strength=inf.dc_strength, **common)
        return (
            lambda v: denoise_volume(base, None, v, sched, icfg),
            [Path(ckpts["base"])],
        )
    if tag == "con_ddpm":
        if not ckpts.get("con_ddpm"):
            raise ConfigError("method 'con_ddpm' needs --conddpm-ckpt (or --model-ckpt)")
        net, sched_cfg, _, _ = load_model(ckpts["con_ddpm"], expected_role=ROLE_CONDITIONAL)
        sched = diffusion.make_linear_schedule(sched_cfg.T, sched_cfg.beta_start, sched_cfg.beta_end)
        icfg = InferenceConfig(method="con_ddpm", **common)
        return (
            lambda v: denoise_volume(net, None, v, sched, icfg),
            [Path(ckpts["con_ddpm"])],
        )
    if tag == "unet":
        if not ckpts.get("unet"):
            raise ConfigError("method 'unet' needs --unet-ckpt (or --model-ckpt)")
        net, _, _, _ = load_model(ckpts["unet"], expected_role=ROLE_REGRESSOR)
        icfg = InferenceConfig(method="unet", **common)
        return (lambda v: regress_volume(net, v, icfg), [Path(ckpts["unet"])])
    raise ConfigError(f"unknown method {tag!r}")


def _ckpt_map(args) -> dict:
    model = getattr(args, "model_ckpt", None)
    return {
        "base": getattr(args, "base_ckpt", None),
        "adapter": getattr(args, "adapter_ckpt", None),
        "con_ddpm": getattr(args, "conddpm_ckpt", None) or model,
        "unet": getattr(args, "unet_ckpt", None) or model,
    }


def cmd_denoise(args) -> int:
    cfg = _resolve_config(args)
    method, ckpt_files = _build_method(args.method, _ckpt_map(args), args.workers, cfg)
    vol = load_volume(args.input)
    was_normalized = vol.units == UNITS_NORMALIZED
    if not was_normalized:
        if args.vmax is None:
            raise ConfigError("raw input volume needs --vmax to normalize")
        vol = normalize(vol, args.vmax)
    out = method(vol)
    if not was_normalized:
        out = denormalize(out)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_volume(out, args.output)
    _echo_provenance(args, cfg, ckpt_files + [Path(args.input)])
    print(f"denoised volume written to {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    ds = load_dataset(args.test_dir)
    pairs = ds.pairs("test")
    input_files = ds.all_files()
    ckpts = _ckpt_map(args)

    # run each method once per subject; the suite and the montages share outputs
    outputs: dict[str, list] = {"lowdose": [p.y for p in pairs]}
    for tag in args.methods:
        if tag == "lowdose":
            continue
        fn, files = _build_method(tag, ckpts, args.workers, cfg)
        input_files += files
        results = []
        for pair in pairs:
            try:
                results.append(fn(pair.y))
            except VoldiffError as exc:  # row-level isolation; the suite records it
                results.append(exc)
        outputs[tag] = results

    def cached(tag):
        lookup = {id(p.y): out for p, out in zip(pairs, outputs[tag])}

        def fn(v):
            out = lookup[id(v)]
            if isinstance(out, Exception):
                raise out
            return out

        return fn

    method_tags = ["lowdose"] + [t for t in args.methods if t != "lowdose"]
    report = evaluate_suite(
        [(tag, cached(tag)) for tag in method_tags],
        pairs,
        ssim_kwargs={
            "window_edge": cfg.evaluation.ssim_window_edge,
            "window_sigma": cfg.evaluation.ssim_window_sigma,
            "k1": cfg.evaluation.ssim_k1,
            "k2": cfg.evaluation.ssim_k2,
        },
    )

    run_dir = Path(args.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_atomic(run_dir / "report.csv", report.to_csv())
    _write_atomic(run_dir / "summary.txt", report.summary_text())
    montage_dir = run_dir / "montages"
    montage_dir.mkdir(exist_ok=True)
    for i, pair in enumerate(pairs):
        columns = [("lowdose", pair.y)]
        for tag in method_tags[1:]:
            out = outputs[tag][i]
            if not isinstance(out, Exception):
                columns.append((tag, out))
        columns.append(("ground_truth", pair.x0))
        render_montage(montage_dir / f"subject_{i:03d}.pgm", columns)
    _echo_provenance(args, cfg, input_files)
    print(report.summary_text(), end="")
    print(f"report written to {run_dir}")
    return EXIT_OK


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voldiff",
        description="Volumetric diffusion denoising: pre-train, fine-tune, denoise, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    _common_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train the unconditional diffusion model")
    _common_flags(p)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a control adapter on paired data")
    _common_flags(p)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--base-ckpt", type=Path, required=True)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("train-baseline", help="train a reference method from scratch")
    _common_flags(p)
    p.add_argument("--kind", choices=["con_ddpm", "unet"], required=True)
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.set_defaults(fn=cmd_train_baseline)

    p = sub.add_parser("denoise", help="denoise one volume file")
    _common_flags(p)
    p.add_argument("--method", choices=["controlnet", "con_ddpm", "unet", "ddpm_dc"], required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--base-ckpt", type=Path)
    p.add_argument("--adapter-ckpt", type=Path)
    p.add_argument("--model-ckpt", type=Path)
    p.add_argument("--vmax", type=float, help="normalization constant for raw inputs")
    p.set_defaults(fn=cmd_denoise)

    p = sub.add_parser("evaluate", help="run methods over the test split and report metrics")
    _common_flags(p)
    p.add_argument("--test-dir", type=Path, required=True)
    p.add_argument(
        "--methods",
        nargs="+",
        default=["controlnet"],
        choices=["lowdose", "controlnet", "con_ddpm", "unet", "ddpm_dc"],
    )
    p.add_argument("--base-ckpt", type=Path)
    p.add_argument("--adapter-ckpt", type=Path)
    p.add_argument("--unet-ckpt", type=Path)
    p.add_argument("--conddpm-ckpt", type=Path)
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except VoldiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
