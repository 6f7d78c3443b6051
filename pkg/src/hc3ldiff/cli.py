"""Command-line entry point: ``python3 -m hc3ldiff <subcommand> ...``.

Exit codes: 0 success, 1 refused/other failure, 2 invalid config or arguments,
3 missing or unreadable input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from . import dosimetry, pipeline
from .config import ConfigError, PipelineConfig
from .errors import FormatError, NumericalError, StateError
from .fourier import HfeConfig, extract_high_frequency
from .grid import load_container, save_container
from .metrics import evaluate_slices
from .phantom import PhantomSpec

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("hc3ldiff")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_globals(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", type=Path, default=d(None), help="pipeline config JSON")
    p.add_argument("--seed", type=int, default=d(None), help="override the master seed")
    p.add_argument("--threads", type=int, default=d(None), help="BLAS thread limit")
    p.add_argument("--out-dir", type=Path, default=d(Path(".")), help="output directory")
    p.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hc3ldiff", description="CBCT to CT latent diffusion toolkit")
    _add_globals(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate train/test phantom containers")
    p.add_argument("--spec", type=Path, help="phantom spec JSON (overrides the config's phantom section)")

    p = sub.add_parser("train-ufe", parents=[common], help="stage 1: train the autoencoder")
    p.add_argument("--data", type=Path, help="directory holding train.hc3l (default: out-dir)")
    p.add_argument("--out", type=Path, help="checkpoint path (default: out-dir/ufe.hc3l)")

    p = sub.add_parser("train-ldm", parents=[common], help="stage 2: train the denoiser")
    p.add_argument("--data", type=Path)
    p.add_argument("--ufe", type=Path, help="stage-1 checkpoint (default: out-dir/ufe.hc3l)")
    p.add_argument("--out", type=Path, help="checkpoint path (default: out-dir/ldm.hc3l)")

    p = sub.add_parser("synthesize", parents=[common], help="CBCT container -> sCT container")
    p.add_argument("--cbct", type=Path, required=True)
    p.add_argument("--key", help="entry name holding CBCT slices (default: 'cbct' or the only entry)")
    p.add_argument("--ufe", type=Path, required=True)
    p.add_argument("--ldm", type=Path, required=True)
    p.add_argument("--ddim-steps", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("hfe", parents=[common], help="high-frequency extraction of every entry")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--th", type=int, required=True)
    p.add_argument("--mode", choices=("or", "and"), default="or")
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("metrics", parents=[common], help="MAE/PSNR/SSIM report")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--ref-key")
    p.add_argument("--test-key")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gamma", parents=[common], help="gamma passing rates")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--eval", type=Path, required=True)
    p.add_argument("--dd", type=float, default=3.0)
    p.add_argument("--dta", type=float, default=3.0)
    p.add_argument("--threshold", type=_floats, default=[10.0, 50.0, 80.0])
    p.add_argument("--spacing", type=_floats, required=True)
    p.add_argument("--search-radius", type=float)
    p.add_argument("--interp", choices=("none", "linear"), default="none")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("dvh", parents=[common], help="DVH parameters per structure")
    p.add_argument("--dose", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="one entry per structure; nonzero = inside")
    p.add_argument("--params", default="95,98,max")
    p.add_argument("--spacing", type=_floats)
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("eval-all", parents=[common], help="phantoms, both training stages and evaluation")
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(training={"seed": args.seed})
    return cfg


def _pick(path, key=None, preferred=()):
    grids = load_container(path)
    if key is not None:
        if key not in grids:
            raise StateError(f"{path}: no entry {key!r} (has {sorted(grids)})")
        return grids[key]
    for name in preferred:
        if name in grids:
            return grids[name]
    if len(grids) != 1:
        raise StateError(f"{path}: ambiguous entries {sorted(grids)}; pass a key")
    return next(iter(grids.values()))


def _write_json(path, obj, force):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _save(path, grids, force):
    if Path(path).exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_container(path, grids)


def _input(path):
    if not Path(path).exists():
        raise StateError(f"missing input: {path}")
    return path


def cmd_phantom(args, cfg):
    if args.spec:
        try:
            data = json.loads(_input(args.spec).read_text())
            spec = PhantomSpec.from_dict(data)
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid phantom spec: {exc}") from exc
        cfg = cfg.with_overrides(phantom=spec.to_dict())
    if args.seed is not None:
        cfg = cfg.with_overrides(phantom={"seed": args.seed})
    pipeline.echo_config(cfg, args.out_dir)
    manifest = pipeline.run_phantom(cfg, args.out_dir, force=args.force)
    log.info("wrote %s", {k: v["count"] for k, v in manifest["splits"].items()})


def cmd_train_ufe(args, cfg):
    pipeline.echo_config(cfg, args.out_dir)
    ckpt = pipeline.run_stage1(cfg, args.data or args.out_dir, ckpt=args.out or args.out_dir / "ufe.hc3l", force=args.force)
    log.info("wrote %s", ckpt)


def cmd_train_ldm(args, cfg):
    pipeline.echo_config(cfg, args.out_dir)
    ckpt = pipeline.run_stage2(cfg, args.data or args.out_dir, ufe_path=args.ufe or args.out_dir / "ufe.hc3l",
                               ckpt=args.out or args.out_dir / "ldm.hc3l", force=args.force)
    log.info("wrote %s", ckpt)


def cmd_synthesize(args, cfg):
    cbct = _pick(_input(args.cbct), args.key, preferred=("cbct",))
    single = cbct.ndim == 2
    cbct = cbct[None] if single else cbct
    ufe = pipeline.load_ufe(args.ufe, cfg)
    graph = pipeline.load_denoiser(args.ldm, cfg)
    sct, elapsed = pipeline.synthesize_hu(cfg, ufe, graph, cbct, args.ddim_steps, args.seed)
    _save(args.out, {"sct": sct[0] if single else sct}, args.force)
    log.info("synthesized %d slice(s) in %.2f s", len(sct), elapsed)


def cmd_hfe(args, cfg):
    grids = load_container(_input(args.input))
    hc = HfeConfig(args.th, args.mode)
    _save(args.output, {k: extract_high_frequency(v, hc) for k, v in grids.items()}, args.force)


def cmd_metrics(args, cfg):
    ref = _pick(_input(args.ref), args.ref_key, preferred=("ct",))
    test = _pick(_input(args.test), args.test_key, preferred=("sct",))
    if ref.ndim == 2:
        ref, test = ref[None], test[None]
    _write_json(args.out, evaluate_slices(ref, test), args.force)


def cmd_gamma(args, cfg):
    ref = dosimetry.DoseGrid(_pick(_input(args.ref)), tuple(args.spacing))
    ev = dosimetry.DoseGrid(_pick(_input(args.eval)), tuple(args.spacing))
    out = {"criteria": {"dose_percent": args.dd, "dta_mm": args.dta, "interp": args.interp}, "gpr_percent": {}}
    for th in args.threshold:
        crit = dosimetry.GammaCriteria(args.dd, args.dta, th, args.search_radius)
        out["gpr_percent"][f"{th:g}"] = dosimetry.gpr(dosimetry.gamma_map(ref, ev, crit, interp=args.interp))
    _write_json(args.out, out, args.force)


def cmd_dvh(args, cfg):
    values = _pick(_input(args.dose))
    spacing = tuple(args.spacing) if args.spacing else (1.0,) * values.ndim
    dose = dosimetry.DoseGrid(values, spacing)
    masks = {k: v != 0 for k, v in load_container(_input(args.mask)).items()}
    params = []
    for p in args.params.split(","):
        p = p.strip().lower()
        params.append("max" if p == "max" else float(p))
    out = {}
    for name, mask in masks.items():
        out[name] = {("Dmax" if p == "max" else f"D{p:g}"): dosimetry.dvh_parameter(dose, mask, p) for p in params}
    _write_json(args.out, out, args.force)


def cmd_eval_all(args, cfg):
    report = pipeline.run_all(cfg, args.out_dir, force=args.force)
    agg = {k: v["aggregate"] for k, v in report["metrics"].items()}
    log.info("aggregate metrics: %s", json.dumps(agg))


COMMANDS = {
    "phantom": cmd_phantom,
    "train-ufe": cmd_train_ufe,
    "train-ldm": cmd_train_ldm,
    "synthesize": cmd_synthesize,
    "hfe": cmd_hfe,
    "metrics": cmd_metrics,
    "gamma": cmd_gamma,
    "dvh": cmd_dvh,
    "eval-all": cmd_eval_all,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        with _thread_limit(args.threads):
            COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except (StateError, FormatError, FileNotFoundError) as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except FileExistsError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except ValueError as exc:
        log.error("invalid argument: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
