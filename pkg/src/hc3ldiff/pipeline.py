"""End-to-end stages: phantoms, UFE training, diffusion training, evaluation.

Each stage reads and writes files in one output directory and refuses to
overwrite existing outputs unless ``force`` is set.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path

import jsonschema
import numpy as np
from scipy import ndimage

from . import dosimetry
from .config import PipelineConfig
from .errors import FormatError, StateError
from .fourier import HfeConfig, extract_high_frequency
from .grid import RngStream, checksum, load_container, save_container
from .ldm import Denoiser, DenoiserConfig, build_condition, synthesize, train_denoiser
from .metrics import evaluate_slices
from .nn import AdamW
from .phantom import generate_split, hu_to_unit, unit_to_hu
from .schedule import linear_schedule, make_subsequence
from .ufe import UFE, cosine_lr, fit_latent_scale, to_nhwc, train_ufe

log = logging.getLogger(__name__)

STAGE_SEEDS = {"stage1": 1, "stage2": 2, "eval": 3}


def _guard(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise FileExistsError(f"outputs already exist (use force to overwrite): {existing}")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, rows):
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _require(path, what):
    if not Path(path).exists():
        raise StateError(f"missing {what}: {path}")
    return Path(path)


def echo_config(cfg: PipelineConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.effective.json", cfg.to_dict())


def hfe_config(cfg: PipelineConfig) -> HfeConfig:
    d = cfg.diffusion
    if d.hfe_th is None:
        return HfeConfig.scaled(cfg.phantom.size, d.hfe_mode)
    return HfeConfig(d.hfe_th, d.hfe_mode)


def schedule_from(cfg: PipelineConfig):
    d = cfg.diffusion
    return linear_schedule(d.T, d.beta_start, d.beta_end, d.sigma_mode)


def denoiser_config(cfg: PipelineConfig) -> DenoiserConfig:
    d = cfg.diffusion
    return DenoiserConfig(base_width=d.base_width, levels=d.levels, blocks_per_level=d.blocks_per_level, temb_dim=d.temb_dim)


# --- phantoms -----------------------------------------------------------------

def run_phantom(cfg: PipelineConfig, out_dir, force=False):
    out = Path(out_dir)
    targets = [out / "train.hc3l", out / "test.hc3l", out / "manifest.json"]
    _guard(targets, force)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.phantom
    manifest = {"spec": cfg.to_dict()["phantom"], "splits": {}}
    for split in ("train", "test"):
        ct, cbct = generate_split(spec, split)
        save_container(out / f"{split}.hc3l", {"ct": ct, "cbct": cbct})
        mae = np.abs(cbct - ct).mean(axis=(1, 2)) if len(ct) else np.zeros(0)
        manifest["splits"][split] = {
            "count": int(len(ct)),
            "seed": spec.seed,
            "split_tag": split,
            "cbct_mae_hu": {"min": float(mae.min(initial=np.inf)) if len(mae) else None,
                            "mean": float(mae.mean()) if len(mae) else None,
                            "max": float(mae.max(initial=-np.inf)) if len(mae) else None},
        }
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_split(out_dir, split):
    path = _require(Path(out_dir) / f"{split}.hc3l", f"{split} dataset")
    data = load_container(path)
    if "ct" not in data or "cbct" not in data:
        raise FormatError(f"{path}: expected 'ct' and 'cbct' entries")
    return data["ct"], data["cbct"]


# --- checkpoints ----------------------------------------------------------------

def save_ufe(ufe: UFE, path, cfg: PipelineConfig):
    save_container(path, ufe.state_dict())
    _write_json(Path(path).with_suffix(".json"), {"ufe": cfg.to_dict()["ufe"], "latent_scale": ufe.latent_scale})


def load_ufe(path, cfg: PipelineConfig) -> UFE:
    path = _require(path, "UFE checkpoint")
    ufe = UFE(cfg.ufe, RngStream(0), dtype=np.float32)
    try:
        ufe.load_state_dict(load_container(path))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a UFE checkpoint for this config ({exc})") from exc
    return ufe.eval()


def save_denoiser(graph: Denoiser, path, cfg: PipelineConfig):
    save_container(path, graph.state_dict())
    _write_json(Path(path).with_suffix(".json"), {"diffusion": cfg.to_dict()["diffusion"]})


def load_denoiser(path, cfg: PipelineConfig) -> Denoiser:
    path = _require(path, "diffusion checkpoint")
    graph = Denoiser(denoiser_config(cfg), RngStream(0), dtype=np.float32)
    try:
        graph.load_state_dict(load_container(path))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a denoiser checkpoint for this config ({exc})") from exc
    return graph.eval()


# --- training -------------------------------------------------------------------

def _curve_path(ckpt):
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.stem + "_loss.csv")


def run_stage1(cfg: PipelineConfig, data_dir, ckpt=None, force=False):
    """Train the UFE on CT, CBCT and high-frequency CBCT images of the training split."""
    ckpt = Path(ckpt) if ckpt else Path(data_dir) / "ufe.hc3l"
    curve = _curve_path(ckpt)
    _guard([ckpt, curve], force)
    ct, cbct = load_split(data_dir, "train")
    tr = cfg.training
    cbct_u = hu_to_unit(cbct)
    images = np.stack([hu_to_unit(ct), cbct_u, extract_high_frequency(cbct_u, hfe_config(cfg))])
    rng = RngStream(tr.seed).child(STAGE_SEEDS["stage1"])
    ufe = UFE(cfg.ufe, rng.child(0), dtype=np.float32)
    steps = tr.stage1_epochs * -(-images.shape[1] // tr.stage1_batch)
    history = train_ufe(
        ufe, images, tr.stage1_epochs, tr.stage1_batch, rng.child(1),
        lambda: AdamW(lr=tr.stage1_lr, weight_decay=tr.weight_decay),
        log=log.info, lr_at=cosine_lr(tr.stage1_lr, steps, tr.lr_floor),
    )
    fit_latent_scale(ufe, images[0])
    save_ufe(ufe, ckpt, cfg)
    _write_csv(curve, history)
    return ckpt


def run_stage2(cfg: PipelineConfig, data_dir, ufe_path=None, ckpt=None, force=False):
    """Train the conditional denoiser with the frozen UFE."""
    ckpt = Path(ckpt) if ckpt else Path(data_dir) / "ldm.hc3l"
    curve = _curve_path(ckpt)
    _guard([ckpt, curve], force)
    ufe = load_ufe(Path(ufe_path) if ufe_path else Path(data_dir) / "ufe.hc3l", cfg)
    before = checksum(ufe.state_dict())
    ct, cbct = load_split(data_dir, "train")
    tr = cfg.training
    z0 = to_nhwc(ufe.encode_scaled(hu_to_unit(ct)[:, None]))
    cond = to_nhwc(build_condition(hu_to_unit(cbct)[:, None], hfe_config(cfg), ufe))
    rng = RngStream(tr.seed).child(STAGE_SEEDS["stage2"])
    graph = Denoiser(denoiser_config(cfg), rng.child(0), dtype=np.float32)
    steps = tr.stage2_epochs * -(-len(ct) // tr.stage2_batch)
    opt = AdamW(lr=tr.stage2_lr, weight_decay=tr.weight_decay)
    history = train_denoiser(
        graph, z0, cond, schedule_from(cfg), tr.stage2_epochs, tr.stage2_batch, rng.child(1), opt,
        lr_at=cosine_lr(tr.stage2_lr, steps, tr.lr_floor), log=log.info,
    )
    after = checksum(ufe.state_dict())
    if before != after:
        raise StateError("UFE parameters changed during stage-2 training")
    save_denoiser(graph, ckpt, cfg)
    _write_csv(curve, history)
    return ckpt


# --- evaluation -----------------------------------------------------------------

def target_mask_from_hu(hu, spacing_mm, lo=120.0, hi=450.0):
    """Target structure segmented from an image: HU band, opened, component nearest the center."""
    band = (hu >= lo) & (hu <= hi)
    band = ndimage.binary_opening(band, iterations=1)
    labels, n = ndimage.label(band)
    if n == 0:
        return np.zeros_like(band)
    centers = ndimage.center_of_mass(band, labels, range(1, n + 1))
    mid = (np.asarray(hu.shape) - 1) / 2.0
    dists = [np.sum(((np.asarray(c) - mid) * spacing_mm) ** 2) for c in centers]
    return labels == (int(np.argmin(dists)) + 1)


def dose_analysis(ct_hu, test_hu, cfg: PipelineConfig) -> dict:
    """Gamma/DVH of synthetic dose planned on ``test_hu``'s target vs on the CT's target, per slice."""
    ev = cfg.evaluation
    spacing = (ev.pixel_spacing_mm, ev.pixel_spacing_mm)
    gpr = {f"{int(d)}%/{int(r)}mm@{int(th)}%": [] for d, r in ev.gamma_criteria for th in ev.thresholds}
    diffs = []
    skipped = 0
    for ct_s, test_s in zip(ct_hu, test_hu):
        ref_mask = target_mask_from_hu(ct_s, spacing)
        test_mask = target_mask_from_hu(test_s, spacing)
        if not ref_mask.any() or not test_mask.any():
            skipped += 1
            continue
        ref = dosimetry.synthetic_dose(ref_mask, spacing, ev.prescription_gy, ev.falloff_mm)
        test = dosimetry.synthetic_dose(test_mask, spacing, ev.prescription_gy, ev.falloff_mm)
        margin = ev.ptv_margin_mm / ev.pixel_spacing_mm
        ptv = ndimage.distance_transform_edt(~ref_mask) <= margin
        structures = {"prostate": ref_mask, "ptv": ptv}
        for d, r in ev.gamma_criteria:
            for th in ev.thresholds:
                crit = dosimetry.GammaCriteria(d, r, th)
                gpr[f"{int(d)}%/{int(r)}mm@{int(th)}%"].append(dosimetry.gpr(dosimetry.gamma_map(ref, test, crit)))
        diffs.append(dosimetry.dvh_percent_diff(dosimetry.dvh_report(test, structures), dosimetry.dvh_report(ref, structures)).values)
    summary_diffs = {}
    if diffs:
        for s in diffs[0]:
            summary_diffs[s] = {p: float(np.mean([d[s][p] for d in diffs])) for p in diffs[0][s]}
    return {
        "gpr_percent": {k: float(np.mean(v)) if v else None for k, v in gpr.items()},
        "dvh_percent_diff": summary_diffs,
        "slices_evaluated": len(diffs),
        "slices_skipped": skipped,
    }


def synthesize_hu(cfg: PipelineConfig, ufe: UFE, graph: Denoiser, cbct_hu, steps=None, seed=None):
    """CBCT slices [N, H, W] in HU -> sCT slices in HU, plus wall-clock seconds."""
    steps = steps or cfg.evaluation.ddim_steps or cfg.diffusion.ddim_steps
    schedule = schedule_from(cfg)
    seed = cfg.training.seed if seed is None else seed
    rng = RngStream(seed).child(STAGE_SEEDS["eval"])
    t0 = time.perf_counter()
    sct_u = synthesize(hu_to_unit(cbct_hu)[:, None], ufe, graph, schedule,
                       make_subsequence(schedule.T, steps), rng, hfe_config(cfg))
    return unit_to_hu(sct_u[:, 0]), time.perf_counter() - t0


_METRIC_BLOCK = {
    "type": "object",
    "required": ["per_slice", "aggregate", "constants"],
    "properties": {
        "per_slice": {"type": "array", "items": {"type": "object", "required": ["mae", "psnr", "ssim"]}},
        "aggregate": {
            "type": "object",
            "required": ["mae", "psnr", "ssim"],
            "properties": {
                "mae": {"type": "number", "minimum": 0},
                "psnr": {"oneOf": [{"type": "number"}, {"enum": ["inf"]}]},
                "ssim": {"type": "number", "maximum": 1},
            },
        },
    },
}

_DOSE_BLOCK = {
    "type": "object",
    "required": ["gpr_percent", "dvh_percent_diff", "slices_evaluated", "slices_skipped"],
    "properties": {
        "gpr_percent": {"type": "object", "additionalProperties": {"type": ["number", "null"], "minimum": 0, "maximum": 100}},
        "dvh_percent_diff": {"type": "object"},
        "slices_evaluated": {"type": "integer", "minimum": 0},
        "slices_skipped": {"type": "integer", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "evaluation report",
    "type": "object",
    "required": ["metrics", "timing"],
    "additionalProperties": False,
    "properties": {
        "metrics": {
            "type": "object",
            "required": ["sct_vs_ct", "cbct_vs_ct", "ct_vs_ct"],
            "additionalProperties": _METRIC_BLOCK,
        },
        "timing": {
            "type": "object",
            "required": ["synthesis_seconds_total", "synthesis_seconds_per_slice", "ddim_steps", "slices"],
        },
        "dosimetry": {
            "type": "object",
            "required": ["sct_vs_ct", "ct_vs_ct"],
            "additionalProperties": _DOSE_BLOCK,
        },
    },
}


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def run_eval(cfg: PipelineConfig, out_dir, ufe_path=None, ldm_path=None, force=False):
    out = Path(out_dir)
    report_path, sct_path = out / "report.json", out / "sct.hc3l"
    _guard([report_path, sct_path], force)
    ct, cbct = load_split(out, "test")
    ufe = load_ufe(Path(ufe_path) if ufe_path else out / "ufe.hc3l", cfg)
    graph = load_denoiser(Path(ldm_path) if ldm_path else out / "ldm.hc3l", cfg)
    steps = cfg.evaluation.ddim_steps or cfg.diffusion.ddim_steps
    sct, elapsed = synthesize_hu(cfg, ufe, graph, cbct, steps)
    save_container(sct_path, {"sct": sct})
    report = {
        "metrics": {
            "sct_vs_ct": evaluate_slices(ct, sct),
            "cbct_vs_ct": evaluate_slices(ct, cbct),
            "ct_vs_ct": evaluate_slices(ct, ct),
        },
        "timing": {
            "synthesis_seconds_total": elapsed,
            "synthesis_seconds_per_slice": elapsed / max(len(ct), 1),
            "ddim_steps": int(steps),
            "slices": int(len(ct)),
        },
    }
    if cfg.evaluation.dosimetry:
        report["dosimetry"] = {
            "sct_vs_ct": dose_analysis(ct, sct, cfg),
            "ct_vs_ct": dose_analysis(ct, ct, cfg),
        }
    validate_report(report)
    _write_json(report_path, report)
    return report


def run_all(cfg: PipelineConfig, out_dir, force=False):
    echo_config(cfg, out_dir)
    run_phantom(cfg, out_dir, force)
    run_stage1(cfg, out_dir, force=force)
    run_stage2(cfg, out_dir, force=force)
    return run_eval(cfg, out_dir, force=force)
