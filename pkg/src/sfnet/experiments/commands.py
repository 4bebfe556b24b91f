"""Experiment commands behind the CLI.

Each command is an ordinary function returning its results, so tests and
notebooks can call them directly; the CLI only parses arguments.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from sfnet import data, spectral
from sfnet.autodiff import Tensor, sum_
from sfnet.experiments import checkpoint as ckpt_io
from sfnet.experiments.config import ConfigError, RunConfig
from sfnet.model import VARIANTS, SFNet
from sfnet.training import Trainer, evaluate, steps_per_epoch

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("config_hash", "epoch", "loss", "lr", "oa", "precision", "recall", "f1")
DEFAULT_SCALES = (3, 4, 5, 8, 64)
AUGMENT_POLICIES = ("none", "random_crop", "horizontal_flip", "color_jitter", "invert",
                    "random_erase", "mixup")
LUMA = np.array([0.299, 0.587, 0.114])


class RunError(RuntimeError):
    pass


@dataclass
class Splits:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    manifest: data.DatasetManifest


@dataclass
class TrainResult:
    model: SFNet
    history: list
    run_dir: Path
    checkpoint: Path
    config: RunConfig
    trainer: Optional[Trainer] = field(default=None, repr=False)

    @property
    def final(self) -> Optional[dict]:
        return self.history[-1] if self.history else None


def prepare_data(rc: RunConfig) -> Splits:
    extent = rc.sfnet_config().input_extent
    if rc.is_synthetic:
        manifest = data.synth_dataset(rc.synth_per_class, extent, seed=rc.seed)
    else:
        manifest = data.load_directory(rc.data, extent)
    train, val = data.split(manifest, rc.split_ratio, seed=rc.seed)
    xt, yt = data.to_arrays(train)
    xv, yv = data.to_arrays(val)
    if xt.shape[2:] != (extent, extent):
        raise ConfigError(f"dataset extent {xt.shape[2:]} does not match model extent {extent}")
    return Splits(xt, yt, xv, yv, manifest)


def _run_dir(rc: RunConfig) -> Path:
    path = rc.out_path()
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RunError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row[f]) for f in fields])
    path.write_text(buf.getvalue())


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metric_row(metrics) -> dict:
    return {"oa": metrics.oa, "precision": metrics.precision, "recall": metrics.recall,
            "f1": metrics.f1}


# -- train / eval ---------------------------------------------------------

def cmd_train(rc: RunConfig, splits: Optional[Splits] = None) -> TrainResult:
    run_dir = _run_dir(rc)
    rc.save(run_dir / "config.json")
    splits = splits or prepare_data(rc)
    splits.manifest.save(run_dir / "manifest.json")

    cfg = rc.sfnet_config()
    model = SFNet(cfg, seed=rc.seed)
    n_steps = steps_per_epoch(len(splits.x_train), rc.batch_size)
    trainer = Trainer(model, rc.policy(), rc.epochs, n_steps, lr0=rc.lr, seed=rc.seed,
                      batch_size=rc.batch_size)
    chash = rc.content_hash()
    history = []
    history_path = run_dir / "history.csv"
    write_csv(history_path, HISTORY_FIELDS, history)
    with open(run_dir / "progress.jsonl", "w") as progress:
        def on_step(rec):
            progress.write(json.dumps(rec, sort_keys=True) + "\n")

        for epoch in range(1, rc.epochs + 1):
            stats = trainer.train_epoch(splits.x_train, splits.y_train, on_step=on_step)
            progress.flush()
            metrics = evaluate(model, splits.x_val, splits.y_val)
            row = {"config_hash": chash, "epoch": epoch, "loss": stats.mean_loss, "lr": stats.lr,
                   **metric_row(metrics)}
            history.append(row)
            write_csv(history_path, HISTORY_FIELDS, history)
            logger.info("epoch %d/%d loss %.4f val OA %.4f F1 %.4f (%.1fs)", epoch, rc.epochs,
                        stats.mean_loss, metrics.oa, metrics.f1, stats.seconds)
    model.eval()
    path = ckpt_io.save(run_dir / "checkpoint.sfn", model, epoch=rc.epochs, seed=rc.seed,
                        optim=trainer.optim)
    return TrainResult(model, history, run_dir, path, rc, trainer)


def _config_beside(checkpoint_path: Path) -> RunConfig:
    snap = checkpoint_path.parent / "config.json"
    if not snap.exists():
        raise ConfigError(f"no run config given and no {snap} next to the checkpoint")
    return RunConfig.load_json(snap)


def cmd_eval(checkpoint_path, rc: Optional[RunConfig] = None, out_path=None,
             splits: Optional[Splits] = None) -> dict:
    checkpoint_path = Path(checkpoint_path)
    ck = ckpt_io.load(checkpoint_path)
    rc = rc or _config_beside(checkpoint_path)
    want = ck.config.input_extent
    have = rc.sfnet_config().input_extent
    if want != have:
        raise ConfigError(f"checkpoint expects {want}px inputs but the dataset is prepared at {have}px")
    splits = splits or prepare_data(rc)
    model = ck.build_model()
    metrics = evaluate(model, splits.x_val, splits.y_val)
    report = {"checkpoint": checkpoint_path.name, "config_hash": rc.content_hash(),
              "epoch": ck.epoch, **metrics.as_dict()}
    out_path = Path(out_path) if out_path else checkpoint_path.parent / "metrics.json"
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# -- studies --------------------------------------------------------------

def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def _final_metrics(result: TrainResult, splits: Splits) -> dict:
    if result.final is not None:
        return {k: result.final[k] for k in ("oa", "precision", "recall", "f1")}
    return metric_row(evaluate(result.model, splits.x_val, splits.y_val))


def _sub_config(rc: RunConfig, subdir: str, **changes) -> RunConfig:
    model = {**rc.model, **changes.pop("model", {})}
    return rc.with_overrides(output_dir=str(Path(rc.output_dir) / subdir), model=model, **changes)


def cmd_ablate_branches(rc: RunConfig, variants: Sequence[str] = tuple(VARIANTS),
                        splits: Optional[Splits] = None) -> list:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    run_dir = _run_dir(rc)
    splits = splits or prepare_data(rc)
    chash = rc.content_hash()
    rows = []
    for name in variants:
        mode, att = VARIANTS[name]
        sub = _sub_config(rc, _slug(name), model={"branch_mode": mode, "attention_enabled": att})
        result = cmd_train(sub, splits)
        rows.append({"variant": name, "params": result.model.num_parameters(),
                     **_final_metrics(result, splits), "config_hash": chash})
        logger.info("%s: OA %.4f F1 %.4f", name, rows[-1]["oa"], rows[-1]["f1"])
    write_csv(run_dir / "ablate_branches.csv",
              ("variant", "params", "oa", "precision", "recall", "f1", "config_hash"), rows)
    return rows


def check_sweep_scale(scale: float) -> None:
    if scale <= 2:
        raise ConfigError(
            f"scale {scale:g} rejected: a stop band this wide zeroes (nearly) the whole spectrum "
            "and loses almost all image structure; use scale > 2")


def cmd_sweep_lowfreq(rc: RunConfig, scales: Sequence[float] = DEFAULT_SCALES,
                      splits: Optional[Splits] = None) -> list:
    for s in scales:
        check_sweep_scale(s)
    run_dir = _run_dir(rc)
    splits = splits or prepare_data(rc)
    extent = rc.sfnet_config().input_extent
    chash = rc.content_hash()
    rows = []
    for s in scales:
        spec = spectral.HighPassSpec(extent, extent, float(s))
        sub = _sub_config(rc, f"scale-{s:g}", model={"highpass_scale": float(s)})
        result = cmd_train(sub, splits)
        rows.append({"scale": f"{s:g}", "phi": f"{spec.phi:.6f}",
                     **_final_metrics(result, splits), "config_hash": chash})
    write_csv(run_dir / "sweep_lowfreq.csv",
              ("scale", "phi", "oa", "precision", "recall", "f1", "config_hash"), rows)
    return rows


def cmd_ablate_augment(rc: RunConfig, policies: Sequence[str] = AUGMENT_POLICIES,
                       splits: Optional[Splits] = None) -> list:
    run_dir = _run_dir(rc)
    splits = splits or prepare_data(rc)
    chash = rc.content_hash()
    rows = []
    for name in policies:
        transforms = () if name == "none" else (name,)
        sub = _sub_config(rc, f"augment-{name}", augment=transforms)
        result = cmd_train(sub, splits)
        m = _final_metrics(result, splits)
        rows.append({"policy": name, "f1": m["f1"], "oa": m["oa"], "config_hash": chash})
    write_csv(run_dir / "ablate_augment.csv", ("policy", "f1", "oa", "config_hash"), rows)
    return rows


# -- visualisation --------------------------------------------------------

def _save_gray(path: Path, img: np.ndarray) -> None:
    Image.fromarray(img.astype(np.uint8)).save(path)


def dct_class_maps(manifest: data.DatasetManifest) -> dict:
    """Per-class ``log1p`` of the mean absolute DCT-II of the luma channel."""
    maps = {}
    for name, label in data.CLASS_DIRS.items():
        members = manifest.by_class(label)
        if not members:
            raise data.DatasetError(f"class {name!r} is empty")
        acc = None
        for s in members:
            luma = np.tensordot(LUMA, s.image.astype(np.float64), axes=1)
            coef = np.abs(spectral.dct2(Tensor(luma, dtype=np.float64)).data)
            acc = coef if acc is None else acc + coef
        maps[name] = np.log1p(acc / len(members))
    return maps


def high_band_mean(img: np.ndarray) -> float:
    """Mean over coefficients past the anti-diagonal (``u + v >= extent``)."""
    u, v = np.indices(img.shape)
    return float(img[u + v >= img.shape[0]].mean())


def cmd_dct_viz(manifest: data.DatasetManifest, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = dct_class_maps(manifest)
    # one shared scale so the two class maps are directly comparable
    lo = min(m.min() for m in maps.values())
    hi = max(m.max() for m in maps.values())
    span = hi - lo if hi > lo else 1.0
    images = {}
    for name, m in maps.items():
        images[name] = np.round(255 * (m - lo) / span).astype(np.uint8)
        _save_gray(out_dir / f"dct_{name}.png", images[name])
    diff = maps["fake"] - maps["real"]
    peak = np.abs(diff).max()
    images["diff"] = np.round(128 + 127 * (diff / peak if peak > 0 else diff)).astype(np.uint8)
    _save_gray(out_dir / "dct_diff.png", images["diff"])
    return {"maps": maps, "diff": diff, "images": images}


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array."""
    h, w = a.shape

    def coords(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = coords(out_h, h)
    c0, c1, fc = coords(out_w, w)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def layer_tags(model: SFNet) -> list:
    return [f"refine.{i}" for i in range(len(model.refine.groups))]


def gradcam_map(model: SFNet, image: np.ndarray, target_class: int,
                layer_tag: Optional[str] = None, logit_offset: Optional[np.ndarray] = None) -> np.ndarray:
    """Grad-CAM heatmap in [0, 1] at the input extent.

    ``logit_offset`` is added to the logits before the target is selected;
    it exists to check that other logits do not influence the map.
    """
    tags = layer_tags(model)
    layer_tag = layer_tag or tags[-1]
    if layer_tag not in tags:
        raise ValueError(f"unknown layer tag {layer_tag!r}; choose from {tags}")
    if target_class not in (0, 1):
        raise ValueError("target_class must be 0 (real) or 1 (fake)")
    model.eval()
    taps = {}
    logits = model(Tensor(image[None]), taps)
    act = taps[layer_tag]
    act.retain_grad()
    if logit_offset is not None:
        logits = logits + Tensor(np.asarray(logit_offset, dtype=logits.dtype).reshape(1, -1))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[0, target_class] = 1
    sum_(logits * Tensor(onehot)).backward()
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    weights = grad[0].mean(axis=(1, 2), dtype=np.float64)
    cam = np.maximum(np.tensordot(weights, act.data[0].astype(np.float64), axes=1), 0.0)
    cam = bilinear_resize(cam, image.shape[1], image.shape[2])
    lo, hi = cam.min(), cam.max()
    if hi - lo < 1e-12:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    heat = np.stack([np.clip(3 * cam, 0, 1), np.clip(3 * cam - 1, 0, 1), np.clip(3 * cam - 2, 0, 1)])
    mixed = (1 - alpha) * image + alpha * heat
    return np.round(255 * np.clip(mixed, 0, 1)).astype(np.uint8).transpose(1, 2, 0)


def cmd_gradcam(checkpoint_path, image_path, target_class: int = 1,
                layer_tag: Optional[str] = None, out_path="gradcam.png") -> np.ndarray:
    ck = ckpt_io.load(checkpoint_path)
    model = ck.build_model()
    image = data.decode_image(image_path, ck.config.input_extent)
    cam = gradcam_map(model, image, target_class, layer_tag)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, cam)).save(out_path)
    _save_gray(out_path.with_name(out_path.stem + "_map.png"), np.round(255 * cam))
    return cam
