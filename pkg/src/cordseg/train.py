"""Training protocol: windowed sampling with augmentation, the combined
cross-entropy/Dice objective, Adadelta updates, validation curves, and
bitwise-reproducible checkpoints.

Three independent seed-derived RNG streams drive (a) sample selection,
(b) augmentation, and (c) dropout/dropconnect masks, so runs that differ only
in the loss variant see identical sample sequences. Restoring a checkpoint
restores all three streams, making save/resume reproduce the uninterrupted
trajectory bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, mdgru
from . import tensor as T
from .augment import AugmentConfig, apply_transform, sample_augmentation
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DomainError, ManifestError, ShapeError
from .metrics import dsc
from .mdgru import MDGRUConfig, MDGRUParams
from .pipeline import (GM, WM, DatasetManifest, LabelMap, MultiChannelSlice,
                       gaussian_highpass, load_labels, load_slice)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    iterations: int = 30000
    batch_size: int = 1
    lam: float = 0.5
    loss_variant: str = "gdl"               # gdl | dl | gm_dl
    learning_rate: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    validation_interval: int = 200
    seed: int = 0
    highpass_variance: float | None = None

    def validate(self) -> "TrainConfig":
        if self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.batch_size != 1:
            raise ConfigError("the protocol trains with batch size 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1]")
        if self.loss_variant not in losses.VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss_variant!r}")
        if self.learning_rate <= 0 or not 0 <= self.rho < 1 or self.eps <= 0:
            raise ConfigError("invalid optimizer constants")
        if self.validation_interval < 1:
            raise ConfigError("validation_interval must be positive")
        if self.highpass_variance is not None and self.highpass_variance <= 0:
            raise ConfigError("highpass variance must be positive or null")
        return self

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations, "batch_size": self.batch_size,
            "lam": self.lam, "loss_variant": self.loss_variant,
            "learning_rate": self.learning_rate, "rho": self.rho,
            "eps": self.eps, "validation_interval": self.validation_interval,
            "seed": self.seed, "highpass_variance": self.highpass_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d).validate()


@dataclass
class OptimizerState:
    """Adadelta accumulators, one pair per named parameter."""

    eg2: dict[str, np.ndarray]
    edx2: dict[str, np.ndarray]

    @classmethod
    def zeros_for(cls, params: MDGRUParams) -> "OptimizerState":
        return cls({n: np.zeros_like(p.data) for n, p in params.named_parameters()},
                   {n: np.zeros_like(p.data) for n, p in params.named_parameters()})


def adadelta_step(params: MDGRUParams, state: OptimizerState,
                  config: TrainConfig) -> None:
    """One accumulate-and-update pass over every parameter.

    E[g2] <- rho E[g2] + (1-rho) g2
    dx    = -sqrt(E[dx2]+eps) / sqrt(E[g2]+eps) * g * lr
    E[dx2] <- rho E[dx2] + (1-rho) dx2
    """
    rho, eps, lr = config.rho, config.eps, config.learning_rate
    for name, p in params.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for parameter {name}")
        if g.shape != state.eg2[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != state shape "
                             f"{state.eg2[name].shape} for {name}")
        eg2 = state.eg2[name]
        edx2 = state.edx2[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g * lr
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        p.data += dx


# ---------------------------------------------------------------------------
# model wrapper


@dataclass
class SegmentationModel:
    config: MDGRUConfig
    params: MDGRUParams
    highpass_variance: float | None = None

    def prepare(self, slc: MultiChannelSlice) -> np.ndarray:
        pixels = slc.pixels
        if self.highpass_variance is not None:
            pixels = gaussian_highpass(pixels, self.highpass_variance)
        return pixels


def init_model(config: MDGRUConfig, seed: int,
               highpass_variance: float | None = None) -> SegmentationModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    return SegmentationModel(config.validate(), mdgru.init_params(config, rng),
                             highpass_variance)


def segment(model: SegmentationModel, slc: MultiChannelSlice
            ) -> tuple[np.ndarray, LabelMap]:
    """Probability maps and the argmax label map for one slice.

    Ties in the per-pixel argmax resolve toward the lower class index.
    """
    if slc.channels != model.config.in_channels:
        raise ShapeError(f"model expects {model.config.in_channels} channels, "
                         f"slice has {slc.channels}")
    x = T.Tensor(model.prepare(slc))
    logits = mdgru.mdgru_forward(x, model.config, model.params, training=False)
    probs = T.softmax(logits, axis=-1).data
    classes = probs.argmax(axis=-1).astype(np.uint8)
    return probs, LabelMap(classes, slc.spacing_mm, slc.subject_id,
                           slc.scan_index, slc.slice_index)


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen


def save_training_checkpoint(path, model: SegmentationModel,
                             state: OptimizerState, train_config: TrainConfig,
                             augment_config: AugmentConfig, iteration: int,
                             rngs: dict[str, np.random.Generator],
                             best: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.params.named_parameters():
        arrays[f"param.{name}"] = p.data
    for name in state.eg2:
        arrays[f"opt.eg2.{name}"] = state.eg2[name]
        arrays[f"opt.edx2.{name}"] = state.edx2[name]
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict(),
        "augment_config": augment_config.to_dict(),
        "highpass_variance": model.highpass_variance,
        "iteration": iteration,
        "rng": {name: _rng_state(g) for name, g in rngs.items()},
        "best": best,
    }
    save_checkpoint(path, arrays, meta)


def load_model(path) -> SegmentationModel:
    arrays, meta = load_checkpoint(path)
    config = MDGRUConfig.from_dict(meta["model_config"])
    params = mdgru.init_params(config, seed=0)
    for name, p in params.named_parameters():
        stored = arrays[f"param.{name}"]
        if stored.shape != p.data.shape:
            raise ShapeError(f"checkpoint array param.{name} has shape "
                             f"{stored.shape}, expected {p.data.shape}")
        p.data = stored
    return SegmentationModel(config, params, meta.get("highpass_variance"))


def _load_training_state(path, model_config: MDGRUConfig
                         ) -> tuple[SegmentationModel, OptimizerState, dict]:
    model = load_model(path)
    if model.config != model_config:
        raise ConfigError("checkpoint model configuration does not match")
    arrays, meta = load_checkpoint(path)
    state = OptimizerState.zeros_for(model.params)
    for name in state.eg2:
        state.eg2[name] = arrays[f"opt.eg2.{name}"]
        state.edx2[name] = arrays[f"opt.edx2.{name}"]
    return model, state, meta


# ---------------------------------------------------------------------------
# the loop


LOG_COLUMNS = ("iteration", "loss", "dice_term", "ce_term",
               "val_gm_dsc", "val_wm_dsc", "val_ce")


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path | None
    log_rows: list[dict]
    best_score: float
    best_iteration: int


def _format_log_row(row: dict) -> str:
    cells = []
    for col in LOG_COLUMNS:
        v = row.get(col)
        if v is None:
            cells.append("")
        elif col == "iteration":
            cells.append(str(v))
        else:
            cells.append(f"{v:.12g}")
    return ",".join(cells)


def write_log_csv(rows: list[dict], path) -> None:
    lines = [",".join(LOG_COLUMNS)] + [_format_log_row(r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


class _SliceCache:
    """Preprocessed training data held in memory; phantom-scale datasets are
    a few dozen megabytes."""

    def __init__(self, manifest: DatasetManifest, highpass: float | None):
        self.manifest = manifest
        self.highpass = highpass
        self._data: dict[tuple[str, str], tuple] = {}

    def get(self, row) -> tuple[np.ndarray, LabelMap, MultiChannelSlice]:
        key = (row.image_path, row.label_path)
        if key not in self._data:
            slc = load_slice(self.manifest.image_file(row))
            lbl = load_labels(self.manifest.label_file(row))
            if lbl.classes.shape != slc.pixels.shape[:2]:
                raise ManifestError(
                    f"{row.image_path}: label extent {lbl.classes.shape} does not "
                    f"match image extent {slc.pixels.shape[:2]}")
            pixels = slc.pixels
            if self.highpass is not None:
                pixels = gaussian_highpass(pixels, self.highpass)
            self._data[key] = (pixels, lbl, slc)
        return self._data[key]


def _validate(model: SegmentationModel, cache: _SliceCache, rows) -> dict:
    gm_scores, wm_scores, ces = [], [], []
    for row in rows:
        _, lbl, slc = cache.get(row)
        probs, pred = segment(model, slc)
        gm_scores.append(dsc(pred.classes == GM, lbl.classes == GM))
        wm_scores.append(dsc(pred.classes == WM, lbl.classes == WM))
        r = losses.one_hot(lbl.classes, model.config.num_classes)
        ces.append(losses.cross_entropy(T.Tensor(probs), r).item())
    return {"val_gm_dsc": float(np.mean(gm_scores)),
            "val_wm_dsc": float(np.mean(wm_scores)),
            "val_ce": float(np.mean(ces))}


def train(manifest: DatasetManifest, train_config: TrainConfig,
          model_config: MDGRUConfig, augment_config: AugmentConfig,
          out_dir, rater: int | None = None,
          resume_from=None) -> TrainResult:
    """Run the optimization loop and write checkpoints, the training log,
    and a wall-time sidecar into out_dir."""
    train_config.validate()
    model_config.validate()
    augment_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_rows = manifest.rows_for("train", rater)
    val_rows = manifest.rows_for("val", rater)
    if not train_rows:
        raise ManifestError("manifest has no training rows")

    if resume_from is not None:
        model, opt_state, meta = _load_training_state(resume_from, model_config)
        rngs = {name: _restore_rng(state) for name, state in meta["rng"].items()}
        start_iteration = meta["iteration"]
        best = meta["best"]
    else:
        model = init_model(model_config, train_config.seed,
                           train_config.highpass_variance)
        opt_state = OptimizerState.zeros_for(model.params)
        rngs = {
            "sample": np.random.default_rng(
                np.random.SeedSequence([train_config.seed, 0])),
            "augment": np.random.default_rng(
                np.random.SeedSequence([train_config.seed, 1])),
            "mask": np.random.default_rng(
                np.random.SeedSequence([train_config.seed, 2])),
        }
        start_iteration = 0
        best = {"score": -1.0, "iteration": 0}

    cache = _SliceCache(manifest, model.highpass_variance)
    log_rows: list[dict] = []
    timing: list[tuple[int, float]] = []
    best_path = out_dir / "best.ckpt"
    final_path = out_dir / "final.ckpt"

    for iteration in range(start_iteration + 1, train_config.iterations + 1):
        tic = time.perf_counter()
        idx = int(rngs["sample"].integers(len(train_rows)))
        pixels, lbl, slc = cache.get(train_rows[idx])
        transform = sample_augmentation(rngs["augment"], augment_config,
                                        pixels.shape[:2])
        win_slc, win_lbl = apply_transform(
            MultiChannelSlice(pixels, slc.spacing_mm, slc.subject_id,
                              slc.scan_index, slc.slice_index),
            lbl, transform)

        x = T.Tensor(win_slc.pixels)
        logits = mdgru.mdgru_forward(x, model.config, model.params,
                                     training=True, rng=rngs["mask"])
        probs = T.softmax(logits, axis=-1)
        target = losses.one_hot(win_lbl.classes, model.config.num_classes)
        loss = losses.combined_loss(probs, target, train_config.lam,
                                    train_config.loss_variant)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise DomainError(f"loss became non-finite at iteration {iteration}")

        model.params.zero_grad()
        loss.backward()
        adadelta_step(model.params, opt_state, train_config)

        detached = T.Tensor(probs.data)
        ce_term = losses.cross_entropy(detached, target).item()
        if train_config.loss_variant == "gm_dl":
            dice_term = losses.dice_loss(
                detached, target, losses.gm_only_weights(model.config.num_classes)).item()
        else:
            w = losses.class_weights(target)
            dice_fn = (losses.dice_loss if train_config.loss_variant == "dl"
                       else losses.generalized_dice_loss)
            dice_term = dice_fn(detached, target, w).item()

        row = {"iteration": iteration, "loss": loss_value,
               "dice_term": dice_term, "ce_term": ce_term}

        if val_rows and (iteration % train_config.validation_interval == 0
                         or iteration == train_config.iterations):
            row.update(_validate(model, cache, val_rows))
            score = 0.5 * (row["val_gm_dsc"] + row["val_wm_dsc"])
            if score > best["score"]:
                best = {"score": score, "iteration": iteration}
                save_training_checkpoint(best_path, model, opt_state,
                                         train_config, augment_config,
                                         iteration, rngs, best)
        log_rows.append(row)
        timing.append((iteration, time.perf_counter() - tic))

    save_training_checkpoint(final_path, model, opt_state, train_config,
                             augment_config, train_config.iterations, rngs, best)
    write_log_csv(log_rows, out_dir / "training_log.csv")
    Path(out_dir / "timing.csv").write_text(
        "iteration,seconds\n"
        + "\n".join(f"{i},{s:.6f}" for i, s in timing) + "\n")
    return TrainResult(final_path, best_path if best["iteration"] else None,
                       log_rows, best["score"], best["iteration"])


def train_rater_ensemble(manifest: DatasetManifest, raters: list[int],
                         train_config: TrainConfig, model_config: MDGRUConfig,
                         augment_config: AugmentConfig, out_dir) -> list[TrainResult]:
    """One independent model per rater; seeds derive from the base seed and
    the rater index."""
    if not raters:
        raise ManifestError("need at least one rater")
    reference = {r.image_path for r in manifest.rows if r.rater == raters[0]}
    for rater in raters[1:]:
        images = {r.image_path for r in manifest.rows if r.rater == rater}
        if images != reference:
            raise ManifestError(f"rater {rater} covers a different image set")

    out_dir = Path(out_dir)
    results = []
    for rater in raters:
        cfg = TrainConfig.from_dict({**train_config.to_dict(),
                                     "seed": train_config.seed + rater})
        results.append(train(manifest, cfg, model_config, augment_config,
                             out_dir / f"rater_{rater}", rater=rater))
    return results
