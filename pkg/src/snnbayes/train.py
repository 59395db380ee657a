"""Training, evaluation and slicing runs driven by a :class:`RunConfig`.

Seeds: parameters are initialised from ``RngStream(train.seed).split("init")``;
step ``b`` of epoch ``e`` draws its dropout masks and posterior samples from
``split("step", e, b)``; minibatch order comes from ``BatchPlan(train.seed,
batch_size, e)``. The manifest echoes the full resolved config, so a run can
be repeated from its manifest alone.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .core_math import NumericalError, RngStream
from .data import BatchPlan, Dataset, batches, gen_synthetic, load_features, normalize
from .landscape import SliceSpec, bayesian_slice, default_direction, deterministic_slice, spec_dict, write_slice
from .metrics import MetricsReport, PredictiveBatch, calibration_bins, evaluate
from .optim import (adam_init, adam_step, bayesian_model_average, clip_grad_norm, ivon_init,
                    ivon_sample, ivon_step)
from .snn import (Architecture, calibrate_bn, cross_entropy, flatten, init_bn_states, init_params,
                  loss_and_gradients, network_forward, predict_proba, unflatten, update_running_stats)


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path:
        ds = load_features(d.path, split_seed=d.seed)
    else:
        ds = gen_synthetic(d.num_classes, d.per_class, d.frames, d.features, d.noise_std, d.seed,
                           d.amplitude, d.offset)
    return normalize(ds) if d.normalize else ds


def build_arch(cfg: RunConfig, ds: Dataset) -> Architecture:
    m = cfg.model
    return Architecture(ds.num_features, ds.num_classes, hidden=tuple(m.hidden), alpha=tuple(m.alpha),
                        v_th=m.v_th, dropout_p=cfg.resolved_dropout(), boxcar_halfwidth=m.boxcar_halfwidth,
                        boxcar_gain=m.boxcar_gain, bn_momentum=m.bn_momentum, bn_eps=m.bn_eps)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-5
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def _mean_loss(arch, params, bn_states, x, y, chunk=256) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy."""
    losses, correct = [], 0
    for i in range(0, len(y), chunk):
        logits, _ = network_forward(arch, params, bn_states, x[i:i + chunk], "eval")
        losses.append(cross_entropy(logits, y[i:i + chunk]))
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + chunk]))
    return float(np.concatenate(losses).mean()), correct / len(y)


def predictive_batch(ckpt: Checkpoint, x, y, mc_samples: int, rng: RngStream) -> PredictiveBatch:
    """Single forward pass for point models, Bayesian model average for IVON."""
    if ckpt.kind == "ivon":
        return bayesian_model_average(ckpt.posterior, ckpt.arch, ckpt.bn_states, x, mc_samples, rng, y)
    return PredictiveBatch(predict_proba(ckpt.arch, ckpt.params, ckpt.bn_states, x), y)


def _validate(ckpt: Checkpoint, x, y, cfg: RunConfig, epoch: int) -> tuple[float, float]:
    if ckpt.kind == "ivon" and cfg.train.val_mc_samples > 0:
        pb = predictive_batch(ckpt, x, y, cfg.train.val_mc_samples,
                              RngStream(cfg.train.seed).split("val", epoch))
        rep = evaluate(pb, cfg.eval.num_bins)
        return rep.nll, rep.accuracy
    return _mean_loss(ckpt.arch, ckpt.point_params(), ckpt.bn_states, x, y)


def _check_finite(loss: float) -> None:
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite training loss {loss}")


def train_run(cfg: RunConfig, log=print) -> dict:
    """Train per ``cfg``, write checkpoints and ``manifest.json``; returns the manifest."""
    cfg.validate()
    out = Path(cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    arch = build_arch(cfg, ds)
    x_tr, y_tr = ds.subset("train")
    n_train = len(y_tr)
    has_val = ds.has_split("val")
    root = RngStream(cfg.train.seed)
    theta = flatten(init_params(arch, root.split("init")))
    trainer = cfg.optim.trainer
    lr = cfg.resolved_lr()
    o = cfg.optim

    if trainer == "adam":
        bn = init_bn_states(arch, frozen=False)
        state = adam_init(theta.size, lr, o.beta1, cfg.resolved_beta2(), o.eps)
        ess = None
    else:
        bn = init_bn_states(arch, frozen=True)
        if o.bn_calibrate:
            bn = calibrate_bn(arch, unflatten(theta, arch), bn, x_tr)
        ess = float(o.ess) if o.ess is not None else float(n_train)
        post = ivon_init(theta, ess, o.wd, o.h0, lr, o.beta1, cfg.resolved_beta2())

    def snapshot() -> Checkpoint:
        meta = {"config": cfg.to_dict(), "version": __version__}
        if trainer == "adam":
            return Checkpoint("point", arch, bn, params=unflatten(theta, arch), meta=meta)
        return Checkpoint("ivon", arch, bn, posterior=post, meta=meta)

    sched = PlateauScheduler(lr, cfg.train.sched_factor, cfg.train.sched_patience, cfg.train.sched_min_lr)
    history, epoch_seconds = [], []
    best_path, final_path = out / "best.ckpt", out / "final.ckpt"
    best_metric = math.inf
    save_checkpoint(best_path, snapshot())

    for epoch in range(cfg.train.epochs):
        t0 = time.perf_counter()
        losses = []
        for b, idx in enumerate(batches(ds, BatchPlan(cfg.train.seed, cfg.train.batch_size, epoch))):
            step_rng = root.split("step", epoch, b)
            xb, yb = ds.features[idx], ds.labels[idx]
            try:
                if trainer == "adam":
                    loss, grad, tr = loss_and_gradients(arch, unflatten(theta, arch), bn, xb, yb, "train",
                                                        step_rng)
                    _check_finite(loss)
                    bn = update_running_stats(bn, tr)
                    state, theta = adam_step(state, theta, clip_grad_norm(grad, o.clip_norm))
                else:
                    thetas, grads, step_losses = [], [], []
                    for s in range(o.train_samples):
                        th, _ = ivon_sample(post, step_rng.split("sample", s))
                        loss, grad, _ = loss_and_gradients(arch, unflatten(th, arch), bn, xb, yb, "train",
                                                           step_rng.split("dropout", s))
                        _check_finite(loss)
                        thetas.append(th)
                        grads.append(clip_grad_norm(grad, o.clip_norm))
                        step_losses.append(loss)
                    post = ivon_step(post, np.stack(grads), np.stack(thetas))
                    loss = float(np.mean(step_losses))
            except NumericalError as exc:
                raise NumericalError(f"{exc} (epoch {epoch}, batch {b})") from None
            losses.append(loss)

        train_loss = float(np.mean(losses))
        ckpt = snapshot()
        if has_val:
            val_loss, val_acc = _validate(ckpt, *ds.subset("val"), cfg, epoch)
        else:
            val_loss, val_acc = None, None
        metric = val_loss if has_val else train_loss
        if metric < best_metric:
            best_metric = metric
            save_checkpoint(best_path, ckpt)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "val_accuracy": val_acc, "lr": sched.lr})
        new_lr = sched.step(metric)
        if trainer == "adam":
            state = replace(state, lr=new_lr)
        else:
            post = replace(post, lr=new_lr)
        epoch_seconds.append(time.perf_counter() - t0)
        val_text = "n/a" if val_loss is None else f"{val_loss:.4f} val_acc={val_acc:.3f}"
        log(f"epoch {epoch}: train_loss={train_loss:.4f} val_loss={val_text} lr={history[-1]['lr']:g}")

    final = snapshot()
    save_checkpoint(final_path, final)
    split = cfg.eval.split
    report = None
    if ds.has_split(split):
        x_ev, y_ev = ds.subset(split)
        pb = predictive_batch(final, x_ev, y_ev, cfg.eval.mc_samples, RngStream(cfg.eval.seed).split("evaluate"))
        report = evaluate(pb, cfg.eval.num_bins).to_dict()

    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "trainer": trainer,
        "train_size": n_train,
        "ess": ess,
        "num_params": arch.num_params,
        "scheduler_metric": "val_loss" if has_val else "train_loss",
        "history": history,
        "final_metrics": {"split": split, **report} if report else None,
        "checkpoints": {"best": str(best_path), "final": str(final_path)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(json.dumps({"epoch_seconds": epoch_seconds}, indent=2) + "\n")
    return manifest


def _config_for(ckpt: Checkpoint, cfg: RunConfig | None) -> RunConfig:
    return cfg if cfg is not None else RunConfig.from_dict(ckpt.meta.get("config", {}))


def evaluate_run(ckpt_path, cfg: RunConfig | None = None, out_json=None, out_csv=None) -> MetricsReport:
    """Metrics JSON and per-bin calibration CSV for a checkpoint.

    The dataset is rebuilt from ``cfg`` (by default the config stored in the
    checkpoint). IVON checkpoints are scored by Bayesian model averaging with
    ``eval.mc_samples`` samples.
    """
    ckpt = load_checkpoint(ckpt_path)
    cfg = _config_for(ckpt, cfg)
    ds = build_dataset(cfg)
    _check_arch(ckpt, ds)
    x, y = ds.subset(cfg.eval.split)
    pb = predictive_batch(ckpt, x, y, cfg.eval.mc_samples, RngStream(cfg.eval.seed).split("evaluate"))
    report = evaluate(pb, cfg.eval.num_bins)
    stem = Path(ckpt_path).with_suffix("")
    out_json = Path(out_json) if out_json else stem.with_name(f"{stem.name}_metrics_{cfg.eval.split}.json")
    out_csv = Path(out_csv) if out_csv else out_json.with_suffix(".bins.csv")
    out_json.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = ["bin,bin_lower,bin_upper,count,accuracy,confidence"]
    for i, b in enumerate(calibration_bins(pb, cfg.eval.num_bins)):
        rows.append(f"{i + 1},{b['bin_lower']:.17g},{b['bin_upper']:.17g},{b['count']},"
                    f"{b['accuracy']:.17g},{b['confidence']:.17g}")
    out_csv.write_text("\n".join(rows) + "\n")
    return report


def _check_arch(ckpt: Checkpoint, ds: Dataset) -> None:
    if ckpt.arch.n_features != ds.num_features or ckpt.arch.num_classes != ds.num_classes:
        raise ValueError(f"checkpoint expects F={ckpt.arch.n_features}, C={ckpt.arch.num_classes}; "
                         f"dataset has F={ds.num_features}, C={ds.num_classes}")


def slice_batch(ds: Dataset, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate the configured fixed minibatches of the test split."""
    s = cfg.slice
    plan = batches(ds, BatchPlan(s.batch_seed, min(s.batch_size, ds.indices("test").size)), "test")
    bad = [b for b in s.batch_ids if not 0 <= b < len(plan)]
    if bad:
        raise ValueError(f"slice batch ids {bad} out of range [0, {len(plan)})")
    idx = np.concatenate([plan[b] for b in s.batch_ids])
    return ds.features[idx], ds.labels[idx]


def slice_spec(cfg: RunConfig) -> SliceSpec:
    s = cfg.slice
    return SliceSpec(s.direction_seed, s.alpha_min, s.alpha_max, s.num_points, tuple(s.batch_ids),
                     s.mc_samples, s.noise)


def slice_run(ckpt_path, cfg: RunConfig | None = None, out_dir=None, log=print) -> dict:
    """Deterministic slice (at the mean for IVON) plus, for IVON, the Bayesian slice.

    Writes ``slice_deterministic.csv`` and, for IVON, ``slice_bayesian.csv``,
    each with a ``.json`` sidecar. Returns ``{kind: roughness}``.
    """
    ckpt = load_checkpoint(ckpt_path)
    cfg = _config_for(ckpt, cfg)
    ds = build_dataset(cfg)
    _check_arch(ckpt, ds)
    x, y = slice_batch(ds, cfg)
    spec = slice_spec(cfg)
    out = Path(out_dir) if out_dir else Path(ckpt_path).parent
    out.mkdir(parents=True, exist_ok=True)
    d = default_direction(spec, ckpt.arch)
    sidecar = {"spec": spec_dict(spec), "checkpoint": str(ckpt_path), "batch_seed": cfg.slice.batch_seed,
               "batch_size": cfg.slice.batch_size, "num_examples": int(len(y))}
    results = {}
    det = deterministic_slice(flatten(ckpt.point_params()), spec, x, y, ckpt.arch, ckpt.bn_states, d,
                              cfg.slice.n_jobs)
    write_slice(det, out / "slice_deterministic.csv", sidecar)
    results["deterministic"] = det.roughness
    log(f"deterministic roughness: {det.roughness:.6g}")
    if ckpt.kind == "ivon":
        bay = bayesian_slice(ckpt.posterior, spec, x, y, ckpt.arch, ckpt.bn_states, d, cfg.slice.n_jobs)
        write_slice(bay, out / "slice_bayesian.csv", sidecar)
        results["bayesian"] = bay.roughness
        log(f"bayesian roughness: {bay.roughness:.6g}")
    return results
