"""Training and evaluation harness.

Covers the two-stage training loop (prediction-loss weight switches at the
stage boundary), sample preparation with cached pillar grids per possible
lag, center-distance AP with 101-point interpolated precision, the
aligned-vs-lagged evaluation protocol, and plain-text/CSV report tables.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bev_encoder import BEVSpec, pillarize
from .boxes import Box3D
from .detection_head import decode, detection_loss, encode_targets
from .errors import ConfigError, DataError, DivergenceError
from .model import TimeAlignDetector
from .scene_sim import (LidarSensorModel, SceneState, build_frames,
                        render_camera_bev)
from .temporal_data import (FrameRecord, LagConfig, assemble_history,
                            compensate, group_by_scene, load_nuscenes_style,
                            stable_seed)

__all__ = [
    "TrainConfig",
    "EvalProtocol",
    "APReport",
    "SceneDataset",
    "total_loss",
    "train",
    "TrainResult",
    "evaluate",
    "match_class",
    "average_precision",
    "report_table",
]


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple = ((15, 10.0), (10, 0.001))  # (epochs, lambda_pred) pairs
    lr: float = 5e-3
    lr_decay: float = 0.97
    batch_size: int = 8
    lag: LagConfig = field(default_factory=lambda: LagConfig.train(0.5, 1))
    seed: int = 0
    grad_clip: float = 10.0

    def __post_init__(self) -> None:
        if not self.stages:
            raise ConfigError("need at least one training stage")
        for ep, lam in self.stages:
            if ep < 0 or lam < 0:
                raise ConfigError(f"bad stage ({ep}, {lam})")
        if self.total_epochs < 1:
            raise ConfigError("total epochs must be >= 1")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1) or self.batch_size < 1:
            raise ConfigError("bad optimizer settings")

    @property
    def total_epochs(self) -> int:
        return sum(ep for ep, _ in self.stages)

    def lambda_for_epoch(self, epoch: int) -> float:
        """Prediction-loss weight for a 0-based epoch index."""
        done = 0
        for ep, lam in self.stages:
            done += ep
            if epoch < done:
                return lam
        return self.stages[-1][1]


@dataclass(frozen=True)
class EvalProtocol:
    conditions: tuple = (
        ("LiDAR(T)", LagConfig.fixed(0)),
        ("LiDAR Lagging(T-1)", LagConfig.fixed(1)),
    )
    match_distance: float = 2.0
    score_threshold: float = 0.2
    classes: tuple = ("car", "truck", "bus", "pedestrian")
    min_frame: int = 3  # evaluate where full real history exists

    def __post_init__(self) -> None:
        if not self.conditions:
            raise ConfigError("evaluation needs at least one condition")
        if self.match_distance <= 0:
            raise ConfigError("match_distance must be > 0")


@dataclass
class APReport:
    model_label: str
    conditions: dict            # label -> {"per_class": {...}, "mAP": float}
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for label, entry in self.conditions.items():
            for cls, ap in entry["per_class"].items():
                if ap is not None and not (0.0 <= ap <= 1.0):
                    raise DataError(f"{label}/{cls}: AP {ap} outside [0, 1]")

    def mean_ap(self, label: str) -> float:
        return self.conditions[label]["mAP"]

    def to_json(self) -> dict:
        return {"model": self.model_label, "conditions": self.conditions,
                "metadata": self.metadata}

    @classmethod
    def from_json(cls, doc: dict) -> "APReport":
        return cls(model_label=doc["model"], conditions=doc["conditions"],
                   metadata=doc.get("metadata", {}))


def total_loss(l_det, l_pred, lambda_pred):
    """Detection loss plus weighted prediction loss."""
    return l_det + lambda_pred * l_pred


# ---------------------------------------------------------------------------
# dataset


@dataclass(eq=False)
class PreparedSample:
    scene_token: str
    t: int
    hist: np.ndarray            # (3, C0, H, W) float32
    obs_by_lag: dict            # lag k -> (C0, H, W) float32
    camera: np.ndarray          # (Cc, H, W) float32
    heat: np.ndarray            # (num_classes, H, W) float32
    reg: np.ndarray             # (REG_CHANNELS, H, W) float32
    mask: np.ndarray            # (H, W) bool
    gt: list                    # Box3D in the ego frame, inside the BEV extent

    @property
    def max_cached_lag(self) -> int:
        return max(self.obs_by_lag)

    def true_grid(self) -> np.ndarray:
        return self.obs_by_lag[0]


class SceneDataset:
    """Pillar grids, camera features and targets cached per (scene, t).

    Observed grids are cached for every reachable lag 0..max_lag so both
    random lag injection at train time and fixed-lag evaluation reduce to a
    dictionary lookup.
    """

    def __init__(self, scenes: list[SceneState],
                 frames_per_scene: dict[str, list[FrameRecord]],
                 bev: BEVSpec, camera_channels: int, classes: tuple,
                 seed: int = 0, max_lag: int = 3, camera_noise: float = 0.05,
                 camera_jitter: float = 0.0):
        if not scenes:
            raise DataError("dataset needs at least one scene")
        self.bev = bev
        self.classes = tuple(classes)
        self.camera_channels = camera_channels
        self.samples: list[PreparedSample] = []
        for scene in scenes:
            frames = frames_per_scene[scene.scene_token]
            for t in range(len(frames)):
                hist = np.stack([
                    pillarize(c, bev).data.astype(np.float32)
                    for c in assemble_history(frames, t)
                ])
                obs = {}
                for k in range(0, min(max_lag, t) + 1):
                    if k == 0:
                        cloud = frames[t].cloud
                    else:
                        cloud = compensate(frames[t - k].cloud,
                                           frames[t - k].ego_pose,
                                           frames[t].ego_pose)
                    obs[k] = pillarize(cloud, bev).data.astype(np.float32)
                cam = render_camera_bev(scene, t, bev, camera_channels,
                                        seed=seed, noise_sigma=camera_noise,
                                        center_jitter=camera_jitter)
                gt_all = scene.gt_boxes(t)
                gt = [b for b in gt_all
                      if b.class_name in self.classes and bool(bev.contains(b.x, b.y))]
                tm = encode_targets(gt_all, bev, self.classes)
                self.samples.append(PreparedSample(
                    scene_token=scene.scene_token, t=t, hist=hist,
                    obs_by_lag=obs, camera=np.asarray(cam.data, dtype=np.float32),
                    heat=tm.heatmap, reg=tm.regression, mask=tm.mask, gt=gt))

    @classmethod
    def from_scenes(cls, scenes: list[SceneState], sensor: LidarSensorModel,
                    bev: BEVSpec, camera_channels: int, classes: tuple,
                    seed: int = 0, **kw) -> "SceneDataset":
        frames = {s.scene_token: build_frames(s, sensor, seed) for s in scenes}
        return cls(scenes, frames, bev, camera_channels, classes, seed=seed, **kw)

    @classmethod
    def from_dir(cls, data_dir, bev: BEVSpec, camera_channels: int,
                 classes: tuple, seed: int = 0, **kw) -> "SceneDataset":
        root = Path(data_dir)
        doc_path = root / "scenes.json"
        if not doc_path.exists():
            raise DataError(f"{root}: no scenes.json (run the simulator first)")
        scenes = [SceneState.from_json(d) for d in json.loads(doc_path.read_text())]
        frames = group_by_scene(load_nuscenes_style(root))
        missing = [s.scene_token for s in scenes if s.scene_token not in frames]
        if missing:
            raise DataError(f"point files missing for scenes {missing}")
        return cls(scenes, frames, bev, camera_channels, classes, seed=seed, **kw)

    def __len__(self) -> int:
        return len(self.samples)

    def make_batch(self, indices, lags, dtype=torch.float32) -> dict:
        """Stack samples into model-ready tensors; lags[i] picks which cached
        observation sample i presents as current (clamped to availability)."""
        items = [self.samples[i] for i in indices]
        ks = [min(k, it.max_cached_lag) for k, it in zip(lags, items)]
        batch = {
            "hist": torch.from_numpy(np.stack([it.hist for it in items])).to(dtype),
            "obs": torch.from_numpy(
                np.stack([it.obs_by_lag[k] for it, k in zip(items, ks)])).to(dtype),
            "true": torch.from_numpy(
                np.stack([it.true_grid() for it in items])).to(dtype),
            "cam": torch.from_numpy(np.stack([it.camera for it in items])).to(dtype),
            "heat": torch.from_numpy(np.stack([it.heat for it in items])).to(dtype),
            "reg": torch.from_numpy(np.stack([it.reg for it in items])).to(dtype),
            "mask": torch.from_numpy(np.stack([it.mask for it in items])),
            "lags": ks,
            "gt": [it.gt for it in items],
        }
        return batch

    def train_epoch_batches(self, cfg: TrainConfig, epoch: int):
        """Shuffled batches with per-sample lag draws, deterministic in
        (cfg.seed, epoch, scene, t)."""
        order_rng = np.random.default_rng(
            stable_seed("epoch-order", cfg.seed, epoch))
        order = order_rng.permutation(len(self.samples))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            lags = []
            for i in idx:
                s = self.samples[int(i)]
                rng = np.random.default_rng(
                    stable_seed("lag", cfg.seed, epoch, s.scene_token, s.t))
                lags.append(cfg.lag.sample_lag(rng, s.t))
            yield self.make_batch([int(i) for i in idx], lags)

    def eval_indices(self, min_frame: int) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.t >= min_frame]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list               # per-epoch dicts: epoch, lambda_pred, losses
    store: "ParamStore"
    diverged: bool = False


def train(model: TimeAlignDetector, dataset: SceneDataset, cfg: TrainConfig,
          out_dir=None, log=None) -> TrainResult:
    """Two-stage training; raises DivergenceError on a non-finite loss.

    Optimizer: Adam with exponential LR decay (recorded in the history).
    Writes final.ckpt and best.ckpt (lowest epoch loss) when out_dir is set.
    """
    from .nn_core.params import ParamStore  # local import to keep load order simple

    torch.set_num_threads(1)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    model.stop_aux_grads = True
    model.train()

    history = []
    best = math.inf
    best_store = None
    t0 = time.monotonic()
    for epoch in range(cfg.total_epochs):
        lam = cfg.lambda_for_epoch(epoch)
        det_sum = pred_sum = loss_sum = 0.0
        nb = 0
        for batch in dataset.train_epoch_batches(cfg, epoch):
            opt.zero_grad()
            out = model(batch["hist"], batch["obs"], batch["cam"],
                        true_grid=batch["true"])
            l_det = detection_loss(out.head, batch["heat"], batch["reg"],
                                   batch["mask"])
            l_pred = out.l_pred if out.l_pred is not None \
                else torch.zeros((), dtype=l_det.dtype)
            loss = total_loss(l_det, l_pred, lam)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} (l_det="
                    f"{float(l_det):.4g}, l_pred={float(l_pred):.4g})")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            det_sum += float(l_det.detach())
            pred_sum += float(l_pred.detach())
            loss_sum += float(loss.detach())
            nb += 1
        sched.step()
        entry = {
            "epoch": epoch,
            "lambda_pred": lam,
            "loss": loss_sum / nb,
            "l_det": det_sum / nb,
            "l_pred": pred_sum / nb,
            "lr": sched.get_last_lr()[0],
            "sec": round(time.monotonic() - t0, 2),
        }
        history.append(entry)
        if log:
            log(f"epoch {epoch:3d}  lambda={lam:<7g} loss={entry['loss']:.4f} "
                f"(det {entry['l_det']:.4f}, pred {entry['l_pred']:.4f})")
        if entry["loss"] < best:
            best = entry["loss"]
            best_store = model.param_store()

    final_store = model.param_store()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        final_store.save(out / "final.ckpt")
        (best_store or final_store).save(out / "best.ckpt")
        (out / "history.json").write_text(json.dumps(history, indent=1))
    return TrainResult(history=history, store=final_store)


# ---------------------------------------------------------------------------
# evaluation


def match_class(preds: list[Box3D], gts: list[Box3D],
                dist: float) -> tuple[list, list]:
    """Greedy one-to-one matching for one class in one frame: predictions in
    descending score order take the closest still-unmatched ground truth
    within ``dist``. Returns (scores, tp_flags)."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    scores, tps = [], []
    for i in order:
        p = preds[i]
        best_j = -1
        best_d = dist
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            d = p.center_distance(g)
            if d <= best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            tps.append(True)
        else:
            tps.append(False)
        scores.append(p.score)
    return scores, tps


def average_precision(scores: list, tps: list, num_gt: int) -> float | None:
    """101-point interpolated AP; None when the class has no ground truth."""
    if num_gt == 0:
        return None
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(tps, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if np.any(mask) else 0.0
    return ap / 101.0


def evaluate(model: TimeAlignDetector, dataset: SceneDataset,
             protocol: EvalProtocol, batch_size: int = 8,
             model_label: str = "model") -> APReport:
    """Run every protocol condition over the eval frames and build the
    per-class AP table (center-distance matching, dataset-level AP)."""
    idxs = dataset.eval_indices(protocol.min_frame)
    if not idxs:
        raise DataError("empty evaluation set")
    model.eval()
    conditions = {}
    for label, lag_cfg in protocol.conditions:
        per_class_scores = {c: [] for c in protocol.classes}
        per_class_tps = {c: [] for c in protocol.classes}
        per_class_gt = {c: 0 for c in protocol.classes}
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo:lo + batch_size]
            lags = [lag_cfg.sample_lag(np.random.default_rng(0),
                                       dataset.samples[i].t) for i in chunk]
            batch = dataset.make_batch(chunk, lags)
            with torch.no_grad():
                out = model(batch["hist"], batch["obs"], batch["cam"])
            dets = decode(out.head, dataset.bev, dataset.classes,
                          score_threshold=protocol.score_threshold)
            for dlist, gt in zip(dets, batch["gt"]):
                for cname in protocol.classes:
                    p = [d for d in dlist if d.class_name == cname]
                    g = [b for b in gt if b.class_name == cname]
                    scores, tps = match_class(p, g, protocol.match_distance)
                    per_class_scores[cname].extend(scores)
                    per_class_tps[cname].extend(tps)
                    per_class_gt[cname] += len(g)
        per_class = {
            c: average_precision(per_class_scores[c], per_class_tps[c],
                                 per_class_gt[c])
            for c in protocol.classes
        }
        present = [v for v in per_class.values() if v is not None]
        conditions[label] = {
            "per_class": per_class,
            "mAP": float(np.mean(present)) if present else 0.0,
            "num_gt": per_class_gt,
        }
    return APReport(model_label=model_label, conditions=conditions,
                    metadata={"frames": len(idxs),
                              "match_distance": protocol.match_distance})


def report_table(reports: list[APReport], fmt: str = "txt") -> str:
    """Rows = (model, condition), columns = per-class AP plus mAP."""
    if fmt not in ("txt", "csv"):
        raise ConfigError(f"format must be txt or csv, got {fmt!r}")
    classes: list = []
    for rep in reports:
        for entry in rep.conditions.values():
            for c in entry["per_class"]:
                if c not in classes:
                    classes.append(c)
    header = ["model", "condition"] + [f"AP-{c}" for c in classes] + ["mAP"]
    rows = []
    for rep in reports:
        for label, entry in rep.conditions.items():
            cells = [rep.model_label, label]
            for c in classes:
                ap = entry["per_class"].get(c)
                cells.append("-" if ap is None else f"{ap:.3f}")
            cells.append(f"{entry['mAP']:.3f}")
            rows.append(cells)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()

    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
