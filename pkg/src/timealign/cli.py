"""Command line entry points.

Subcommands: simulate (write a scene dataset), train, eval, gradcheck,
report. Exit codes: 0 success, 2 configuration error, 3 data or file-format
error, 4 numerical divergence (training blow-up or a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .bev_encoder import BEVSpec, EncoderConfig
from .errors import (ConfigError, DataError, DivergenceError, FormatError,
                     TimeAlignError)
from .model import PipelineConfig, TimeAlignDetector
from .predictor import PredictorConfig
from .scene_sim import LidarSensorModel, SceneConfig, generate_scene, write_scene_dir
from .temporal_data import LagConfig
from .train_eval import (APReport, EvalProtocol, SceneDataset, TrainConfig,
                         evaluate, report_table, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


# ---------------------------------------------------------------------------
# config document helpers (all keys optional; defaults are the desk scale)


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return doc


def bev_from(doc: dict) -> BEVSpec:
    sec = doc.get("bev", {})
    return BEVSpec.square(float(sec.get("extent", 16.0)),
                          float(sec.get("resolution", 1.0)))


def classes_from(doc: dict) -> tuple:
    return tuple(doc.get("classes", ("car", "truck", "bus", "pedestrian")))


def sensor_from(doc: dict) -> LidarSensorModel:
    sec = doc.get("sensor", {})
    return LidarSensorModel(
        points_per_object=int(sec.get("points_per_object", 120)),
        ground_points=int(sec.get("ground_points", 256)),
        range_max=float(sec.get("range_max", 60.0)),
        noise_sigma=float(sec.get("noise_sigma", 0.0)),
        dropout_prob=float(sec.get("dropout_prob", 0.0)),
    )


def scene_config_from(doc: dict, seed: int) -> SceneConfig:
    sec = doc.get("scene", {})
    return SceneConfig(
        num_objects=int(sec.get("num_objects", 4)),
        classes=classes_from(doc),
        area_extent=float(sec.get("area_extent", 20.0)),
        duration=int(sec.get("duration", 12)),
        frame_period=float(sec.get("frame_period", 0.5)),
        speed_range=sec.get("speed_range"),
        seed=seed,
    )


def pipeline_from(doc: dict, baseline: bool = False) -> PipelineConfig:
    bev = bev_from(doc)
    cam = doc.get("camera", {})
    mdl = doc.get("model", {})
    enc = EncoderConfig(
        hidden_channels=int(mdl.get("encoder_hidden", 32)),
        out_channels=int(mdl.get("lidar_channels", 16)),
    )
    predictor = None
    if "predictor" in mdl:
        p = mdl["predictor"]
        predictor = PredictorConfig(
            in_channels=enc.out_channels, grid_hw=(bev.H, bev.W),
            patch_size=int(p.get("patch_size", 2)),
            embed_dim=int(p.get("embed_dim", 96)),
            depths=int(p.get("depths", 2)),
            num_heads=int(p.get("num_heads", 4)),
            window_size=int(p.get("window_size", 4)),
            num_cells=int(p.get("num_cells", 1)),
        )
    return PipelineConfig(
        bev=bev,
        classes=classes_from(doc),
        camera_channels=int(cam.get("channels", 8)),
        encoder=enc,
        predictor=predictor,
        baseline=bool(mdl.get("baseline", baseline)),
    )


def lag_from(sec: dict) -> LagConfig:
    weights = sec.get("weights")
    return LagConfig.train(float(sec.get("alpha", 0.5)),
                           int(sec.get("max_lag", 1)),
                           tuple(weights) if weights else None)


def train_config_from(doc: dict) -> TrainConfig:
    sec = doc.get("train", {})
    stages = tuple((int(e), float(l)) for e, l in
                   sec.get("stages", [[15, 10.0], [10, 0.001]]))
    return TrainConfig(
        stages=stages,
        lr=float(sec.get("lr", 5e-3)),
        lr_decay=float(sec.get("lr_decay", 0.97)),
        batch_size=int(sec.get("batch_size", 8)),
        lag=lag_from(sec.get("lag", {})),
        seed=int(doc.get("seed", 0)),
        grad_clip=float(sec.get("grad_clip", 10.0)),
    )


def protocol_from(doc: dict) -> EvalProtocol:
    sec = doc.get("eval", {})
    return EvalProtocol(
        match_distance=float(sec.get("match_distance", 2.0)),
        score_threshold=float(sec.get("score_threshold", 0.2)),
        classes=classes_from(doc),
        min_frame=int(sec.get("min_frame", 3)),
    )


def _camera_meta(doc: dict) -> dict:
    cam = doc.get("camera", {})
    return {"channels": int(cam.get("channels", 8)),
            "noise_sigma": float(cam.get("noise_sigma", 0.05)),
            "center_jitter": float(cam.get("center_jitter", 0.0))}


def _dataset_from_dir(data_dir, doc: dict) -> SceneDataset:
    meta_path = Path(data_dir) / "sim_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    merged = dict(meta)
    merged.update(doc)
    cam = _camera_meta(merged)
    return SceneDataset.from_dir(
        data_dir, bev_from(merged), cam["channels"], classes_from(merged),
        seed=int(merged.get("seed", 0)), camera_noise=cam["noise_sigma"],
        camera_jitter=cam["center_jitter"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    doc = load_config(args.config)
    seed = int(doc.get("seed", 0))
    num_scenes = int(doc.get("simulate", {}).get("num_scenes", 5))
    sensor = sensor_from(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("poses.json", "scenes.json"):
        p = out / name
        if p.exists():
            p.unlink()
    for i in range(num_scenes):
        scene = generate_scene(scene_config_from(doc, seed + i),
                               scene_token=f"scene-{i:03d}")
        write_scene_dir(scene, sensor, out, seed=seed)
    meta = {"seed": seed, "bev": doc.get("bev", {}), "camera": doc.get("camera", {}),
            "classes": list(classes_from(doc)), "num_scenes": num_scenes}
    (out / "sim_meta.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {num_scenes} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    cfg = train_config_from(doc)
    torch.manual_seed(cfg.seed)
    model = TimeAlignDetector(pipeline_from(doc, baseline=args.baseline))
    dataset = _dataset_from_dir(args.data, doc)
    if args.init:
        from .nn_core.params import load_partial_checkpoint
        store = model.param_store()
        report = load_partial_checkpoint(store, args.init)
        model.load_param_store(store)
        print(f"init: loaded {len(report.loaded)} tensors, "
              f"skipped {len(report.skipped)}")
        for name, reason in report.skipped:
            print(f"  skip {name}: {reason}")
    out_dir = args.out or (Path(args.data) / "run")
    result = train(model, dataset, cfg, out_dir=out_dir, log=print)
    print(f"finished {len(result.history)} epochs; "
          f"checkpoints in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = load_config(args.config) if args.config else {}
    dataset = _dataset_from_dir(args.data, doc)
    pipeline = pipeline_from(
        json.loads((Path(args.data) / "sim_meta.json").read_text())
        if not doc and (Path(args.data) / "sim_meta.json").exists() else doc,
        baseline=args.baseline)
    model = TimeAlignDetector(pipeline)
    from .nn_core.params import load_partial_checkpoint
    store = model.param_store()
    report = load_partial_checkpoint(store, args.ckpt)
    if report.skipped:
        for name, reason in report.skipped:
            print(f"  skip {name}: {reason}", file=sys.stderr)
    if not report.loaded:
        raise DataError(f"{args.ckpt}: no usable tensors for this model")
    model.load_param_store(store)

    k = args.lag
    label = "LiDAR(T)" if k == 0 else f"LiDAR Lagging(T-{k})"
    base = protocol_from(doc)
    protocol = EvalProtocol(conditions=((label, LagConfig.fixed(k)),),
                            match_distance=base.match_distance,
                            score_threshold=base.score_threshold,
                            classes=base.classes, min_frame=base.min_frame)
    rep = evaluate(model, dataset, protocol,
                   model_label=args.label or ("baseline" if args.baseline
                                              else "timealign"))
    print(report_table([rep]))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rep.to_json(), indent=1))
        print(f"wrote {args.out}")
    return EXIT_OK


def _gradcheck_registry() -> dict:
    """Small float64 instances of every differentiable stage."""
    from torch import nn

    from .detection_head import DetectionHead, HeadConfig, detection_loss
    from .fusion import AlignBranch, CombineFusion, FusionConfig, GlobalFusion
    from .bev_encoder import FeatureMap, PillarEncoder
    from .nn_core.attention import SwinBlock, WindowAttentionConfig
    from .nn_core.gradcheck import gradcheck
    from .nn_core.kernels import conv2d, deformable_conv, grid_sample_bilinear
    from .predictor import Predictor, prediction_loss

    # each check reseeds both RNG streams so single-module runs reproduce
    # exactly what the full sweep sees
    def fresh(seed):
        torch.manual_seed(seed)
        g = torch.Generator().manual_seed(seed)

        def rand(*shape):
            return torch.randn(*shape, generator=g, dtype=torch.float64)

        return g, rand

    def chk_conv(seed):
        _, rand = fresh(seed)
        return gradcheck(lambda ts: conv2d(ts["x"], ts["w"], ts["b"], padding=1),
                         {"x": rand(1, 2, 5, 5), "w": rand(3, 2, 3, 3),
                          "b": rand(3)}, seed=seed)

    def chk_sample(seed):
        g, rand = fresh(seed)
        loc = 0.35 + 3.17 * torch.rand(1, 4, 4, 2, generator=g, dtype=torch.float64)
        return gradcheck(lambda ts: grid_sample_bilinear(ts["x"], ts["loc"]),
                         {"x": rand(1, 2, 5, 5), "loc": loc}, seed=seed)

    def chk_deform(seed):
        _, rand = fresh(seed)
        off = 0.3 * rand(1, 18, 5, 5) + 0.137
        mod = torch.sigmoid(rand(1, 9, 5, 5))
        return gradcheck(
            lambda ts: deformable_conv(ts["x"], ts["w"], ts["b"], ts["off"], ts["mod"]),
            {"x": rand(1, 2, 5, 5), "w": rand(2, 2, 3, 3), "b": rand(2),
             "off": off, "mod": mod}, seed=seed)

    def chk_attention(seed):
        _, rand = fresh(seed)
        blk = SwinBlock(WindowAttentionConfig(embed_dim=8, num_heads=2,
                                              window_size=2, shifted=True)).double()
        return gradcheck(blk, {"tokens": rand(1, 25, 8)},
                         forward=lambda m, ins: m(ins["tokens"], (5, 5)), seed=seed)

    def chk_encoder(seed):
        from .bev_encoder import EncoderConfig as EC
        _, rand = fresh(seed)
        enc = PillarEncoder(EC(in_channels=3, hidden_channels=4, out_channels=4)).double()
        return gradcheck(enc, {"x": rand(1, 3, 6, 6)}, seed=seed)

    def chk_predictor(seed):
        _, rand = fresh(seed)
        cfg = PredictorConfig(in_channels=3, grid_hw=(8, 8), patch_size=2,
                              embed_dim=8, depths=2, num_heads=2, window_size=2)
        pred = Predictor(cfg).double()
        # labels are detached inside the loss, so they stay fixed constants
        # here; the rollout consumes only the earliest history feature
        labels = [rand(1, 3, 8, 8) for _ in range(3)]
        hist_rest = [rand(1, 3, 8, 8) for _ in range(2)]

        def fwd(m, ins):
            bundle = m.rollout([ins["h0"], *hist_rest])
            return prediction_loss(bundle, labels)

        return gradcheck(pred, {"h0": rand(1, 3, 8, 8)},
                         forward=fwd, max_elems_per_tensor=40, seed=seed)

    def chk_fusion(seed):
        g, rand = fresh(seed)
        cfg = FusionConfig(lidar_channels=3, camera_channels=2,
                           offset_hidden=4, fuse_hidden=6)
        branch_p, branch_o = AlignBranch(cfg).double(), AlignBranch(cfg).double()
        comb, glob = CombineFusion(cfg).double(), GlobalFusion(cfg).double()
        # move off the zero-offset init: at exactly integer tap locations the
        # bilinear kernel has a kink where finite differences are meaningless
        with torch.no_grad():
            for br in (branch_p, branch_o):
                br.offset_conv2.weight.normal_(0.0, 0.05, generator=g)
                br.offset_conv2.bias.normal_(0.1, 0.05, generator=g)
        wrap = nn.ModuleDict({"p": branch_p, "o": branch_o, "c": comb, "g": glob})

        def fwd(m, ins):
            cam = FeatureMap(data=ins["cam"], role="camera")
            bp = m["p"](FeatureMap(data=ins["fp"], role="predicted"), cam)
            bo = m["o"](FeatureMap(data=ins["fo"], role="observed"), cam)
            return m["g"](m["c"](bp, bo), cam).data

        return gradcheck(wrap, {"fp": rand(1, 3, 6, 6), "fo": rand(1, 3, 6, 6),
                                "cam": rand(1, 2, 6, 6)},
                         forward=fwd, max_elems_per_tensor=40, seed=seed)

    def chk_head(seed):
        _, rand = fresh(seed)
        head = DetectionHead(HeadConfig(in_channels=4, num_classes=2, hidden=6)).double()
        heat = torch.zeros(1, 2, 6, 6, dtype=torch.float64)
        heat[0, 0, 2, 3] = 1.0
        reg = rand(1, 6, 6, 6)
        mask = torch.zeros(1, 6, 6, dtype=torch.bool)
        mask[0, 2, 3] = True

        def fwd(m, ins):
            return detection_loss(m(FeatureMap(data=ins["x"], role="fused")),
                                  heat, reg, mask)

        return gradcheck(head, {"x": rand(1, 4, 6, 6)},
                         forward=fwd, max_elems_per_tensor=60, seed=seed)

    return {
        "conv2d": chk_conv,
        "grid-sample": chk_sample,
        "deformable-conv": chk_deform,
        "attention": chk_attention,
        "encoder": chk_encoder,
        "predictor": chk_predictor,
        "fusion": chk_fusion,
        "head": chk_head,
    }


def cmd_gradcheck(args) -> int:
    registry = _gradcheck_registry()
    if args.module:
        if args.module not in registry:
            raise ConfigError(
                f"unknown module {args.module!r}; choose from {sorted(registry)}")
        names = [args.module]
    else:
        names = list(registry)
    torch.set_num_threads(1)
    failed = []
    for name in names:
        rep = registry[name](seed=args.seed)
        status = "PASS" if rep.passed else "FAIL"
        print(f"{name:16s} {status}  max rel err {rep.max_rel_err:.3e} "
              f"({rep.checked_elems} elements)")
        if not rep.passed:
            failed.append(name)
            print(rep.summary())
    if failed:
        raise DivergenceError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.in_dir)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    reports = []
    for p in sorted(root.glob("*.json")):
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "conditions" in doc and "model" in doc:
            reports.append(APReport.from_json(doc))
    if not reports:
        raise DataError(f"no evaluation reports found in {root}")
    print(report_table(reports, fmt=args.format))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="timealign",
        description="Temporal-misalignment-robust BEV detection toolkit")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="generate a scene dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a simulated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="warm-start checkpoint")
    p.add_argument("--out", default=None, help="run directory (default <data>/run)")
    p.add_argument("--baseline", action="store_true",
                   help="LiDAR-only fusion path (no prediction branch)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at a fixed lag")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lag", type=int, choices=(0, 1, 2, 3), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.add_argument("--label", default=None)
    p.add_argument("--baseline", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="tabulate evaluation reports")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--format", choices=("txt", "csv"), default="txt")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TimeAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
