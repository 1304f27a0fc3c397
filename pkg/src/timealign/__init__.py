"""Temporal-misalignment-robust LiDAR-camera BEV 3D detection.

The pipeline ingests a short history of ego-motion-compensated LiDAR sweeps,
predicts the current-time BEV feature with a recurrent attention model,
realigns both the predicted and the (possibly stale) observed features
against a camera-derived reference via modulated deformable sampling, and
detects objects with a center-heatmap head.
"""
from .boxes import Box3D, wrap_angle
from .bev_encoder import (BEVSpec, EncoderConfig, FeatureMap, PillarEncoder,
                          PillarGrid, encode, encode_batch, pillarize)
from .detection_head import (DetectionHead, HeadConfig, HeadOutput, decode,
                             detection_loss, encode_targets)
from .errors import (ConfigError, DataError, DivergenceError, FormatError,
                     GradcheckError, ShapeError, TimeAlignError)
from .fusion import (AlignBranch, BranchOutput, CombineFusion, FusionConfig,
                     GlobalFusion, concat_with_camera)
from .model import (ModelOutputs, PipelineConfig, TimeAlignDetector,
                    desk_config, paper_scale_config)
from .predictor import (PredictionBundle, Predictor, PredictorConfig,
                        SwinLSTMCell, copy_last_baseline, prediction_loss)
from .scene_sim import (CLASS_SIZE_PRIORS, LidarSensorModel, SceneConfig,
                        SceneState, build_frames, generate_scene,
                        render_camera_bev, render_lidar, write_scene_dir)
from .temporal_data import (FrameRecord, LagConfig, PointCloud, SE3Pose,
                            TemporalSample, assemble_history, build_sample,
                            compensate, inject_lag, load_nuscenes_style,
                            stable_seed)
from .train_eval import (APReport, EvalProtocol, SceneDataset, TrainConfig,
                         evaluate, report_table, total_loss, train)

__version__ = "0.1.0"

__all__ = [
    "APReport", "AlignBranch", "BEVSpec", "Box3D", "BranchOutput",
    "CLASS_SIZE_PRIORS", "CombineFusion", "ConfigError", "DataError",
    "DetectionHead", "DivergenceError", "EncoderConfig", "EvalProtocol",
    "FeatureMap", "FormatError", "FrameRecord", "FusionConfig",
    "GlobalFusion", "GradcheckError", "HeadConfig", "HeadOutput",
    "LagConfig", "LidarSensorModel", "ModelOutputs", "PillarEncoder",
    "PillarGrid", "PipelineConfig", "PointCloud", "PredictionBundle",
    "Predictor", "PredictorConfig", "SE3Pose", "SceneConfig", "SceneDataset",
    "SceneState", "ShapeError", "SwinLSTMCell", "TemporalSample",
    "TimeAlignDetector", "TimeAlignError", "TrainConfig", "assemble_history",
    "build_frames", "build_sample", "compensate", "concat_with_camera",
    "copy_last_baseline", "decode", "desk_config", "detection_loss",
    "encode", "encode_batch", "encode_targets", "evaluate", "generate_scene",
    "inject_lag", "load_nuscenes_style", "paper_scale_config", "pillarize",
    "prediction_loss", "render_camera_bev", "render_lidar", "report_table",
    "stable_seed", "total_loss", "train", "wrap_angle", "write_scene_dir",
]
