"""Roadside LiDAR placement by perceptual-gain maximisation."""

__version__ = "0.1.0"

from .evaluation import (APResult, Detection, ProxyConfig, average_precision, bev_iou,
                         compute_ap, evaluate_placement, match_detections, nms, proxy_detect)
from .exceptions import (BudgetError, ContractError, DivergenceError, FrameError, ParameterError,
                         ParseError, RLPlaceError, RLPlaceIOError, ShapeError, ValidationError,
                         VersionError)
from .lidar import (LidarSpec, PointCloud, RangeBox, SweepCache, cast_frame, cast_rays,
                    crop_to_range, fuse_clouds, read_cloud, strip_vehicle_points,
                    transform_cloud, write_cloud)
from .optimizer import (FunctionScorer, GainStep, NoisyOrMapScorer, PerceptionScorer,
                        PlacementSelector, Scorer, brute_force_select, coverage_density_select,
                        greedy_select, perceptual_gain, random_select, submodularity_audit)
from .perception import (AbilityMap, ConfidenceMap, FeatureExtractor, FeatureGrid,
                         PerceptionPredictor, PredictorModel, SupervisionMask, TrainConfig,
                         XhatConfig, ability_for_placement, build_mask, build_training_samples,
                         extract_features, loss_and_grad, mean_neighbor_difference,
                         load_model, loss_smooth, loss_sup, noisy_or, perception_score,
                         predict_ability, save_model, surrogate_confidence, train_predictor)
from .report import EvalRecord, emit_report
from .scene import (CandidateMount, GridSpec, OrientedBox, Pose, Scenario, SceneParams,
                    TrafficFrame, Vec3, Vehicle, generate_scene, load_scenario, save_scenario)
