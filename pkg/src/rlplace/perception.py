"""Perception predictor: per-cell ability maps learned from vehicle-free clouds.

The predictor maps a vehicle-free point cloud to an ability map ``A`` whose
cell (i, j) estimates how well a vehicle standing there would be detected.
It is a logistic model over four hand-made cell features, trained against a
confidence map ``C`` under a thresholded supervision mask ``K`` plus a
neighbour-smoothing penalty. Summing ``A`` gives the perception score.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (ContractError, DivergenceError, ParameterError, ParseError,
                         RLPlaceIOError, ShapeError, ValidationError, VersionError)
from .geometry import clip_convex, polygon_area
from .lidar import (STATIC, WORLD, SweepCache, fuse_clouds, selective_fusion,
                    strip_vehicle_points, transform_cloud)
from .scene import Pose

N_FEATURES = 4
CONFIDENCE_SCALE = 20.0
MODEL_VERSION = "rlplace.model/1"


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def point_confidence(n_points, n0=CONFIDENCE_SCALE):
    """Detection confidence for a vehicle with ``n_points`` returns: 1 - exp(-n/n0)."""
    return 1.0 - math.exp(-n_points / n0)


# -- grid containers ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _GridValues:
    grid: object
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape[:2] != self.grid.shape:
            raise ShapeError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        self._check(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def _check(self, v):
        pass


class FeatureGrid(_GridValues):
    """Per-cell features: log(1+count), mean z, z span, occupied-neighbour fraction."""

    def _check(self, v):
        if v.shape != self.grid.shape + (N_FEATURES,):
            raise ShapeError(f"feature grid must be H x W x {N_FEATURES}")


class AbilityMap(_GridValues):
    def _check(self, v):
        if v.ndim != 2 or not np.all((v > 0.0) & (v < 1.0)):
            raise ValidationError("ability values must lie in the open interval (0, 1)")


class ConfidenceMap(_GridValues):
    def _check(self, v):
        if v.ndim != 2 or not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValidationError("confidence values must lie in [0, 1]")


class SupervisionMask(_GridValues):
    def _check(self, v):
        if v.ndim != 2 or not np.all((v == 0.0) | (v == 1.0)):
            raise ValidationError("supervision mask must be binary")


# -- features ----------------------------------------------------------------

def _neighbour_sum(arr):
    """Sum over the 8-cell ring, treating out-of-grid cells as zero."""
    p = np.pad(arr, 1)
    h, w = arr.shape
    total = np.zeros_like(arr)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                total += p[1 + di:1 + di + h, 1 + dj:1 + dj + w]
    return total


def extract_features(xhat, grid):
    """Bin a vehicle-free cloud (scene frame) into a :class:`FeatureGrid`."""
    if np.any(xhat.labels != STATIC):
        raise ContractError("feature extraction expects a vehicle-free cloud")
    h, w = grid.shape
    feats = np.zeros((h, w, N_FEATURES))
    if len(xhat):
        i, j = grid.cells_of(xhat.xyz[:, :2])
        inside = i >= 0
        flat = i[inside] * w + j[inside]
        z = xhat.xyz[inside, 2]
        count = np.bincount(flat, minlength=h * w).astype(float)
        zsum = np.bincount(flat, weights=z, minlength=h * w)
        zmin = np.full(h * w, np.inf)
        zmax = np.full(h * w, -np.inf)
        np.minimum.at(zmin, flat, z)
        np.maximum.at(zmax, flat, z)
        occ = count > 0
        mean_z = np.zeros(h * w)
        span = np.zeros(h * w)
        mean_z[occ] = zsum[occ] / count[occ]
        span[occ] = zmax[occ] - zmin[occ]
        occ2 = occ.reshape(h, w).astype(float)
        ring = _neighbour_sum(occ2) / _neighbour_sum(np.ones((h, w)))
        feats[..., 0] = np.log1p(count).reshape(h, w)
        feats[..., 1] = mean_z.reshape(h, w)
        feats[..., 2] = span.reshape(h, w)
        feats[..., 3] = np.where(occ2 > 0, ring, 0.0)
    return FeatureGrid(grid, feats)


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer turning vehicle-free clouds into feature tensors."""

    def __init__(self, grid=None):
        self.grid = grid

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if self.grid is None:
            raise ParameterError("FeatureExtractor needs a grid")
        return np.stack([extract_features(c, self.grid).values for c in X])


# -- model -------------------------------------------------------------------

@dataclass(frozen=True)
class PredictorModel:
    weights: tuple
    bias: float
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != N_FEATURES or not all(math.isfinite(v) for v in w + (float(self.bias),)):
            raise ValidationError("model needs 4 finite weights and a finite bias")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def theta(self):
        return np.array(self.weights + (self.bias,))


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.1
    threshold: float = 0.2
    lr: float = 0.1
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError("gamma must be non-negative")
        if not 0 < self.threshold < 1:
            raise ParameterError("threshold must lie in (0, 1)")
        if not self.lr > 0:
            raise ParameterError("lr must be positive")
        if self.epochs <= 0:
            raise ParameterError("epochs must be positive")


def _feature_array(feats):
    return feats.values if isinstance(feats, FeatureGrid) else np.asarray(feats, dtype=float)


def predict_ability(model, feats):
    """A = sigmoid(w . f + b) per cell."""
    z = _feature_array(feats) @ np.asarray(model.weights) + model.bias
    a = sigmoid(z)
    # keep the open-interval invariant when the logit saturates in float64
    a = np.clip(a, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return AbilityMap(feats.grid, a)


def perception_score(ability):
    """Perception score k: the sum over every cell of an ability map."""
    values = ability.values if hasattr(ability, "values") else np.asarray(ability)
    return float(np.sum(values))


def build_mask(confidence, threshold=0.2):
    if not 0 < threshold < 1:
        raise ParameterError("threshold must lie in (0, 1)")
    return SupervisionMask(confidence.grid, (confidence.values > threshold).astype(float))


def _values(x):
    return x.values if hasattr(x, "values") else np.asarray(x, dtype=float)


def loss_sup(ability, confidence, mask):
    """Mean absolute error between C and A over the masked cells (0 for an empty mask)."""
    a, c, k = _values(ability), _values(confidence), _values(mask)
    if not a.shape == c.shape == k.shape:
        raise ShapeError(f"grid mismatch {a.shape} / {c.shape} / {k.shape}")
    return float(np.sum(k * np.abs(c - a)) / max(1.0, float(np.sum(k))))


def loss_smooth(ability):
    """Mean over cells of the summed absolute differences to in-bounds 4-neighbours."""
    a = _values(ability)
    if a.ndim != 2 or a.shape[0] < 2 or a.shape[1] < 2:
        raise ShapeError("smoothing loss needs at least a 2 x 2 grid")
    h, w = a.shape
    # every adjacent pair appears once from each side
    pairs = np.abs(np.diff(a, axis=0)).sum() + np.abs(np.diff(a, axis=1)).sum()
    return float(2.0 * pairs / (h * w))


def mean_neighbor_difference(ability):
    """Average |A_c - A_n| over ordered in-bounds 4-neighbour pairs."""
    a = _values(ability)
    dv, dh = np.abs(np.diff(a, axis=0)), np.abs(np.diff(a, axis=1))
    return float((dv.sum() + dh.sum()) / (dv.size + dh.size))


def loss_and_grad(theta, features, confidences, masks, gamma):
    """Total loss mean_s(L_sup + gamma * L_smooth) and its gradient in (w1..w4, b).

    ``features`` is (n, H, W, 4); ``confidences`` and ``masks`` are (n, H, W).
    At kinks of |.| the subgradient sign(0) = 0 is used.
    """
    theta = np.asarray(theta, dtype=float)
    n, h, w = confidences.shape
    a = sigmoid(features @ theta[:N_FEATURES] + theta[N_FEATURES])
    nk = np.maximum(1.0, masks.sum(axis=(1, 2)))[:, None, None]
    resid = confidences - a
    sup = (masks * np.abs(resid)).sum(axis=(1, 2)) / nk[:, 0, 0]
    d_a = -masks * np.sign(resid) / nk

    dv = np.diff(a, axis=1)
    dh = np.diff(a, axis=2)
    scale = 2.0 / (h * w)
    smooth = scale * (np.abs(dv).sum(axis=(1, 2)) + np.abs(dh).sum(axis=(1, 2)))
    sv, sh = np.sign(dv) * scale * gamma, np.sign(dh) * scale * gamma
    d_a[:, 1:, :] += sv
    d_a[:, :-1, :] -= sv
    d_a[:, :, 1:] += sh
    d_a[:, :, :-1] -= sh

    loss = float(np.mean(sup + gamma * smooth))
    d_z = d_a * a * (1.0 - a) / n
    grad = np.empty(N_FEATURES + 1)
    grad[:N_FEATURES] = np.einsum("shw,shwf->f", d_z, features)
    grad[N_FEATURES] = d_z.sum()
    return loss, grad


class PerceptionPredictor(BaseEstimator):
    """Logistic ability predictor trained by full-batch gradient descent.

    Each epoch takes a gradient step of size ``lr``; when that step would
    raise the loss it is halved (up to ``max_halvings`` times), so the
    recorded loss never increases. Training stops early once no halving
    helps.

    Parameters
    ----------
    gamma : float
        Weight of the smoothing term.
    threshold : float
        Cells with confidence strictly above this are supervised.
    lr : float
        Initial step size per epoch.
    epochs : int
        Maximum number of gradient steps.
    seed : int
        Recorded in the model metadata; training itself is deterministic.
    """

    def __init__(self, gamma=0.1, threshold=0.2, lr=0.1, epochs=200, seed=0, max_halvings=30):
        self.gamma = gamma
        self.threshold = threshold
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.max_halvings = max_halvings

    def _validate(self, X, y):
        feats = np.asarray([_feature_array(f) for f in X], dtype=float)
        conf = np.asarray([_values(c) for c in y], dtype=float)
        if feats.ndim != 4 or feats.shape[-1] != N_FEATURES:
            raise ShapeError("X must be a sequence of H x W x 4 feature grids")
        if conf.shape != feats.shape[:3]:
            raise ShapeError("y must hold one H x W confidence map per feature grid")
        if feats.shape[0] == 0:
            raise ParameterError("at least one training sample is required")
        if not (np.all(np.isfinite(feats)) and np.all((conf >= 0) & (conf <= 1))):
            raise ParameterError("features must be finite and confidences in [0, 1]")
        return feats, conf

    def fit(self, X, y):
        TrainConfig(self.gamma, self.threshold, self.lr, self.epochs, self.seed)
        feats, conf = self._validate(X, y)
        masks = (conf > self.threshold).astype(float)
        theta = np.zeros(N_FEATURES + 1)
        loss, grad = loss_and_grad(theta, feats, conf, masks, self.gamma)
        history = [loss]
        for _ in range(self.epochs):
            step = self.lr
            accepted = False
            for _ in range(self.max_halvings + 1):
                cand = theta - step * grad
                c_loss, c_grad = loss_and_grad(cand, feats, conf, masks, self.gamma)
                if not math.isfinite(c_loss):
                    raise DivergenceError(f"non-finite loss at step size {step}")
                if c_loss <= loss:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            theta, loss, grad = cand, c_loss, c_grad
            history.append(loss)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite training loss")
        self.coef_ = theta[:N_FEATURES].copy()
        self.intercept_ = float(theta[N_FEATURES])
        self.loss_history_ = history
        self.model_ = PredictorModel(
            tuple(self.coef_), self.intercept_,
            {"seed": self.seed, "epochs": self.epochs, "lr": self.lr, "gamma": self.gamma,
             "threshold": self.threshold, "final_loss": loss, "steps": len(history) - 1})
        return self

    def predict(self, X):
        """Ability values for one (H, W, 4) grid or a stack of them."""
        check_is_fitted(self, "model_")
        arr = _feature_array(X) if isinstance(X, FeatureGrid) else np.asarray(
            [_feature_array(f) for f in X] if isinstance(X, (list, tuple)) else X, dtype=float)
        return sigmoid(arr @ self.coef_ + self.intercept_)

    def score(self, X, y):
        """Negative training objective (higher is better)."""
        check_is_fitted(self, "model_")
        feats, conf = self._validate(X, y)
        masks = (conf > self.threshold).astype(float)
        theta = np.append(self.coef_, self.intercept_)
        return -loss_and_grad(theta, feats, conf, masks, self.gamma)[0]


def train_predictor(samples, cfg=None):
    """Fit a :class:`PredictorModel` on ``(xhat_cloud, ConfidenceMap)`` pairs.

    Returns the model and the recorded loss sequence.
    """
    cfg = cfg or TrainConfig()
    samples = list(samples)
    if not samples:
        raise ParameterError("train_predictor needs at least one sample")
    X = [extract_features(xhat, conf.grid) for xhat, conf in samples]
    y = [conf for _, conf in samples]
    est = PerceptionPredictor(cfg.gamma, cfg.threshold, cfg.lr, cfg.epochs, cfg.seed).fit(X, y)
    return est.model_, est.loss_history_


# -- placements --------------------------------------------------------------

@dataclass(frozen=True)
class XhatConfig:
    """How the vehicle-free input is assembled for a placement.

    ``mode`` is ``"strip"`` (drop vehicle returns of the frame) or
    ``"selective"`` (additionally refill each vehicle footprint with static
    returns from ``fusion_frames``).
    """

    mode: str = "strip"
    fusion_frames: tuple = ()

    def __post_init__(self):
        if self.mode not in ("strip", "selective"):
            raise ParameterError(f"unknown x-hat mode {self.mode!r}")
        object.__setattr__(self, "fusion_frames", tuple(int(f) for f in self.fusion_frames))


def _check_placement(placement):
    placement = [int(p) for p in placement]
    if not placement:
        raise ParameterError("placement must contain at least one mount")
    if len(set(placement)) != len(placement):
        raise ParameterError(f"placement has duplicate mounts {placement}")
    return placement


def fused_cloud(cache, frame_index, placement):
    """Fuse the placement's sweeps in the ego frame (the first selected mount)."""
    placement = _check_placement(placement)
    scenario = cache.scenario
    ego_mount = scenario.mount(placement[0])
    ego = Pose(ego_mount.pose.position, ego_mount.pose.yaw, name="ego")
    clouds = []
    for mid in placement:
        mount = scenario.mount(mid)
        clouds.append(transform_cloud(cache.sweep(frame_index, mid), mount.pose, ego))
    return fuse_clouds(clouds), ego


def scene_frame_cloud(cache, frame_index, placement):
    """Fused placement cloud re-expressed in the scene frame, where the ROI grid lives."""
    fused, ego = fused_cloud(cache, frame_index, placement)
    return transform_cloud(fused, ego, WORLD)


def vehicle_free_cloud(cache, frame_index, placement, xhat=None):
    xhat = xhat or XhatConfig()
    cloud = scene_frame_cloud(cache, frame_index, placement)
    if xhat.mode == "strip":
        return strip_vehicle_points(cloud)
    others = [scene_frame_cloud(cache, f, placement)
              for f in xhat.fusion_frames if f != frame_index]
    boxes = [v.box for v in cache.scenario.frame(frame_index).vehicles]
    return selective_fusion(cloud, others, boxes)


def _footprint_cells(grid, box):
    corners = box.corners_bev()
    lo_i = max(0, int(math.floor((corners[:, 1].min() - grid.y0) / grid.cell_size)))
    hi_i = min(grid.height - 1, int(math.floor((corners[:, 1].max() - grid.y0) / grid.cell_size)))
    lo_j = max(0, int(math.floor((corners[:, 0].min() - grid.x0) / grid.cell_size)))
    hi_j = min(grid.width - 1, int(math.floor((corners[:, 0].max() - grid.x0) / grid.cell_size)))
    cells = []
    for i in range(lo_i, hi_i + 1):
        for j in range(lo_j, hi_j + 1):
            if polygon_area(clip_convex(grid.cell_polygon(i, j), corners)) > 1e-12:
                cells.append((i, j))
    return cells


def confidence_from_counts(frame, counts, grid, n0=CONFIDENCE_SCALE):
    """Write each vehicle's point-count confidence over its footprint cells (max on overlap)."""
    values = np.zeros(grid.shape)
    for veh in frame.vehicles:
        c = point_confidence(counts.get(veh.vehicle_id, 0), n0)
        if c <= 0.0:
            continue
        for i, j in _footprint_cells(grid, veh.box):
            values[i, j] = max(values[i, j], c)
    return ConfidenceMap(grid, values)


def surrogate_confidence(scenario, frame_index, placement, spec=None, grid=None, cache=None):
    """Stand-in for a detector's confidence map: 1 - exp(-n_v / 20) on each vehicle footprint."""
    placement = _check_placement(placement)
    cache = cache or SweepCache(scenario, spec)
    grid = grid or scenario.grid
    counts = {}
    for mid in placement:
        for vid, n in cache.sweep(frame_index, mid).vehicle_counts().items():
            counts[vid] = counts.get(vid, 0) + n
    return confidence_from_counts(scenario.frame(frame_index), counts, grid)


def noisy_or(maps):
    """Cellwise 1 - prod(1 - A_p)."""
    maps = list(maps)
    miss = np.ones_like(_values(maps[0]))
    for m in maps:
        miss = miss * (1.0 - _values(m))
    return 1.0 - miss


def ability_for_placement(scenario, frame_index, placement, model, mode="fused",
                          spec=None, cache=None, xhat=None):
    """Ability map of a placement in one frame.

    ``fused`` runs the predictor on the placement's fused vehicle-free cloud.
    ``noisyor`` predicts each mount alone and combines cellwise with noisy-OR.
    """
    placement = _check_placement(placement)
    cache = cache or SweepCache(scenario, spec)
    grid = scenario.grid
    if mode == "fused":
        xh = vehicle_free_cloud(cache, frame_index, placement, xhat)
        return predict_ability(model, extract_features(xh, grid))
    if mode == "noisyor":
        singles = [predict_ability(model, extract_features(
            vehicle_free_cloud(cache, frame_index, [p], xhat), grid)) for p in placement]
        if len(singles) == 1:
            return singles[0]
        combined = np.clip(noisy_or(singles), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        return AbilityMap(grid, combined)
    raise ParameterError(f"unknown ability mode {mode!r}")


def build_training_samples(scenario, n_samples, seed, spec=None, cache=None, xhat=None,
                           frames=None):
    """Random (x-hat, C) pairs: a random frame, a random non-empty mount subset.

    Subset sizes are uniform in [1, N] and the first drawn mount is the ego.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    cache = cache or SweepCache(scenario, spec)
    frames = list(frames) if frames is not None else list(range(len(scenario.frames)))
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    ids = scenario.mount_ids
    samples = []
    for _ in range(n_samples):
        f = frames[int(rng.integers(0, len(frames)))]
        size = int(rng.integers(1, len(ids) + 1))
        subset = [ids[k] for k in rng.permutation(len(ids))[:size]]
        xh = vehicle_free_cloud(cache, f, subset, xhat)
        conf = surrogate_confidence(scenario, f, subset, grid=scenario.grid, cache=cache)
        samples.append((xh, conf))
    return samples


# -- persistence -------------------------------------------------------------

def model_to_json(model):
    doc = {"version": MODEL_VERSION, "weights": list(model.weights), "bias": model.bias,
           "train_meta": model.train_meta}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_model(model, path):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(model_to_json(model))
    except OSError as exc:
        raise RLPlaceIOError(f"cannot write model {path}: {exc}") from exc


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"cannot parse model {path}: {exc}") from None
    except OSError as exc:
        raise RLPlaceIOError(str(exc)) from exc
    if doc.get("version") != MODEL_VERSION:
        raise VersionError(f"unknown model version {doc.get('version')!r}")
    try:
        return PredictorModel(tuple(doc["weights"]), doc["bias"], dict(doc.get("train_meta", {})))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model file: {exc!r}") from None
