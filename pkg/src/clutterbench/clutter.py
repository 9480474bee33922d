"""Feature-congestion clutter for a single view, and the dual-view score.

Per pyramid level of the CIELAB image three local-spread maps are built:

* color: geometric-mean standard deviation of the local (a*, b*) covariance,
* contrast: local standard deviation of the center-surround response of L*,
* orientation: geometric-mean standard deviation of the local covariance of
  the double-angle orientation planes.

Maps are brought back to source resolution, pooled across scales, mixed
with fixed weights and averaged over pixels (Minkowski mean of order p).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .imgproc import (
    MIN_CLUTTER_SIZE,
    ColorSpace,
    Image,
    build_pyramid,
    dog_contrast,
    local_covariance,
    oriented_energy,
    srgb_to_cielab,
    upsample_nearest,
)

SCALE_POOLING = ("MAX", "MEAN")


@dataclass(frozen=True)
class ClutterConfig:
    n_scales: int = 3
    sigma_w: float = 4.0
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    pooling_order: float = 1.0
    scale_pooling: str = "MAX"
    sigma_contrast: float = 1.0
    sigma_orient: float = 1.0
    # Offsets (feature units) that keep rank-one local covariances, e.g. a
    # two-color edge, from scoring zero.  A zero matrix still scores zero.
    color_floor: float = 1.0
    orient_floor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        errors = self.validate()
        if errors:
            raise InvalidInputError("invalid clutter config: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if not isinstance(self.n_scales, int) or self.n_scales < 1:
            errors.append(f"n_scales must be an integer >= 1 (got {self.n_scales!r})")
        if not self.sigma_w > 0:
            errors.append(f"sigma_w must be > 0 (got {self.sigma_w!r})")
        if len(self.weights) != 3 or any(not w >= 0 for w in self.weights):
            errors.append(f"weights must be three nonnegative numbers (got {self.weights!r})")
        elif abs(sum(self.weights) - 1.0) > 1e-9:
            errors.append(f"weights must sum to 1 (got {sum(self.weights)!r})")
        if not self.pooling_order >= 1:
            errors.append(f"pooling_order must be >= 1 (got {self.pooling_order!r})")
        if self.scale_pooling not in SCALE_POOLING:
            errors.append(f"scale_pooling must be one of {SCALE_POOLING} (got {self.scale_pooling!r})")
        for name in ("sigma_contrast", "sigma_orient"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0 (got {getattr(self, name)!r})")
        for name in ("color_floor", "orient_floor"):
            if not getattr(self, name) >= 0:
                errors.append(f"{name} must be >= 0 (got {getattr(self, name)!r})")
        return errors

    @staticmethod
    def normalized_weights(weights) -> tuple[float, float, float]:
        total = float(sum(weights))
        if total <= 0:
            raise InvalidInputError("weights must have a positive sum")
        return tuple(float(w) / total for w in weights)


@dataclass(frozen=True)
class FeatureMaps:
    """Per-scale clutter maps, each already at source resolution."""

    color: list[np.ndarray]
    contrast: list[np.ndarray]
    orient: list[np.ndarray]

    @property
    def n_scales(self) -> int:
        return len(self.color)

    def scaled(self, factor: float) -> "FeatureMaps":
        return FeatureMaps(
            [m * factor for m in self.color],
            [m * factor for m in self.contrast],
            [m * factor for m in self.orient],
        )


@dataclass(frozen=True)
class ClutterScore:
    total: float
    color: float
    contrast: float
    orient: float
    clutter_map: Image = field(repr=False, compare=False)

    @property
    def per_feature(self) -> tuple[float, float, float]:
        return self.color, self.contrast, self.orient


@dataclass(frozen=True)
class DvfcScore:
    value: float
    robot_view: ClutterScore
    top_view: ClutterScore


def _check_view(img: Image):
    if not isinstance(img, Image) or img.space is not ColorSpace.SRGB or img.n_channels != 3:
        raise InvalidInputError("clutter needs a 3-channel SRGB Image")
    if img.width < MIN_CLUTTER_SIZE or img.height < MIN_CLUTTER_SIZE:
        raise InvalidInputError(
            f"image is {img.width}x{img.height}; clutter needs at least "
            f"{MIN_CLUTTER_SIZE}x{MIN_CLUTTER_SIZE}"
        )


def feature_clutter_maps(img: Image, cfg: ClutterConfig | None = None) -> FeatureMaps:
    cfg = cfg or ClutterConfig()
    _check_view(img)
    lab = srgb_to_cielab(img)
    pyramid = build_pyramid(lab, cfg.n_scales)
    shape = img.shape
    color, contrast, orient = [], [], []
    for k, level in enumerate(pyramid.levels):
        lum = Image(level.plane(0))
        a, b = Image(level.plane(1)), Image(level.plane(2))
        c_map = local_covariance([a, b], cfg.sigma_w).root_det(cfg.color_floor)
        dog = dog_contrast(lum, cfg.sigma_contrast)
        k_map = local_covariance([dog], cfg.sigma_w).root_det()
        o_map = local_covariance(oriented_energy(lum, cfg.sigma_orient), cfg.sigma_w).root_det(cfg.orient_floor)
        factor = 2**k
        color.append(upsample_nearest(c_map, factor, shape))
        contrast.append(upsample_nearest(k_map, factor, shape))
        orient.append(upsample_nearest(o_map, factor, shape))
    return FeatureMaps(color, contrast, orient)


def minkowski_mean(values: np.ndarray, p: float) -> float:
    v = np.asarray(values, dtype=np.float64)
    if p == 1:
        return float(v.mean())
    peak = float(v.max())
    if peak == 0.0:
        return 0.0
    # factor out the peak to avoid overflow for large p
    return peak * float(np.mean((v / peak) ** p)) ** (1.0 / p)


def _pool_scales(maps: list[np.ndarray], mode: str) -> np.ndarray:
    stack = np.stack(maps)
    return stack.max(axis=0) if mode == "MAX" else stack.mean(axis=0)


def pool_clutter(maps: FeatureMaps, cfg: ClutterConfig | None = None) -> ClutterScore:
    """Pool per-scale maps into a single clutter score."""
    cfg = cfg or ClutterConfig()
    pooled = [_pool_scales(m, cfg.scale_pooling) for m in (maps.color, maps.contrast, maps.orient)]
    w_color, w_contrast, w_orient = cfg.weights
    clutter_map = w_color * pooled[0] + w_contrast * pooled[1] + w_orient * pooled[2]
    p = cfg.pooling_order
    per_feature = [minkowski_mean(m, p) for m in pooled]
    return ClutterScore(
        total=minkowski_mean(clutter_map, p),
        color=per_feature[0],
        contrast=per_feature[1],
        orient=per_feature[2],
        clutter_map=Image(clutter_map),
    )


def feature_congestion(img: Image, cfg: ClutterConfig | None = None) -> ClutterScore:
    """Single-view clutter score of an sRGB image."""
    cfg = cfg or ClutterConfig()
    return pool_clutter(feature_clutter_maps(img, cfg), cfg)


def combine_views(robot_view: ClutterScore, top_view: ClutterScore) -> DvfcScore:
    return DvfcScore((robot_view.total + top_view.total) / 2.0, robot_view, top_view)


def dvfc(robot_img: Image, top_img: Image, cfg: ClutterConfig | None = None) -> DvfcScore:
    """Dual-view score: mean of the robot-view and top-down-view totals."""
    _check_view(robot_img)
    _check_view(top_img)
    return combine_views(feature_congestion(robot_img, cfg), feature_congestion(top_img, cfg))

