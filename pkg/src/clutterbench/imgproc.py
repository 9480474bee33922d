"""Low-level image operations used by the clutter measure.

Images are planar float64 rasters.  All filtering uses reflect-101 borders
("mirror" in scipy.ndimage terms) and Gaussian kernels truncated at 3 sigma
and renormalized after sampling, so constant planes pass through exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

MIN_CLUTTER_SIZE = 8
_BORDER = "mirror"  # reflect-101: d c b | a b c d | c b a

# sRGB primaries -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
# White point taken from the matrix itself so that sRGB white maps to L=100, a=b=0.
_WHITE_XYZ = _RGB_TO_XYZ.sum(axis=1)


class ColorSpace(str, enum.Enum):
    SRGB = "SRGB"
    LINEAR_RGB = "LINEAR_RGB"
    CIELAB = "CIELAB"
    SCALAR = "SCALAR"


class Image:
    """Immutable planar raster of shape (channels, height, width)."""

    __slots__ = ("_data", "space")

    def __init__(self, data, space=ColorSpace.SCALAR):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise InvalidInputError(f"image data must be (C, H, W) or (H, W), got shape {arr.shape}")
        space = ColorSpace(space)
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("image contains non-finite samples")
        if space in (ColorSpace.SRGB, ColorSpace.LINEAR_RGB, ColorSpace.CIELAB) and arr.shape[0] != 3:
            raise InvalidInputError(f"{space.value} images need 3 channels, got {arr.shape[0]}")
        if space is ColorSpace.SRGB and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InvalidInputError("SRGB samples must lie in [0, 1]")
        if space is ColorSpace.CIELAB and (arr[0].min() < -1e-6 or arr[0].max() > 100.0 + 1e-6):
            raise InvalidInputError("CIELAB lightness must lie in [0, 100]")
        arr.flags.writeable = False
        self._data = arr
        self.space = space

    @classmethod
    def from_hwc(cls, array, space=ColorSpace.SRGB):
        """Build from an interleaved (H, W, C) array."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr, space)
        return cls(np.moveaxis(arr, -1, 0), space)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def channels(self) -> list[np.ndarray]:
        return list(self._data)

    @property
    def n_channels(self) -> int:
        return self._data.shape[0]

    @property
    def height(self) -> int:
        return self._data.shape[1]

    @property
    def width(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def plane(self, i: int = 0) -> np.ndarray:
        return self._data[i]

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self._data, 0, -1).copy()

    def with_planes(self, planes, space=None) -> "Image":
        return Image(np.stack(list(planes)), self.space if space is None else space)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.space == other.space and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"Image({self.width}x{self.height}, {self.n_channels}ch, {self.space.value})"


@dataclass(frozen=True)
class Pyramid:
    levels: tuple[Image, ...]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]


@dataclass(frozen=True)
class CovarianceMap:
    """Per-pixel symmetric PSD matrices, ``entries`` shaped (H, W, dim, dim)."""

    entries: np.ndarray

    @property
    def height(self) -> int:
        return self.entries.shape[0]

    @property
    def width(self) -> int:
        return self.entries.shape[1]

    @property
    def dim(self) -> int:
        return self.entries.shape[2]

    def eigenvalues(self) -> np.ndarray:
        """Ascending eigenvalues per pixel, clamped at zero."""
        if self.dim == 1:
            return np.maximum(self.entries[..., 0, :], 0.0)
        if self.dim == 2:
            return _eig2(self.entries)
        return np.maximum(np.linalg.eigvalsh(self.entries), 0.0)

    def determinant(self) -> np.ndarray:
        return np.prod(self.eigenvalues(), axis=-1)

    def root_det(self, floor: float = 0.0) -> np.ndarray:
        """det^(1/(2*dim)), i.e. the geometric mean of principal standard deviations.

        With ``floor`` > 0 each standard deviation is offset by ``floor`` before
        taking the geometric mean and ``floor`` is subtracted afterwards, so a
        rank-deficient covariance still scores above zero while a zero matrix
        scores exactly zero.
        """
        sd = np.sqrt(self.eigenvalues())
        if floor == 0.0:
            return np.prod(sd, axis=-1) ** (1.0 / self.dim)
        out = np.exp(np.mean(np.log(sd + floor), axis=-1)) - floor
        return np.maximum(out, 0.0)


def _eig2(m: np.ndarray) -> np.ndarray:
    a = m[..., 0, 0]
    b = m[..., 0, 1]
    c = m[..., 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return np.maximum(np.stack([half_tr - disc, half_tr + disc], axis=-1), 0.0)


def _require_space(img: Image, space: ColorSpace, channels: int | None = None):
    if not isinstance(img, Image):
        raise InvalidInputError(f"expected Image, got {type(img).__name__}")
    if img.space is not space:
        raise InvalidInputError(f"expected {space.value} image, got {img.space.value}")
    if channels is not None and img.n_channels != channels:
        raise InvalidInputError(f"expected {channels} channels, got {img.n_channels}")


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    delta = 6.0 / 29.0
    return np.where(t > delta**3, np.cbrt(t), t / (3.0 * delta * delta) + 4.0 / 29.0)


def srgb_to_cielab(img: Image) -> Image:
    """Convert an sRGB image to CIE L*a*b* under the D65 white point."""
    _require_space(img, ColorSpace.SRGB, 3)
    lin = srgb_to_linear(img.data)
    xyz = np.tensordot(_RGB_TO_XYZ, lin, axes=1) / _WHITE_XYZ[:, None, None]
    fx, fy, fz = _lab_f(xyz)
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
    # black maps to L = 116*(4/29) - 16, which is 0 up to rounding
    lab[0] = np.clip(lab[0], 0.0, 100.0)
    return Image(lab, ColorSpace.CIELAB)


def luminance(img: Image) -> Image:
    """CIELAB lightness plane of an sRGB image."""
    return Image(srgb_to_cielab(img).plane(0), ColorSpace.SCALAR)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1-D Gaussian, radius ceil(3*sigma), normalized to unit sum."""
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def _blur_planes(data: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return data
    w = gaussian_kernel(sigma)
    # blur the deviation from one reference sample so constant planes come back bit-exact
    ref = data[..., :1, :1]
    out = ndimage.correlate1d(data - ref, w, axis=-1, mode=_BORDER)
    return ndimage.correlate1d(out, w, axis=-2, mode=_BORDER) + ref


def gaussian_blur(img: Image, sigma: float) -> Image:
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    return Image(_blur_planes(img.data, sigma), img.space)


def build_pyramid(img: Image, n_levels: int) -> Pyramid:
    """Gaussian pyramid: blur (sigma=1) then keep even rows and columns.

    Levels that would drop below 8 pixels on either side are not built.
    """
    if n_levels < 1:
        raise InvalidInputError(f"n_levels must be >= 1, got {n_levels}")
    levels = [img]
    while len(levels) < n_levels:
        prev = levels[-1]
        if (prev.height + 1) // 2 < MIN_CLUTTER_SIZE or (prev.width + 1) // 2 < MIN_CLUTTER_SIZE:
            break
        levels.append(Image(_blur_planes(prev.data, 1.0)[:, ::2, ::2], prev.space))
    return Pyramid(tuple(levels))


def _psd_project(cov: np.ndarray) -> np.ndarray:
    dim = cov.shape[-1]
    if dim == 1:
        return np.maximum(cov, 0.0)
    if dim == 2:
        a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
        bad = (a < 0) | (c < 0) | (a * c - b * b < 0)
    else:
        bad = np.linalg.eigvalsh(cov)[..., 0] < 0
    if not bad.any():
        return cov
    vals, vecs = np.linalg.eigh(cov[bad])
    vals = np.maximum(vals, 0.0)
    cov = cov.copy()
    cov[bad] = np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)
    return cov


def local_covariance(features: Sequence[Image], sigma_w: float) -> CovarianceMap:
    """Gaussian-weighted local covariance of 1-3 scalar feature planes.

    Sigma(x) = G*(f f^T) - (G*f)(G*f)^T with G the blur of width ``sigma_w``.
    Each plane is centred on its global mean first; this leaves the result
    unchanged mathematically and keeps the subtraction well conditioned.
    """
    features = list(features)
    if not 1 <= len(features) <= 3:
        raise InvalidInputError(f"need 1-3 feature planes, got {len(features)}")
    if sigma_w <= 0:
        raise InvalidInputError(f"sigma_w must be > 0, got {sigma_w}")
    planes = []
    for f in features:
        if not isinstance(f, Image) or f.n_channels != 1:
            raise InvalidInputError("feature planes must be single-channel Images")
        planes.append(f.plane(0))
    shape = planes[0].shape
    if any(p.shape != shape for p in planes):
        raise InvalidInputError(f"feature planes differ in size: {[p.shape for p in planes]}")

    x = np.stack([p - p.mean() for p in planes])
    d = len(planes)
    mean = _blur_planes(x, sigma_w)
    iu, ju = np.triu_indices(d)
    second = _blur_planes(x[iu] * x[ju], sigma_w)
    cov = np.empty(shape + (d, d))
    for n, (i, j) in enumerate(zip(iu, ju)):
        cov[..., i, j] = second[n] - mean[i] * mean[j]
        cov[..., j, i] = cov[..., i, j]
    return CovarianceMap(_psd_project(cov))


def dog_contrast(lum: Image, sigma_c: float) -> Image:
    """Center-surround contrast |G_c * L - G_{1.6c} * L|."""
    if sigma_c <= 0:
        raise InvalidInputError(f"sigma_c must be > 0, got {sigma_c}")
    _require_space(lum, ColorSpace.SCALAR, 1)
    center = _blur_planes(lum.data, sigma_c)
    surround = _blur_planes(lum.data, 1.6 * sigma_c)
    return Image(np.abs(center - surround), ColorSpace.SCALAR)


def _derivative_kernels(sigma: float):
    g = gaussian_kernel(sigma)
    radius = (len(g) - 1) // 2
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    g1 = -k / sigma**2 * g
    g2 = (k * k / sigma**4 - 1.0 / sigma**2) * g
    g2 -= g * g2.sum()  # zero DC so constants give no response
    return g, g1, g2


def oriented_energy(lum: Image, sigma_o: float) -> tuple[Image, Image]:
    """Double-angle orientation planes (E0 - E90, E45 - E135).

    E_theta is the rectified response of a second-derivative-of-Gaussian
    filter steered to theta (0 = along image columns, x).  The steered
    responses come from the separable basis Gxx, Gxy, Gyy.
    """
    if sigma_o <= 0:
        raise InvalidInputError(f"sigma_o must be > 0, got {sigma_o}")
    _require_space(lum, ColorSpace.SCALAR, 1)
    g, g1, g2 = _derivative_kernels(sigma_o)
    x = lum.plane(0)

    def sep(kx, ky):
        out = ndimage.correlate1d(x, kx, axis=1, mode=_BORDER)
        return ndimage.correlate1d(out, ky, axis=0, mode=_BORDER)

    gxx = sep(g2, g)
    gyy = sep(g, g2)
    gxy = sep(g1, g1)
    e0 = np.abs(gxx)
    e90 = np.abs(gyy)
    e45 = np.abs(0.5 * gxx + gxy + 0.5 * gyy)
    e135 = np.abs(0.5 * gxx - gxy + 0.5 * gyy)
    return Image(e0 - e90), Image(e45 - e135)


def upsample_nearest(plane: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling back to ``shape``.

    Level pixel j sits at source pixel j * factor (even-index decimation), so
    source pixel i takes level pixel round(i / factor).  Ties round to even,
    which keeps the mapping mirror-symmetric when (size - 1) is a multiple
    of 2 * factor.
    """
    if factor == 1:
        return plane
    rows = np.minimum(np.rint(np.arange(shape[0]) / factor).astype(int), plane.shape[0] - 1)
    cols = np.minimum(np.rint(np.arange(shape[1]) / factor).astype(int), plane.shape[1] - 1)
    return plane[np.ix_(rows, cols)]


# --- raster I/O -------------------------------------------------------------


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode a binary P6 raster into a uint8 (H, W, 3) array."""
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise InvalidInputError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise InvalidInputError(f"bad PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise InvalidInputError(f"only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    size = width * height * 3
    raw = buf[pos : pos + size]
    if len(raw) != size:
        raise InvalidInputError(f"truncated PPM: expected {size} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(rgb8: np.ndarray) -> bytes:
    rgb8 = np.ascontiguousarray(rgb8, dtype=np.uint8)
    h, w = rgb8.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + rgb8.tobytes()


def to_uint8(img: Image) -> np.ndarray:
    _require_space(img, ColorSpace.SRGB, 3)
    return np.clip(np.rint(img.to_hwc() * 255.0), 0, 255).astype(np.uint8)


def from_uint8(rgb8: np.ndarray) -> Image:
    return Image.from_hwc(np.asarray(rgb8, dtype=np.float64) / 255.0, ColorSpace.SRGB)


def read_ppm(path) -> Image:
    return from_uint8(decode_ppm(Path(path).read_bytes()))


def write_ppm(path, img: Image) -> None:
    Path(path).write_bytes(encode_ppm(to_uint8(img)))


def read_image(path) -> Image:
    """Read a PPM (P6) or, when Pillow is available, a PNG as an sRGB image."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image as PILImage
        except ImportError as exc:  # pragma: no cover
            raise InvalidInputError("PNG input needs Pillow installed") from exc
        with PILImage.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    return read_ppm(path)
