"""Image-generation metrics on feature vectors, crops, detections and keypoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AllMasked, BoxOutOfBounds, DimMismatch, NumericalInstability, ShapeMismatch, TooFewSamples
from .tensor import Tensor, load_tensors

EIG_TOLERANCE = 1e-8


@dataclass
class FeatureSet:
    vectors: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = self.vectors.data if isinstance(self.vectors, Tensor) else self.vectors
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch(f"features must be [n x d], got {v.shape}")
        self.vectors = v

    @property
    def n(self):
        return self.vectors.shape[0]

    @property
    def d(self):
        return self.vectors.shape[1]

    @classmethod
    def load(cls, path, label=None):
        """Read the ``features`` tensor from a named-tensor container."""
        tensors = load_tensors(path)
        if "features" not in tensors:
            raise ShapeMismatch(f"{path}: no tensor named 'features'")
        return cls(tensors["features"], label or str(path))


def _vectors(x):
    return x.vectors if isinstance(x, FeatureSet) else FeatureSet(x).vectors


def _check_pair(a, b, min_n=2):
    if a.shape[1] != b.shape[1]:
        raise DimMismatch(f"feature dimensions {a.shape[1]} and {b.shape[1]} differ")
    if a.shape[0] < min_n or b.shape[0] < min_n:
        raise TooFewSamples(f"need at least {min_n} samples per set, got {a.shape[0]} and {b.shape[0]}")


def _clamped_eigh(mat, what):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min(initial=0.0) < -EIG_TOLERANCE:
        raise NumericalInstability(f"{what} has eigenvalue {vals.min():.3e} below -{EIG_TOLERANCE}")
    return np.clip(vals, 0.0, None), vecs


def _sym_sqrt(mat, what):
    vals, vecs = _clamped_eigh(mat, what)
    return (vecs * np.sqrt(vals)) @ vecs.T


def trace_sqrt_product(sigma_a, sigma_b):
    """tr((Σ_a Σ_b)^½) via the symmetric product Σ_a^½ Σ_b Σ_a^½."""
    ra = _sym_sqrt(sigma_a, "covariance")
    vals, _ = _clamped_eigh(ra @ sigma_b @ ra, "covariance product")
    return float(np.sqrt(vals).sum())


def sqrtm_product(sigma_a, sigma_b):
    """Matrix S with S·S = Σ_a Σ_b, for positive definite Σ_a.

    S = Σ_a^½ (Σ_a^½ Σ_b Σ_a^½)^½ Σ_a^-½, which has the same eigenvalues as
    the symmetric middle factor.
    """
    vals, vecs = _clamped_eigh(sigma_a, "covariance")
    if vals.min() <= 0.0:
        raise NumericalInstability("Σ_a is singular; the product square root is not unique")
    ra = (vecs * np.sqrt(vals)) @ vecs.T
    ra_inv = (vecs / np.sqrt(vals)) @ vecs.T
    mid = _sym_sqrt(ra @ sigma_b @ ra, "covariance product")
    return ra @ mid @ ra_inv


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b):
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt_product(sigma_a, sigma_b)
    return max(float(value), 0.0)


def fid(a, b):
    """Fréchet distance between Gaussians fitted to two feature sets."""
    a, b = _vectors(a), _vectors(b)
    _check_pair(a, b)
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    return frechet_distance(a.mean(axis=0), sa, b.mean(axis=0), sb)


def polynomial_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x, y):
    """Unbiased squared MMD with the cubic polynomial kernel."""
    m, n = x.shape[0], y.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return term_x + term_y - 2.0 * kxy.sum() / (m * n)


def kid(a, b, subset_size=None, subsets=1, seed=0):
    """Kernel distance: mean unbiased MMD² over random subsets.

    The default is a single estimate on the full sets.  With ``subset_size``
    each of ``subsets`` draws takes that many rows (without replacement)
    from each set.  Arguments are put in a canonical order first so that
    ``kid(a, b) == kid(b, a)`` exactly.
    """
    a, b = _vectors(a), _vectors(b)
    _check_pair(a, b)
    if (a.shape, a.tobytes()) > (b.shape, b.tobytes()):
        a, b = b, a
    if not subset_size:
        return float(mmd2_unbiased(a, b))
    k = int(subset_size)
    if k < 2 or k > min(a.shape[0], b.shape[0]):
        raise TooFewSamples(f"subset size {k} for sets of {a.shape[0]} and {b.shape[0]}")
    rng = np.random.default_rng(seed)
    vals = [mmd2_unbiased(a[rng.choice(a.shape[0], k, replace=False)],
                          b[rng.choice(b.shape[0], k, replace=False)]) for _ in range(subsets)]
    return float(np.mean(vals))


# ---------------------------------------------------------------- crops and embedders

def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of [C, H, W] with half-pixel centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


class ChannelMeanEmbedder:
    """Per-channel mean intensity."""

    input_extent = 8

    def __call__(self, img):
        return np.asarray(img).mean(axis=(1, 2))


class PixelStatsEmbedder:
    """Channel means followed by a mean-pooled thumbnail of every channel."""

    def __init__(self, input_extent=16, grid=4):
        self.input_extent = input_extent
        self.grid = grid

    def __call__(self, img):
        img = np.asarray(img)
        c, h, w = img.shape
        thumb = img.reshape(c, self.grid, h // self.grid, self.grid, w // self.grid).mean(axis=(2, 4))
        return np.concatenate([img.mean(axis=(1, 2)), thumb.ravel()])


EMBEDDERS = {"pixel_stats": PixelStatsEmbedder, "channel_mean": ChannelMeanEmbedder}


@dataclass
class CropSpec:
    """Per-image lists of (x, y, w, h) hand boxes in pixels."""

    boxes: list

    def validate(self, images):
        if len(self.boxes) != len(images):
            raise BoxOutOfBounds(f"{len(self.boxes)} box lists for {len(images)} images")
        for i, (img, boxes) in enumerate(zip(images, self.boxes)):
            _, h, w = np.shape(img)
            for x, y, bw, bh in boxes:
                if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > w or y + bh > h:
                    raise BoxOutOfBounds(f"image {i}: box {(x, y, bw, bh)} outside {w}x{h}")


def crop_features(images, crops, embedder, label="crops"):
    """Embed every box of every image after a bilinear resize to the embedder's extent."""
    crops = crops if isinstance(crops, CropSpec) else CropSpec(crops)
    crops.validate(images)
    size = embedder.input_extent
    rows = []
    for img, boxes in zip(images, crops.boxes):
        img = np.asarray(img, dtype=np.float64)
        for x, y, bw, bh in boxes:
            x, y, bw, bh = int(x), int(y), int(bw), int(bh)
            rows.append(embedder(resize_bilinear(img[:, y:y + bh, x:x + bw], size, size)))
    return FeatureSet(np.array(rows), label)


def image_features(images, embedder, label="images"):
    size = embedder.input_extent
    return FeatureSet(np.array([embedder(resize_bilinear(img, size, size)) for img in images]), label)


# ---------------------------------------------------------------- detections and keypoints

def hand_confidence(detections):
    """Mean over images of the best detection confidence (0 without detections).

    Each entry is either one confidence or a list of them.
    """
    if not detections:
        return 0.0
    best = []
    for det in detections:
        if np.isscalar(det):
            best.append(float(det))
        else:
            best.append(max((float(c) for c in det), default=0.0))
    return float(np.mean(best))


def keypoint_mse(pred, gt, visible=None):
    """Mean squared Euclidean distance over visible (sample, joint) pairs."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] not in (2, 3):
        raise ShapeMismatch(f"keypoints must share an [n x J x 2|3] shape, got {pred.shape} and {gt.shape}")
    sq = ((pred - gt) ** 2).sum(axis=2)
    mask = np.ones(sq.shape, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    if mask.shape != sq.shape:
        raise ShapeMismatch(f"visibility {mask.shape} for keypoints {sq.shape}")
    if not mask.any():
        raise AllMasked("every keypoint is masked")
    return float(sq[mask].mean())


METRIC_KEYS = ("fid", "kid", "fid_h", "kid_h", "hand_conf", "mse_2d", "mse_3d", "align")


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, key, value, count):
        if key not in METRIC_KEYS:
            raise KeyError(key)
        value = float(value)
        if not np.isfinite(value):
            raise NumericalInstability(f"metric {key} is not finite")
        self.values[key] = value
        self.counts[key] = count

    def to_json(self):
        return json.dumps({"metrics": self.values, "counts": self.counts}, indent=2, sort_keys=True) + "\n"

    def as_dict(self):
        return asdict(self)
