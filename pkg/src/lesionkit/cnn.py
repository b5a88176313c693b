"""Small from-scratch convolutional network for contour-position classes.

Fixed architecture on 32x32 single-channel patches:
conv 5x5x8 -> leaky ReLU -> max-pool 2 -> conv 5x5x16 -> leaky ReLU ->
max-pool 2 -> FC 128 -> leaky ReLU -> FC 3 -> softmax, giving the three
probabilities (inside-far, near-boundary, outside-far).  Everything runs
in float64; forward and training are deterministic for fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import ValidationError

PATCH_SIZE = 32
LEAKY_SLOPE = 0.01
N_CLASSES = 3
CROP_FACTOR = 3.0

# Radius-ratio thresholds separating "far inside" / "near boundary" /
# "far outside" for concentric contours.
RATIO_INNER = 0.7
RATIO_OUTER = 1.3


@dataclass(frozen=True)
class ClassProbs:
    """Softmax output: inside-far (p1), near-boundary (p2), outside-far (p3)."""

    p1: float
    p2: float
    p3: float

    def __post_init__(self):
        vals = (self.p1, self.p2, self.p3)
        if min(vals) < -1e-9 or abs(sum(vals) - 1.0) > 1e-6:
            raise ValidationError(f"class probabilities off the simplex: {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3])


@dataclass(frozen=True)
class PatchSample:
    pixels: np.ndarray
    label: int

    def __post_init__(self):
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValidationError(f"patch must be {PATCH_SIZE}x{PATCH_SIZE}")
        if not np.isfinite(self.pixels).all():
            raise ValidationError("patch pixels must be finite")
        if self.label not in (1, 2, 3):
            raise ValidationError(f"label must be 1, 2, or 3, got {self.label}")


@dataclass
class CnnParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "CnnParams":
        return CnnParams(**{k: v.copy() for k, v in self.blocks().items()})


_SHAPES = {
    "conv1_w": (5, 5, 1, 8),
    "conv1_b": (8,),
    "conv2_w": (5, 5, 8, 16),
    "conv2_b": (16,),
    "fc1_w": (400, 128),
    "fc1_b": (128,),
    "fc2_w": (128, 3),
    "fc2_b": (3,),
}


def init_cnn(seed: int) -> CnnParams:
    """He-style uniform initialization scaled by fan-in, zero biases."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in _SHAPES.items():
        if name.endswith("_b"):
            out[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape)
    return CnnParams(**out)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _leaky(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _leaky_grad(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


def _conv_forward(x, w, b):
    kh, kw, c, k = w.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win.transpose(0, 1, 2, 4, 5, 3)
    n, ho, wo = win.shape[:3]
    cols = win.reshape(n * ho * wo, kh * kw * c)
    out = cols @ w.reshape(kh * kw * c, k) + b
    return out.reshape(n, ho, wo, k), cols


def _conv_backward(dout, cols, x_shape, w):
    kh, kw, c, k = w.shape
    n, h, w_in, _ = x_shape
    ho, wo = h - kh + 1, w_in - kw + 1
    dflat = dout.reshape(-1, k)
    dw = (cols.T @ dflat).reshape(kh, kw, c, k)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(kh * kw * c, k).T
    dwin = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + ho, j:j + wo, :] += dwin[:, :, :, i, j, :]
    return dx, dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    r = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h // 2, w // 2, 4, c)
    )
    arg = np.argmax(r, axis=3)
    out = np.take_along_axis(r, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, arg


def _pool_backward(dout, arg, x_shape):
    n, h, w, c = x_shape
    dr = np.zeros((n, h // 2, w // 2, 4, c))
    np.put_along_axis(dr, arg[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    return (
        dr.reshape(n, h // 2, w // 2, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h, w, c)
    )


def _forward_full(net: CnnParams, x: np.ndarray):
    """Shared forward pass; returns probs plus the cache for backprop."""
    cache = {}
    a1, cache["cols1"] = _conv_forward(x, net.conv1_w, net.conv1_b)
    cache["a1"] = a1
    r1 = _leaky(a1)
    p1, cache["arg1"] = _pool_forward(r1)
    cache["p1_shape"] = r1.shape
    a2, cache["cols2"] = _conv_forward(p1, net.conv2_w, net.conv2_b)
    cache["a2"] = a2
    cache["p1"] = p1
    r2 = _leaky(a2)
    p2, cache["arg2"] = _pool_forward(r2)
    cache["p2_shape"] = r2.shape
    flat = p2.reshape(len(x), -1)
    cache["flat"] = flat
    f1 = flat @ net.fc1_w + net.fc1_b
    cache["f1"] = f1
    h1 = _leaky(f1)
    cache["h1"] = h1
    logits = h1 @ net.fc2_w + net.fc2_b
    probs = softmax(logits)
    return probs, cache


def forward_batch(net: CnnParams, patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 2:
        patches = patches[None, :, :]
    if patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
        raise ValidationError(f"patches must be (N,{PATCH_SIZE},{PATCH_SIZE})")
    probs, _ = _forward_full(net, patches[..., None])
    return probs


def forward(net: CnnParams, patch: np.ndarray) -> ClassProbs:
    """Class probabilities for a single normalized 32x32 patch."""
    p = forward_batch(net, np.asarray(patch))[0]
    return ClassProbs(float(p[0]), float(p[1]), float(p[2]))


def loss_and_grad(net: CnnParams, patches: np.ndarray, labels) -> tuple[float, CnnParams]:
    """Mean cross-entropy over the batch and full backprop gradients."""
    patches = np.asarray(patches, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(patches) == 0:
        raise ValidationError("batch must be nonempty")
    if patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
        raise ValidationError(f"patches must be (N,{PATCH_SIZE},{PATCH_SIZE})")
    x = patches[..., None]
    n = len(x)
    probs, cache = _forward_full(net, x)
    idx = labels - 1
    loss = float(-np.mean(np.log(probs[np.arange(n), idx] + 1e-300)))

    dlogits = probs.copy()
    dlogits[np.arange(n), idx] -= 1.0
    dlogits /= n

    g = {}
    g["fc2_w"] = cache["h1"].T @ dlogits
    g["fc2_b"] = dlogits.sum(axis=0)
    dh1 = dlogits @ net.fc2_w.T
    df1 = dh1 * _leaky_grad(cache["f1"])
    g["fc1_w"] = cache["flat"].T @ df1
    g["fc1_b"] = df1.sum(axis=0)
    dflat = df1 @ net.fc1_w.T
    dp2 = dflat.reshape(n, 5, 5, 16)
    dr2 = _pool_backward(dp2, cache["arg2"], cache["p2_shape"])
    da2 = dr2 * _leaky_grad(cache["a2"])
    dp1, g["conv2_w"], g["conv2_b"] = _conv_backward(
        da2, cache["cols2"], cache["p1"].shape, net.conv2_w
    )
    dr1 = _pool_backward(dp1, cache["arg1"], cache["p1_shape"])
    da1 = dr1 * _leaky_grad(cache["a1"])
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(
        da1, cache["cols1"], x.shape, net.conv1_w
    )
    return loss, CnnParams(**g)


def sgd_train(
    net: CnnParams,
    patches: np.ndarray,
    labels,
    epochs: int,
    lr: float,
    seed: int,
    momentum: float = 0.9,
    batch_size: int = 16,
) -> tuple[CnnParams, list[float]]:
    """Plain SGD with momentum and a seed-fixed shuffle; returns the
    trained copy plus the full-set loss after each epoch."""
    labels = np.asarray(labels, dtype=np.int64)
    if set(np.unique(labels)) != {1, 2, 3}:
        raise ValidationError("training data must contain all 3 classes")
    patches = np.asarray(patches, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = net.copy()
    vel = {k: np.zeros_like(v) for k, v in out.blocks().items()}
    losses = []
    n = len(patches)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            _, grads = loss_and_grad(out, patches[sel], labels[sel])
            gb = grads.blocks()
            for k, p in out.blocks().items():
                vel[k] = momentum * vel[k] - lr * gb[k]
                p += vel[k]
        epoch_loss, _ = loss_and_grad(out, patches, labels)
        losses.append(epoch_loss)
    return out, losses


# ---------------------------------------------------------------------------
# Patch extraction and labeling
# ---------------------------------------------------------------------------

def _bilerp(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sampling with clamp-to-edge padding; img indexed [x, y]."""
    nx, ny = img.shape
    xs = np.clip(xs, 0.0, nx - 1.0)
    ys = np.clip(ys, 0.0, ny - 1.0)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(nx - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(ny - 2, 0))
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    fx = xs - x0
    fy = ys - y0
    return (
        img[x0, y0] * (1 - fx) * (1 - fy)
        + img[x1, y0] * fx * (1 - fy)
        + img[x0, y1] * (1 - fx) * fy
        + img[x1, y1] * fx * fy
    )


def make_patch(image: np.ndarray, center, radius: float,
               out_size: int = PATCH_SIZE) -> np.ndarray:
    """Crop the square of side 3*radius around the contour center,
    bilinearly resample to out_size, and normalize to zero mean and unit
    std (std floored at 1e-6)."""
    if radius <= 0:
        raise ValidationError("contour radius must be > 0")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("image must be 2D")
    cx, cy = float(center[0]), float(center[1])
    side = CROP_FACTOR * radius
    nx, ny = img.shape
    if cx + side / 2 < -0.5 or cx - side / 2 > nx - 0.5 \
            or cy + side / 2 < -0.5 or cy - side / 2 > ny - 0.5:
        raise ValidationError("crop region lies fully outside the image")
    u = np.arange(out_size, dtype=np.float64)
    xs = cx - side / 2 + (u + 0.5) * side / out_size
    ys = cy - side / 2 + (u + 0.5) * side / out_size
    patch = _bilerp(img, xs[:, None], ys[None, :])
    std = patch.std()
    return (patch - patch.mean()) / max(std, 1e-6)


def label_patch(center, radius: float, gt_slice: np.ndarray) -> int:
    """Contour position class against the ground-truth mask in this slice:
    1 inside-far, 2 near-boundary, 3 outside-far.

    Concentric contours use the radius ratio against the mask's equivalent
    radius; offset contours fall back to the mean signed distance of the
    contour to the mask boundary with thresholds +-0.3 * r_eq.
    """
    gt = np.asarray(gt_slice) != 0
    count = int(gt.sum())
    if count == 0:
        raise ValidationError("ground-truth mask is empty in this slice")
    if radius <= 0:
        raise ValidationError("contour radius must be > 0")
    r_eq = np.sqrt(count / np.pi)
    coords = np.argwhere(gt)
    centroid = coords.mean(axis=0)
    cx, cy = float(center[0]), float(center[1])

    if np.hypot(cx - centroid[0], cy - centroid[1]) <= 0.5:
        ratio = radius / r_eq
        if ratio < RATIO_INNER:
            return 1
        if ratio <= RATIO_OUTER:
            return 2
        return 3

    signed = (
        ndimage.distance_transform_edt(~gt)
        - ndimage.distance_transform_edt(gt)
    )
    theta = np.linspace(0.0, 2.0 * np.pi, 72, endpoint=False)
    xs = cx + radius * np.cos(theta)
    ys = cy + radius * np.sin(theta)
    mean_dist = float(_bilerp(signed, xs, ys).mean())
    if mean_dist < -0.3 * r_eq:
        return 1
    if mean_dist > 0.3 * r_eq:
        return 3
    return 2
