"""Dense apparent-flow fields: loss terms, analytic gradients and
direct minimization of the semi-supervised energy.

The energy on a frame pair (I_ed, I_t) with flow F is

    L = sum_P (I_ed(P) - I_t(P + F(P)))^2                    (image term)
      + p1 * sum_P min(1 + dFx/dx, 0)^2 + min(1 + dFy/dy, 0)^2   (crossing)
      + p2 * sum_S Dice(M_ed^S, M_es^S o W_F)                (supervision,
                                                              ES pairs only)

Dice here is the negative-signed, epsilon-stabilized form, so better
overlap makes the total loss more negative.  All sums are raw sums over
pixels (no averaging), which keeps p1 and p2 on their published scale.

Instead of training a network, the energy is minimized directly per
frame pair: a coarse-to-fine pyramid with smoothed ("Sobolev")
gradient descent plus momentum at each level.  Smoothing the gradient
propagates boundary evidence into flat regions where the raw energy
carries no signal.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .anatomy import LVC, LVM, RVC, LabelMask, check_same_shape
from .errors import DataError, FormatError, NumericalFailureError, ValidationError

SUPERVISED_STRUCTURES = (LVC, LVM, RVC)


@dataclass
class FlowField:
    """Per-pixel 2-D displacement (fx, fy), in pixels, indexed [y, x]."""

    fx: np.ndarray
    fy: np.ndarray

    def __post_init__(self):
        self.fx = np.asarray(self.fx, dtype=float)
        self.fy = np.asarray(self.fy, dtype=float)
        if self.fx.shape != self.fy.shape or self.fx.ndim != 2:
            raise ValidationError("flow", "fx and fy must be 2-D grids of equal shape")
        if not (np.isfinite(self.fx).all() and np.isfinite(self.fy).all()):
            raise ValidationError("flow", "components must be finite")

    @property
    def height(self):
        return self.fx.shape[0]

    @property
    def width(self):
        return self.fx.shape[1]

    @property
    def shape(self):
        return self.fx.shape

    @classmethod
    def zero(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def copy(self):
        return FlowField(self.fx.copy(), self.fy.copy())


@dataclass
class FramePair:
    """An ED frame, a frame at instant t, and (for ES pairs) the masks
    that supervise the flow."""

    i_ed: np.ndarray
    i_t: np.ndarray
    mask_ed: LabelMask | None = None
    mask_es: LabelMask | None = None

    def __post_init__(self):
        self.i_ed = np.asarray(self.i_ed, dtype=float)
        self.i_t = np.asarray(self.i_t, dtype=float)
        check_same_shape("frame pair", self.i_ed, self.i_t)
        if (self.mask_ed is None) != (self.mask_es is None):
            raise ValidationError("supervision", "mask_ed and mask_es must be given together")
        if self.mask_ed is not None:
            check_same_shape("mask_ed", self.mask_ed.labels, self.i_ed)
            check_same_shape("mask_es", self.mask_es.labels, self.i_ed)

    @property
    def supervised(self):
        return self.mask_ed is not None


@dataclass
class FlowLossParams:
    """Weights of the combined loss; defaults follow the published setup."""

    p1: float = 1e3
    p2: float = 1e5
    epsilon_dice: float = 1.0

    def __post_init__(self):
        if self.p1 < 0:
            raise ValidationError("p1", "must be >= 0")
        if self.p2 < 0:
            raise ValidationError("p2", "must be >= 0")
        if self.epsilon_dice <= 0:
            raise ValidationError("epsilon_dice", "must be > 0")


# ---------------------------------------------------------------------------
# Bilinear sampling
# ---------------------------------------------------------------------------

def _sample(image, xs, ys, with_grad=False):
    """Bilinear sample of ``image`` at (xs, ys), coordinates clamped to
    the valid domain.  Optionally returns the spatial derivatives of the
    interpolant; where a coordinate is clamped the corresponding
    derivative is 0 (the sample no longer responds to it)."""
    h, w = image.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    i00 = image[y0, x0]
    i10 = image[y0, x1]
    i01 = image[y1, x0]
    i11 = image[y1, x1]
    top = i00 + ax * (i10 - i00)
    bot = i01 + ax * (i11 - i01)
    val = top + ay * (bot - top)
    if not with_grad:
        return val
    dvdx = (1.0 - ay) * (i10 - i00) + ay * (i11 - i01)
    dvdy = (1.0 - ax) * (i01 - i00) + ax * (i11 - i10)
    dvdx = np.where((xs < 0.0) | (xs > w - 1.0), 0.0, dvdx)
    dvdy = np.where((ys < 0.0) | (ys > h - 1.0), 0.0, dvdy)
    return val, dvdx, dvdy


def _warp_coords(flow):
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + flow.fx, ys + flow.fy


def warp_image(image, flow):
    """Image resampled at P + F(P) for every pixel P."""
    image = np.asarray(image, dtype=float)
    check_same_shape("warp", image, flow.fx)
    xs, ys = _warp_coords(flow)
    return _sample(image, xs, ys)


def warp_sample(image, flow, p):
    """Value of ``image`` at p + F(p) by bilinear interpolation.

    ``p`` is an (x, y) pixel coordinate and must lie inside the image.
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    x, y = float(p[0]), float(p[1])
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise DataError(f"pixel {p} outside image domain {w}x{h}")
    ix, iy = int(round(x)), int(round(y))
    return float(_sample(image, np.array(x + flow.fx[iy, ix]), np.array(y + flow.fy[iy, ix])))


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def loss_img(pair, flow):
    """Sum of squared intensity residuals after warping."""
    check_same_shape("loss_img", pair.i_ed, flow.fx)
    return float(((pair.i_ed - warp_image(pair.i_t, flow)) ** 2).sum())


def loss_cross(flow):
    """Penalty on flow pairs that cross: forward differences, terms at
    the right/bottom border dropped."""
    dx = flow.fx[:, 1:] - flow.fx[:, :-1]
    dy = flow.fy[1:, :] - flow.fy[:-1, :]
    tx = np.minimum(1.0 + dx, 0.0)
    ty = np.minimum(1.0 + dy, 0.0)
    return float((tx * tx).sum() + (ty * ty).sum())


def dice(u, v, epsilon=1.0):
    """Negative-signed, epsilon-stabilized Dice of two soft masks.

    Returns -(2*sum(u*v) + eps) / (sum(u) + sum(v) + eps); more negative
    means better overlap.  Two identical all-zero masks give -1, the
    documented degenerate behavior of the stabilized formula.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    check_same_shape("dice", u, v)
    num = 2.0 * float((u * v).sum()) + epsilon
    den = float(u.sum()) + float(v.sum()) + epsilon
    return -num / den


def _supervision_soft(pair):
    """Per-structure binary masks as float images."""
    ed = {s: pair.mask_ed.structure(s).astype(float) for s in SUPERVISED_STRUCTURES}
    es = {s: pair.mask_es.structure(s).astype(float) for s in SUPERVISED_STRUCTURES}
    return ed, es


def loss_gt(pair, flow, epsilon=1.0, soft_masks=None):
    """Sum over {LVC, LVM, RVC} of Dice(M_ed^S, M_es^S o W_F).

    The warped ES mask is sampled bilinearly, so its values are soft.
    ``soft_masks`` lets the optimizer pass pre-extracted (ed, es) mask
    dictionaries (used at coarse pyramid levels).
    """
    if soft_masks is None:
        if not pair.supervised:
            raise DataError("loss_gt requires supervision masks on the frame pair")
        soft_masks = _supervision_soft(pair)
    ed, es = soft_masks
    xs, ys = _warp_coords(flow)
    total = 0.0
    for s in SUPERVISED_STRUCTURES:
        warped = _sample(es[s], xs, ys)
        total += dice(ed[s], warped, epsilon)
    return float(total)


def loss_total(pair, flow, params=None, soft_masks=None):
    """Combined semi-supervised loss; the supervision term is active
    only when ES masks are present."""
    params = params or FlowLossParams()
    total = loss_img(pair, flow) + params.p1 * loss_cross(flow)
    if soft_masks is not None or pair.supervised:
        total += params.p2 * loss_gt(pair, flow, params.epsilon_dice, soft_masks)
    return float(total)


def loss_gradient(pair, flow, params=None, soft_masks=None):
    """Analytic gradient of loss_total w.r.t. every flow component.

    Image and warped-mask spatial derivatives come from the bilinear
    interpolant; the crossing penalty uses the active min branch (zero
    at exact equality).  Returned as a FlowField-shaped pair of grids.
    """
    params = params or FlowLossParams()
    check_same_shape("loss_gradient", pair.i_ed, flow.fx)
    xs, ys = _warp_coords(flow)

    # image term: d/df (I_ed - I_t(w))^2 = -2 r * dI_t/dw
    val, dvdx, dvdy = _sample(pair.i_t, xs, ys, with_grad=True)
    r = pair.i_ed - val
    gx = -2.0 * r * dvdx
    gy = -2.0 * r * dvdy

    # crossing term
    tx = np.minimum(1.0 + (flow.fx[:, 1:] - flow.fx[:, :-1]), 0.0)
    ty = np.minimum(1.0 + (flow.fy[1:, :] - flow.fy[:-1, :]), 0.0)
    gx[:, 1:] += params.p1 * 2.0 * tx
    gx[:, :-1] -= params.p1 * 2.0 * tx
    gy[1:, :] += params.p1 * 2.0 * ty
    gy[:-1, :] -= params.p1 * 2.0 * ty

    # supervision term
    if soft_masks is not None or pair.supervised:
        if soft_masks is None:
            soft_masks = _supervision_soft(pair)
        ed, es = soft_masks
        eps = params.epsilon_dice
        for s in SUPERVISED_STRUCTURES:
            warped, dmdx, dmdy = _sample(es[s], xs, ys, with_grad=True)
            u = ed[s]
            num = 2.0 * float((u * warped).sum()) + eps
            den = float(u.sum()) + float(warped.sum()) + eps
            # d(-num/den)/d warped(P) = (-2 u(P) + num/den) / den
            ddice = (-2.0 * u + num / den) / den
            gx += params.p2 * ddice * dmdx
            gy += params.p2 * ddice * dmdy

    return FlowField(gx, gy)


# ---------------------------------------------------------------------------
# Direct minimization
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    """Coarse-to-fine gradient descent settings.

    ``step`` is the largest per-iteration flow update in pixels when
    ``normalize`` is on (the default); with ``normalize`` off it is a
    plain step size in raw summed-loss gradient scale, which is mostly
    useful for studying monotone descent.  ``grad_sigma`` smooths the
    gradient field before each update; 0 disables it.  Every
    ``flow_smooth_every`` iterations the flow itself is lightly blurred
    (``flow_smooth_sigma``), which interpolates boundary evidence across
    texture-free regions where the energy alone cannot pick a flow.  On
    a loss increase the step is halved and momentum reset, so the
    schedule is deterministic.
    """

    levels: int = 3
    iterations: int = 300
    step: float = 0.25
    momentum: float = 0.9
    tol: float = 1e-6
    grad_sigma: float = 2.0
    flow_smooth_sigma: float = 1.0
    flow_smooth_every: int = 10
    normalize: bool = True
    step_floor: float = 1e-4

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError("levels", "need at least 1 pyramid level")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum", "must be in [0, 1)")


def _downsample_image(a):
    return gaussian_filter(a, 1.0, mode="nearest")[::2, ::2]


def _downsample_pair(pair, soft_masks):
    i_ed = _downsample_image(pair.i_ed)
    i_t = _downsample_image(pair.i_t)
    small = FramePair(i_ed, i_t)
    if soft_masks is None:
        return small, None
    ed, es = soft_masks
    ed = {s: _downsample_image(m) for s, m in ed.items()}
    es = {s: _downsample_image(m) for s, m in es.items()}
    return small, (ed, es)


def _upsample_flow(flow, shape):
    from scipy.ndimage import zoom

    zy = shape[0] / flow.fx.shape[0]
    zx = shape[1] / flow.fx.shape[1]
    fx = zoom(flow.fx, (zy, zx), order=1) * zx
    fy = zoom(flow.fy, (zy, zx), order=1) * zy
    return FlowField(fx[: shape[0], : shape[1]], fy[: shape[0], : shape[1]])


def _descend(pair, params, opt, flow, soft_masks):
    """Gradient descent with momentum on one pyramid level."""
    vx = np.zeros_like(flow.fx)
    vy = np.zeros_like(flow.fy)
    step = opt.step
    prev = loss_total(pair, flow, params, soft_masks)
    history = [prev]
    for it in range(opt.iterations):
        g = loss_gradient(pair, flow, params, soft_masks)
        gx, gy = g.fx, g.fy
        if opt.grad_sigma > 0:
            gx = gaussian_filter(gx, opt.grad_sigma, mode="nearest")
            gy = gaussian_filter(gy, opt.grad_sigma, mode="nearest")
        if opt.normalize:
            scale = max(np.abs(gx).max(), np.abs(gy).max())
            if scale <= 1e-30:
                break
            gx = gx / scale
            gy = gy / scale
        vx = opt.momentum * vx - step * gx
        vy = opt.momentum * vy - step * gy
        flow.fx += vx
        flow.fy += vy
        loss = loss_total(pair, flow, params, soft_masks)
        if not np.isfinite(loss):
            raise NumericalFailureError("non-finite loss during flow estimation", iteration=it)
        if loss > prev:
            # revert, shorten the step, restart momentum
            flow.fx -= vx
            flow.fy -= vy
            vx[:] = 0.0
            vy[:] = 0.0
            step *= 0.5
            if step < opt.step_floor:
                break
            continue
        history.append(loss)
        converged = abs(prev - loss) <= opt.tol * (abs(prev) + 1.0)
        prev = loss
        smooth_due = opt.flow_smooth_sigma > 0 and opt.flow_smooth_every > 0 and (
            (it + 1) % opt.flow_smooth_every == 0
        )
        if smooth_due:
            flow.fx = gaussian_filter(flow.fx, opt.flow_smooth_sigma, mode="nearest")
            flow.fy = gaussian_filter(flow.fy, opt.flow_smooth_sigma, mode="nearest")
            prev = loss_total(pair, flow, params, soft_masks)
        if converged:
            break
    return flow, history


def estimate_flow(pair, params=None, opt=None, return_info=False):
    """Minimize loss_total over a dense flow field for one frame pair.

    Coarse-to-fine: the pair (and supervision masks, when present) is
    downsampled ``opt.levels - 1`` times; the flow starts at zero on the
    coarsest level and is upsampled (values doubled) between levels.
    """
    params = params or FlowLossParams()
    opt = opt or OptimizerConfig()
    soft = _supervision_soft(pair) if pair.supervised else None

    pyramid = [(pair, soft)]
    for _ in range(opt.levels - 1):
        small, soft = _downsample_pair(*pyramid[-1])
        if min(small.i_ed.shape) < 8:
            break
        pyramid.append((small, soft))

    flow = FlowField.zero(*pyramid[-1][0].i_ed.shape)
    info = {"levels": []}
    for lvl in range(len(pyramid) - 1, -1, -1):
        level_pair, level_soft = pyramid[lvl]
        if flow.shape != level_pair.i_ed.shape:
            flow = _upsample_flow(flow, level_pair.i_ed.shape)
        flow, history = _descend(level_pair, params, opt, flow, level_soft)
        info["levels"].append(
            {"shape": list(level_pair.i_ed.shape), "iterations": len(history) - 1,
             "initial_loss": history[0], "final_loss": history[-1]}
        )
    info["final_loss"] = info["levels"][-1]["final_loss"]
    info["loss_terms"] = {
        "img": loss_img(pair, flow),
        "cross": loss_cross(flow),
        "gt": loss_gt(pair, flow, params.epsilon_dice) if pair.supervised else None,
    }
    if return_info:
        return flow, info
    return flow


# ---------------------------------------------------------------------------
# Binary flow format: magic "CFL1", u32 LE width, u32 LE height, then the
# fx grid and the fy grid as little-endian float32, row-major.
# ---------------------------------------------------------------------------

FLOW_MAGIC = b"CFL1"


def write_flow(path, flow):
    h, w = flow.shape
    payload = (
        FLOW_MAGIC
        + struct.pack("<II", w, h)
        + flow.fx.astype("<f4").tobytes()
        + flow.fy.astype("<f4").tobytes()
    )
    with open(path, "wb") as fh:
        fh.write(payload)


def read_flow(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {FLOW_MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + 2 * 4 * w * h
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {w}x{h}, found {len(data)}")
    grid = np.frombuffer(data[12:], dtype="<f4").astype(float)
    fx = grid[: w * h].reshape(h, w)
    fy = grid[w * h :].reshape(h, w)
    return FlowField(fx, fy)
