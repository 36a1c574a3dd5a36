"""Synthetic 2D+t cine phantom with analytic ground truth.

Each case is a short-axis stack of independent 2D+t sequences: an LV
ring (cavity + myocardium) contracting radially about its center, and
an RV crescent contracting about its own center.  Because the motion is
a per-sector radial map, masks at every frame and the dense displacement
field from ED to every frame are the same analytic function evaluated
two ways, so downstream flow and feature code can be checked against
exact ground truth.

Motion model, per myocardial sector k and frame t with activity a_k,
contraction amplitude c, thickening amplitude m and profile s(t):

    cavity radius scale     lam_k = 1 - a_k * c * s(t)
    wall thickness scale    omg_k = 1 + a_k * m * s(t)

A pixel at radius r moves to phi(r): r*lam_k inside the cavity, linear
wall stretch by omg_k across the ring, then a short decay annulus back
to the identity.  The RV crescent is the RV disc cut by a circle around
the LV (leaving a background gap so every segment has an outer
boundary), scaled about the RV center by 1 - c_rv * s(t).

Five phenotypes: NOR (uniform normal motion), HCM (thick wall, strong
motion, small cavity), DCM (dilated, uniformly weak motion), MINF
(heterogeneous per-segment activity, low ejection fraction), RVA
(enlarged, weakly contracting RV).
"""

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .anatomy import BACKGROUND, LVC, LVM, RVC, LabelMask, write_frame, write_mask
from .errors import ValidationError
from .flowcore import FlowField, write_flow

CATEGORIES = ("NOR", "HCM", "DCM", "MINF", "RVA")

_INTENSITY = {BACKGROUND: 0.1, LVC: 0.4, LVM: 0.8, RVC: 0.5}
_RV_DECAY_PX = 3.0


@dataclass
class PhantomSpec:
    category: str
    image_size: int = 128
    n_slices: int = 8
    n_frames: int = 20
    lv_center: tuple = (76.0, 64.0)
    rv_center: tuple | None = None
    endo_radius_ed: float = 15.0
    epi_radius_ed: float = 21.0
    rv_radius_ed: float = 18.0
    contraction_amplitude: float = 0.35
    thickening_amplitude: float = 0.30
    rv_contraction_amplitude: float = 0.30
    per_segment_activity: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    height_cm: float = 170.0
    weight_kg: float = 70.0
    noise_sigma: float = 0.01
    rng_seed: int = 0
    pixel_spacing_mm: float = 1.4
    slice_gap_mm: float = 10.0
    es_phase: float = 0.38
    apex_taper: float = 0.20
    rv_extent: float = 0.85
    rv_gap_px: float = 4.0
    decay_px: float = 3.0

    def __post_init__(self):
        self.per_segment_activity = tuple(float(a) for a in self.per_segment_activity)
        if self.rv_center is None:
            d = self.epi_radius_ed + self.rv_gap_px + 0.55 * self.rv_radius_ed
            self.rv_center = (self.lv_center[0] - d, self.lv_center[1])
        self.lv_center = (float(self.lv_center[0]), float(self.lv_center[1]))
        self.rv_center = (float(self.rv_center[0]), float(self.rv_center[1]))
        validate_spec(self)


def validate_spec(spec):
    if spec.category not in CATEGORIES:
        raise ValidationError("category", f"unknown category {spec.category!r}")
    if spec.image_size < 48:
        raise ValidationError("image_size", "must be >= 48")
    if not 2 <= spec.n_slices:
        raise ValidationError("n_slices", "must be >= 2")
    if not 12 <= spec.n_frames <= 35:
        raise ValidationError("n_frames", "must be in [12, 35]")
    if spec.endo_radius_ed >= spec.epi_radius_ed:
        raise ValidationError("endo_radius_ed", "must be smaller than epi_radius_ed")
    if spec.endo_radius_ed <= 2:
        raise ValidationError("endo_radius_ed", "must exceed 2 px")
    if len(spec.per_segment_activity) != 6:
        raise ValidationError("per_segment_activity", "expected 6 values")
    acts = np.asarray(spec.per_segment_activity)
    if acts.min() < 0.0 or acts.max() > 1.0:
        raise ValidationError("per_segment_activity", "values must lie in [0, 1]")
    if not 0.0 < spec.es_phase < 1.0:
        raise ValidationError("es_phase", "must lie in (0, 1)")
    if not 0.0 <= spec.apex_taper < 0.5:
        raise ValidationError("apex_taper", "must lie in [0, 0.5)")
    if spec.noise_sigma < 0.0:
        raise ValidationError("noise_sigma", "must be >= 0")
    if spec.decay_px > spec.rv_gap_px:
        raise ValidationError("decay_px", "must not exceed rv_gap_px (fields would overlap)")
    if not 0.0 <= spec.contraction_amplitude < 0.9:
        raise ValidationError("contraction_amplitude", "must lie in [0, 0.9)")
    if not 0.0 <= spec.rv_contraction_amplitude < 0.9:
        raise ValidationError("rv_contraction_amplitude", "must lie in [0, 0.9)")
    if spec.thickening_amplitude < 0.0:
        raise ValidationError("thickening_amplitude", "must be >= 0")

    # the geometry has to fit inside the image with room for the decay zone
    margin = spec.epi_radius_ed + spec.decay_px + 2.0
    cx, cy = spec.lv_center
    n = spec.image_size
    if not (margin <= cx <= n - 1 - margin and margin <= cy <= n - 1 - margin):
        raise ValidationError("lv_center", "ring does not fit inside the image")
    rx, ry = spec.rv_center
    rv_margin = spec.rv_radius_ed + _RV_DECAY_PX + 1.0
    if not (rv_margin <= rx <= n - 1 - rv_margin and rv_margin <= ry <= n - 1 - rv_margin):
        raise ValidationError("rv_center", "RV crescent does not fit inside the image")

    # category phenotype constraints
    spread = float(acts.max() - acts.min())
    if spec.category == "MINF":
        if spread < 0.4:
            raise ValidationError("per_segment_activity", "MINF needs an activity spread >= 0.4")
    elif spread > 1e-12:
        raise ValidationError("per_segment_activity", f"{spec.category} needs uniform activity")

    ef = analytic_lvc_ef(spec)
    if spec.category in ("DCM", "MINF") and not ef < 0.40:
        raise ValidationError("contraction_amplitude", f"{spec.category} needs analytic EF < 0.40, got {ef:.3f}")
    if spec.category == "HCM":
        wall_mm = (spec.epi_radius_ed - spec.endo_radius_ed) * spec.pixel_spacing_mm
        if not wall_mm > 15.0:
            raise ValidationError("epi_radius_ed", f"HCM needs ED wall > 15 mm, got {wall_mm:.1f}")
        if not ef >= 0.45:
            raise ValidationError("contraction_amplitude", f"HCM needs a normal EF, got {ef:.3f}")
    if spec.category == "RVA":
        rv_ef = analytic_rvc_ef(spec)
        if not rv_ef < 0.40:
            raise ValidationError("rv_contraction_amplitude", f"RVA needs analytic RV EF < 0.40, got {rv_ef:.3f}")

    # peak deformation must stay monotone in radius and inside the decay zone
    s = 1.0
    lam = 1.0 - acts * spec.contraction_amplitude * s
    omg = 1.0 + acts * spec.thickening_amplitude * s
    if lam.min() <= 0.05:
        raise ValidationError("contraction_amplitude", "cavity would collapse at peak contraction")
    wall = spec.epi_radius_ed - spec.endo_radius_ed
    phi_ep = spec.endo_radius_ed * lam + wall * omg
    if (phi_ep - spec.epi_radius_ed).max() >= 0.9 * spec.decay_px:
        raise ValidationError("thickening_amplitude", "epicardium would overrun the decay zone at peak")


# ---------------------------------------------------------------------------
# Analytic machinery
# ---------------------------------------------------------------------------

def activity_profile(spec, frame):
    """Contraction profile s(t) in [0, 1]: sinusoidal rise to the ES
    phase, sinusoidal fall back to the cycle end; 0 at ED."""
    tau = float(frame) / spec.n_frames
    if tau <= spec.es_phase:
        return math.sin(0.5 * math.pi * tau / spec.es_phase) ** 2
    return math.cos(0.5 * math.pi * (tau - spec.es_phase) / (1.0 - spec.es_phase)) ** 2


def _sector_scales(spec, frame):
    s = activity_profile(spec, frame)
    acts = np.asarray(spec.per_segment_activity)
    lam = 1.0 - acts * spec.contraction_amplitude * s
    omg = 1.0 + acts * spec.thickening_amplitude * s
    lam_rv = 1.0 - spec.rv_contraction_amplitude * s
    return lam, omg, lam_rv


def _slice_taper(spec, slice_idx):
    if spec.n_slices == 1:
        return 1.0
    return 1.0 - spec.apex_taper * slice_idx / (spec.n_slices - 1)


def slice_radii(spec, slice_idx):
    """(endo, epi, rv, cutoff) radii of a slice at ED, in pixels; the RV
    radius is 0 on apical slices beyond the RV extent."""
    t = _slice_taper(spec, slice_idx)
    r_en = spec.endo_radius_ed * t
    r_ep = spec.epi_radius_ed * t
    if slice_idx < math.ceil(spec.rv_extent * spec.n_slices):
        rv_t = 1.0 - 0.35 * (slice_idx / max(spec.n_slices - 1, 1))
        r_rv = spec.rv_radius_ed * rv_t
    else:
        r_rv = 0.0
    return r_en, r_ep, r_rv, r_ep + spec.rv_gap_px


def _grid(spec):
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    return xs, ys


def _sector_of(spec, xs, ys):
    cx, cy = spec.lv_center
    ref = math.atan2(spec.rv_center[1] - cy, spec.rv_center[0] - cx)
    ang = np.mod(np.arctan2(ys - cy, xs - cx) - ref, 2.0 * math.pi)
    return np.minimum((ang / (math.pi / 3.0)).astype(np.int64), 5)


def _radial_map(r, r_en, r_ep, decay, lam, omg):
    """phi(r) for the per-sector LV radial map (vectorized; lam and omg
    are already expanded per pixel)."""
    wall = r_ep - r_en
    phi_ep = r_en * lam + wall * omg
    r_out = r_ep + decay
    phi = np.where(r <= r_en, r * lam, r_en * lam + (r - r_en) * omg)
    in_decay = (r > r_ep) & (r <= r_out)
    slope = (r_out - phi_ep) / decay
    phi = np.where(in_decay, phi_ep + (r - r_ep) * slope, phi)
    return np.where(r > r_out, r, phi)


def displacement(spec, slice_idx, frame):
    """Analytic dense displacement (dx, dy) from ED to ``frame``."""
    lam6, omg6, lam_rv = _sector_scales(spec, frame)
    r_en, r_ep, r_rv, r_cut = slice_radii(spec, slice_idx)
    xs, ys = _grid(spec)
    cx, cy = spec.lv_center
    dx = xs - cx
    dy = ys - cy
    r = np.hypot(dx, dy)
    k = _sector_of(spec, xs, ys)
    lam = lam6[k]
    omg = omg6[k]
    phi = _radial_map(r, r_en, r_ep, spec.decay_px, lam, omg)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(r > 0, phi / np.maximum(r, 1e-12), 1.0)
    ux = (scale - 1.0) * dx
    uy = (scale - 1.0) * dy

    if r_rv > 0.0:
        rx, ry = spec.rv_center
        dxr = xs - rx
        dyr = ys - ry
        rr = np.hypot(dxr, dyr)
        r_out = r_rv + _RV_DECAY_PX
        psi = np.where(rr <= r_rv, rr * lam_rv, rr)
        in_decay = (rr > r_rv) & (rr <= r_out)
        slope = (r_out - r_rv * lam_rv) / _RV_DECAY_PX
        psi = np.where(in_decay, r_rv * lam_rv + (rr - r_rv) * slope, psi)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale_rv = np.where(rr > 0, psi / np.maximum(rr, 1e-12), 1.0)
        support = r > r_cut
        ux = ux + np.where(support, (scale_rv - 1.0) * dxr, 0.0)
        uy = uy + np.where(support, (scale_rv - 1.0) * dyr, 0.0)
    return ux, uy


def rasterize_mask(spec, slice_idx, frame):
    """Analytic label mask of a slice at ``frame``."""
    lam6, omg6, lam_rv = _sector_scales(spec, frame)
    r_en, r_ep, r_rv, r_cut = slice_radii(spec, slice_idx)
    xs, ys = _grid(spec)
    cx, cy = spec.lv_center
    r = np.hypot(xs - cx, ys - cy)
    k = _sector_of(spec, xs, ys)
    lam = lam6[k]
    omg = omg6[k]
    wall = r_ep - r_en
    cavity_edge = r_en * lam
    outer_edge = cavity_edge + wall * omg

    labels = np.full(r.shape, BACKGROUND, dtype=np.uint8)
    labels[r < cavity_edge] = LVC
    labels[(r >= cavity_edge) & (r < outer_edge)] = LVM

    if r_rv > 0.0:
        rx, ry = spec.rv_center
        rr = np.hypot(xs - rx, ys - ry)
        # image of the cutoff circle under the RV scaling about rv_center
        ccx = rx + lam_rv * (cx - rx)
        ccy = ry + lam_rv * (cy - ry)
        rc = np.hypot(xs - ccx, ys - ccy)
        crescent = (rr < r_rv * lam_rv) & (rc > r_cut * lam_rv) & (labels == BACKGROUND)
        labels[crescent] = RVC
    return LabelMask(labels)


def rasterize_frame(spec, slice_idx, frame, rng=None):
    """Intensity image of a slice at ``frame``: piecewise-constant
    structures, 1 px Gaussian smoothing, then additive noise."""
    mask = rasterize_mask(spec, slice_idx, frame)
    img = np.full(mask.shape, _INTENSITY[BACKGROUND])
    for code, value in _INTENSITY.items():
        if code != BACKGROUND:
            img[mask.labels == code] = value
    img = gaussian_filter(img, 1.0, mode="nearest")
    if rng is not None and spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def analytic_lvc_area(spec, slice_idx, frame):
    """Exact cavity area of the deformed ring model, in px^2."""
    lam6, _, _ = _sector_scales(spec, frame)
    r_en, _, _, _ = slice_radii(spec, slice_idx)
    return float(math.pi * r_en**2 / 6.0 * (lam6**2).sum())


def es_frame(spec):
    """Frame index minimizing the analytic cavity area."""
    areas = [analytic_lvc_area(spec, 0, t) for t in range(spec.n_frames)]
    return int(np.argmin(areas))


def analytic_lvc_ef(spec):
    a_ed = analytic_lvc_area(spec, 0, 0)
    a_es = analytic_lvc_area(spec, 0, es_frame(spec))
    return 1.0 - a_es / a_ed


def analytic_rvc_ef(spec):
    s = activity_profile(spec, es_frame(spec))
    lam_rv = 1.0 - spec.rv_contraction_amplitude * s
    return 1.0 - lam_rv**2


@dataclass
class PhantomCase:
    """A generated case: frames[slice][frame] intensity stack, analytic
    masks and ED->frame flows, and the analytic ES index."""

    spec: PhantomSpec
    frames: np.ndarray
    gt_masks: list
    gt_flow: list
    es_frame_index: int

    @property
    def n_slices(self):
        return self.spec.n_slices

    @property
    def n_frames(self):
        return self.spec.n_frames

    def slice_positions_mm(self):
        return np.arange(self.spec.n_slices) * self.spec.slice_gap_mm


def generate_case(spec):
    """Deterministic phantom generation from a validated spec."""
    rng = np.random.default_rng(spec.rng_seed)
    n = spec.image_size
    frames = np.empty((spec.n_slices, spec.n_frames, n, n))
    gt_masks = []
    gt_flow = []
    for s in range(spec.n_slices):
        masks_s = []
        flows_s = []
        for t in range(spec.n_frames):
            frames[s, t] = rasterize_frame(spec, s, t, rng)
            masks_s.append(rasterize_mask(spec, s, t))
            ux, uy = displacement(spec, s, t)
            flows_s.append(FlowField(ux, uy))
        gt_masks.append(masks_s)
        gt_flow.append(flows_s)
    return PhantomCase(spec, frames, gt_masks, gt_flow, es_frame(spec))


# ---------------------------------------------------------------------------
# Cohort sampling
# ---------------------------------------------------------------------------

def _spec_for(category, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform

    def ef_to_c(ef):
        return 1.0 - math.sqrt(1.0 - ef)

    common = dict(
        category=category,
        rng_seed=seed,
        n_frames=int(rng.integers(12, 31)),
        lv_center=(76.0 + u(-3, 3), 64.0 + u(-3, 3)),
        height_cm=u(155, 190),
        weight_kg=u(52, 95),
        es_phase=u(0.33, 0.42),
        apex_taper=u(0.15, 0.25),
        noise_sigma=0.01,
    )
    if category == "NOR":
        endo = u(14, 17)
        return PhantomSpec(
            endo_radius_ed=endo, epi_radius_ed=endo + u(5.5, 7.5),
            contraction_amplitude=ef_to_c(u(0.50, 0.65)),
            thickening_amplitude=u(0.25, 0.40),
            rv_radius_ed=u(16, 20), rv_contraction_amplitude=ef_to_c(u(0.45, 0.60)),
            **common,
        )
    if category == "HCM":
        endo = u(11, 14)
        return PhantomSpec(
            endo_radius_ed=endo, epi_radius_ed=endo + u(11, 14),
            contraction_amplitude=ef_to_c(u(0.55, 0.70)),
            thickening_amplitude=u(0.30, 0.45),
            rv_radius_ed=u(16, 20), rv_contraction_amplitude=ef_to_c(u(0.45, 0.60)),
            **common,
        )
    if category == "DCM":
        endo = u(20, 25)
        return PhantomSpec(
            endo_radius_ed=endo, epi_radius_ed=endo + u(4, 5.5),
            contraction_amplitude=ef_to_c(u(0.10, 0.30)),
            thickening_amplitude=u(0.03, 0.10),
            rv_radius_ed=u(15, 19), rv_contraction_amplitude=ef_to_c(u(0.40, 0.55)),
            **common,
        )
    if category == "MINF":
        endo = u(17, 21)
        c = u(0.50, 0.60)
        hi = u(0.60, min(0.70, 0.41 / c))
        lo = u(0.05, 0.12)
        n_lo = int(rng.integers(3, 5))
        start = int(rng.integers(0, 6))
        acts = [hi] * 6
        for j in range(n_lo):
            acts[(start + j) % 6] = lo
        return PhantomSpec(
            endo_radius_ed=endo, epi_radius_ed=endo + u(5, 7),
            contraction_amplitude=c, per_segment_activity=tuple(acts),
            thickening_amplitude=u(0.30, 0.45),
            rv_radius_ed=u(16, 20), rv_contraction_amplitude=ef_to_c(u(0.45, 0.60)),
            **common,
        )
    if category == "RVA":
        endo = u(14, 17)
        return PhantomSpec(
            endo_radius_ed=endo, epi_radius_ed=endo + u(5.5, 7.5),
            contraction_amplitude=ef_to_c(u(0.50, 0.65)),
            thickening_amplitude=u(0.25, 0.40),
            rv_radius_ed=u(24, 28), rv_contraction_amplitude=ef_to_c(u(0.08, 0.25)),
            **common,
        )
    raise ValidationError("category", f"unknown category {category!r}")


def sample_cohort_specs(n_per_category, base_seed):
    """Deterministic category-balanced specs; case index i*5+j carries
    seed base_seed + index."""
    if n_per_category < 1:
        raise ValidationError("n_per_category", "must be >= 1")
    specs = []
    for i in range(n_per_category):
        for j, category in enumerate(CATEGORIES):
            specs.append(_spec_for(category, base_seed + i * len(CATEGORIES) + j))
    return specs


def sample_cohort(n_per_category, base_seed):
    """Fully generated category-balanced cohort (5 * n cases)."""
    return [generate_case(s) for s in sample_cohort_specs(n_per_category, base_seed)]


# ---------------------------------------------------------------------------
# Case directory writer
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def case_manifest(case, case_id):
    spec = case.spec
    return {
        "format": "cardioflow-case-v1",
        "case_id": case_id,
        "category": spec.category,
        "ed_frame_index": 0,
        "es_frame_index": case.es_frame_index,
        "n_slices": spec.n_slices,
        "n_frames": spec.n_frames,
        "image_size": spec.image_size,
        "pixel_spacing_mm": spec.pixel_spacing_mm,
        "slice_gap_mm": spec.slice_gap_mm,
        "height_cm": spec.height_cm,
        "weight_kg": spec.weight_kg,
        "spec": dataclasses.asdict(spec),
    }


def write_case(case, directory, case_id=None):
    """Write a case directory: frames and masks as PGM, analytic flows
    in the CFL1 binary format, metadata in a JSON manifest."""
    directory = Path(directory)
    case_id = case_id or f"{case.spec.category}_{case.spec.rng_seed:06d}"
    for sub in ("frames", "masks", "gt_flow"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for s in range(case.n_slices):
        for t in range(case.n_frames):
            tag = f"s{s:02d}_t{t:02d}"
            write_frame(directory / "frames" / f"{tag}.pgm", case.frames[s, t])
            write_mask(directory / "masks" / f"{tag}.pgm", case.gt_masks[s][t])
            write_flow(directory / "gt_flow" / f"{tag}.cfl1", case.gt_flow[s][t])
    manifest = case_manifest(case, case_id)
    tmp = directory / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    tmp.replace(directory / MANIFEST_NAME)
    return directory
