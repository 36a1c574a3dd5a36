"""Label masks, barycenters, the 6-segment myocardial division and
boundary extraction.

Coordinates are (x, y) pixel positions; arrays are indexed [y, x].
Structure codes: 0 background, 1 LV cavity, 2 LV myocardium, 3 RV cavity.
"""

import json
import math

import numpy as np

from .errors import (
    DataError,
    DegenerateSegmentError,
    FormatError,
    MissingStructureError,
    ValidationError,
)

BACKGROUND = 0
LVC = 1
LVM = 2
RVC = 3

STRUCTURE_NAMES = {BACKGROUND: "background", LVC: "LVC", LVM: "LVM", RVC: "RVC"}
N_SEGMENTS = 6

_SEGMENT_ANGLE = math.pi / 3.0


class LabelMask:
    """Per-pixel categorical mask over {background, LVC, LVM, RVC}."""

    def __init__(self, labels):
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise ValidationError("labels", "expected a 2-D label grid")
        if labels.max(initial=0) > RVC:
            raise ValidationError("labels", "codes must be in {0, 1, 2, 3}")
        self.labels = labels

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape

    def structure(self, code):
        """Boolean image of the pixels carrying ``code``."""
        return self.labels == code

    def count(self, code):
        return int(np.count_nonzero(self.labels == code))

    def __eq__(self, other):
        return isinstance(other, LabelMask) and np.array_equal(self.labels, other.labels)


def barycenter(mask, code):
    """Arithmetic mean (x, y) of the pixels labeled ``code``.

    Raises MissingStructureError when the structure is empty.
    """
    ys, xs = np.nonzero(mask.labels == code)
    if xs.size == 0:
        raise MissingStructureError(code, STRUCTURE_NAMES.get(code, str(code)))
    return np.array([xs.mean(), ys.mean()])


class SegmentMap:
    """Assignment of every LVM pixel to one of 6 angular segments.

    ``assignment`` holds the segment index in [0, 5] for LVM pixels and
    -1 elsewhere.  ``b_l`` and ``b_r`` are the LVC and RVC barycenters
    the angles were measured from.
    """

    def __init__(self, assignment, b_l, b_r):
        self.assignment = assignment
        self.b_l = np.asarray(b_l, dtype=float)
        self.b_r = np.asarray(b_r, dtype=float)

    def segment(self, k):
        """Boolean image of the pixels assigned to segment ``k``."""
        return self.assignment == k

    def counts(self):
        return np.array([int(np.count_nonzero(self.assignment == k)) for k in range(N_SEGMENTS)])

    def to_json_dict(self):
        return {
            "b_l": [float(self.b_l[0]), float(self.b_l[1])],
            "b_r": [float(self.b_r[0]), float(self.b_r[1])],
            "segment_counts": [int(c) for c in self.counts()],
            "assignment": self.assignment.astype(int).tolist(),
        }

    def dump_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)


def segment_angles(points, b_l, b_r):
    """Angle in [0, 2*pi) of each point about b_l, measured from the
    b_l->b_r direction, counterclockwise in image coordinates."""
    b_l = np.asarray(b_l, dtype=float)
    b_r = np.asarray(b_r, dtype=float)
    ref = math.atan2(b_r[1] - b_l[1], b_r[0] - b_l[0])
    v = np.asarray(points, dtype=float) - b_l
    ang = np.arctan2(v[..., 1], v[..., 0]) - ref
    return np.mod(ang, 2.0 * math.pi)


def divide_segments(mask):
    """Divide the LVM pixels into 6 segments by the angle between
    B_L->P and B_L->B_R, binned into [k*pi/3, (k+1)*pi/3).

    A pixel exactly at B_L (angle undefined) goes to segment 0.
    """
    b_l = barycenter(mask, LVC)
    b_r = barycenter(mask, RVC)
    if np.allclose(b_l, b_r):
        raise ValidationError("mask", "LVC and RVC barycenters coincide; segment angles undefined")
    ys, xs = np.nonzero(mask.labels == LVM)
    if xs.size == 0:
        raise MissingStructureError(LVM, STRUCTURE_NAMES[LVM])
    pts = np.stack([xs, ys], axis=-1).astype(float)
    ang = segment_angles(pts, b_l, b_r)
    k = np.minimum((ang / _SEGMENT_ANGLE).astype(np.int64), N_SEGMENTS - 1)
    assignment = np.full(mask.shape, -1, dtype=np.int8)
    assignment[ys, xs] = k
    return SegmentMap(assignment, b_l, b_r)


def _adjacent_to(region):
    """Pixels having at least one 4-connected neighbor inside ``region``."""
    adj = np.zeros_like(region, dtype=bool)
    adj[1:, :] |= region[:-1, :]
    adj[:-1, :] |= region[1:, :]
    adj[:, 1:] |= region[:, :-1]
    adj[:, :-1] |= region[:, 1:]
    return adj


def inner_boundary(mask, seg, k):
    """LVC pixels with a 4-connected neighbor in segment ``k``."""
    if not np.any(seg.assignment == k):
        raise DegenerateSegmentError(k, "segment has no pixels")
    boundary = mask.structure(LVC) & _adjacent_to(seg.assignment == k)
    if not boundary.any():
        raise DegenerateSegmentError(k, "no cavity pixel adjacent to the segment")
    return boundary

def outer_boundary(mask, seg, k):
    """Segment-``k`` pixels with a 4-connected neighbor in the background."""
    region = seg.assignment == k
    if not region.any():
        raise DegenerateSegmentError(k, "segment has no pixels")
    boundary = region & _adjacent_to(mask.structure(BACKGROUND))
    if not boundary.any():
        raise DegenerateSegmentError(k, "no segment pixel adjacent to the background")
    return boundary


def boundary_points(boundary):
    """(N, 2) array of (x, y) coordinates of a boolean boundary image."""
    ys, xs = np.nonzero(boundary)
    return np.stack([xs, ys], axis=-1).astype(float)


def segment_radius_thickness(mask, seg):
    """Per-segment radius and thickness of the resting mask, in pixels.

    Radius is the distance from the LVC barycenter to the barycenter of
    the segment's inner boundary; thickness is the extra distance to the
    barycenter of its outer boundary.
    """
    b = barycenter(mask, LVC)
    ra = np.empty(N_SEGMENTS)
    th = np.empty(N_SEGMENTS)
    for k in range(N_SEGMENTS):
        inner = boundary_points(inner_boundary(mask, seg, k)).mean(axis=0)
        outer = boundary_points(outer_boundary(mask, seg, k)).mean(axis=0)
        ra[k] = np.hypot(*(inner - b))
        th[k] = np.hypot(*(outer - b)) - ra[k]
    return ra, th


# ---------------------------------------------------------------------------
# PGM codec (binary P5).  Frames are stored as 8-bit intensities with
# maxval 255; masks reuse the same container with raw structure codes.
# ---------------------------------------------------------------------------

def write_pgm(path, values, maxval=255):
    values = np.asarray(values)
    if values.dtype != np.uint8:
        raise ValidationError("values", "PGM writer expects uint8 data")
    h, w = values.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + values.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (missing P5 magic)")
    # header = magic, width, height, maxval, single whitespace, then raster
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval > 255 or maxval <= 0:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    raster = data[pos:]
    if len(raster) != w * h:
        raise FormatError(f"{path}: expected {w * h} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_mask(path, mask):
    write_pgm(path, mask.labels, maxval=255)


def read_mask(path):
    values = read_pgm(path)
    if values.max(initial=0) > RVC:
        raise FormatError(f"{path}: mask codes exceed {RVC}")
    return LabelMask(values)


def write_frame(path, image):
    """Store a [0, 1] intensity image as 8-bit grayscale."""
    img = np.asarray(image, dtype=float)
    if img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValidationError("image", "intensities must lie in [0, 1]")
    write_pgm(path, np.round(img * 255.0).astype(np.uint8))


def read_frame(path):
    return read_pgm(path).astype(float) / 255.0


def require_structures(mask, codes=(LVC, LVM, RVC)):
    """Raise MissingStructureError for the first absent code."""
    for code in codes:
        if not np.any(mask.labels == code):
            raise MissingStructureError(code, STRUCTURE_NAMES[code])


def as_label_mask(mask):
    if isinstance(mask, LabelMask):
        return mask
    return LabelMask(np.asarray(mask))


def check_same_shape(name, a, b):
    if a.shape != b.shape:
        raise DataError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
