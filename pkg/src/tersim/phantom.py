"""Parametric patient body: breathing abdominal surface and synthetic volume.

The body is an axis-aligned ellipsoid whose anterior (+z) semi-axis is
scaled by 1 + A*sin(2*pi*t/T) to mimic breathing.  A straight vessel with
an ellipsoidal aneurysm bulge is embedded in the rest-frame volume and
rigidly follows the breathing scaling.  Image slices are extracted on the
plane spanned by the probe axis (image depth) and the probe lateral axis.

The chart (u, v) in [0,1]^2 covers the anterior half only:
theta = 2*pi*u (azimuth), phi = (pi/2)*v (polar angle from +z), so v=0 is
the apex and v=1 the equator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import quat_to_matrix


class ChartDomainError(ValueError):
    """(u, v) outside the [0,1]^2 chart domain."""


@dataclass(frozen=True)
class BodySurface:
    """Breathing ellipsoid, semi-axes in mm, anterior axis = c (+z)."""

    a: float = 160.0
    b: float = 120.0
    c: float = 110.0
    breathing_amplitude: float = 0.02
    breathing_period: float = 4.0

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("semi-axes must be positive")
        if not 0.0 <= self.breathing_amplitude < 0.2:
            raise ValueError("breathing amplitude must be in [0, 0.2)")
        if self.breathing_period <= 0:
            raise ValueError("breathing period must be positive")

    def breathing_scale(self, t: float) -> float:
        return 1.0 + self.breathing_amplitude * math.sin(2.0 * math.pi * t / self.breathing_period)

    def _angles(self, u: float, v: float) -> tuple[float, float]:
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ChartDomainError(f"chart point ({u}, {v}) outside [0,1]^2")
        return 2.0 * math.pi * u, 0.5 * math.pi * v

    def surface_point(self, u: float, v: float, t: float) -> np.ndarray:
        """Surface point in mm at time t (anterior axis breathes)."""
        theta, phi = self._angles(u, v)
        s = self.breathing_scale(t)
        sp = math.sin(phi)
        return np.array(
            [
                self.a * sp * math.cos(theta),
                self.b * sp * math.sin(theta),
                self.c * s * math.cos(phi),
            ]
        )

    def surface_point_rest(self, u: float, v: float) -> np.ndarray:
        """Surface point with breathing frozen at scale 1 (sin term zero)."""
        theta, phi = self._angles(u, v)
        sp = math.sin(phi)
        return np.array(
            [self.a * sp * math.cos(theta), self.b * sp * math.sin(theta), self.c * math.cos(phi)]
        )

    def chart_from_point_rest(self, p) -> tuple[float, float]:
        """Invert surface_point_rest for a point on the rest surface."""
        x, y, z = (float(c) for c in p)
        phi = math.acos(max(-1.0, min(1.0, z / self.c)))
        theta = math.atan2(y / self.b, x / self.a)
        return (theta / (2.0 * math.pi)) % 1.0, phi / (0.5 * math.pi)

    def surface_normal(self, u: float, v: float, t: float) -> np.ndarray:
        """Outward unit normal (implicit-surface gradient; well defined at the apex)."""
        p = self.surface_point(u, v, t)
        s = self.breathing_scale(t)
        g = np.array([p[0] / self.a**2, p[1] / self.b**2, p[2] / (self.c * s) ** 2])
        n = math.sqrt(float(np.dot(g, g)))
        if n == 0.0:
            return np.array([0.0, 0.0, 1.0])
        return g / n

    def tangent_frame(self, u: float, v: float, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right-handed local frame (e1, e2, n).

        e1 follows the azimuthal tangent (finite limit at the apex),
        n is the outward normal and e2 = n x e1.
        """
        theta, _ = self._angles(u, v)
        n = self.surface_normal(u, v, t)
        w = np.array([-self.a * math.sin(theta), self.b * math.cos(theta), 0.0])
        e1 = w / math.sqrt(float(np.dot(w, w)))
        e2 = np.cross(n, e1)
        return e1, e2, n

    def semi_axes(self, t: float) -> tuple[float, float, float]:
        return self.a, self.b, self.c * self.breathing_scale(t)

    def contains(self, p, t: float) -> bool:
        ka, kb, kc = self.semi_axes(t)
        x, y, z = (float(c) for c in p)
        return (x / ka) ** 2 + (y / kb) ** 2 + (z / kc) ** 2 <= 1.0

    def nearest_surface_point(self, p, t: float) -> tuple[np.ndarray, float]:
        """Closest surface point and signed distance (negative inside).

        Solves the classical point-to-ellipsoid projection: the foot point is
        q_i = k_i^2 p_i / (k_i^2 + lam) where lam is the root of
        sum (k_i p_i / (k_i^2 + lam))^2 = 1, found by safeguarded bisection.
        """
        ks = self.semi_axes(t)
        px, py, pz = (float(c) for c in p)
        comps = [(k, pc) for k, pc in zip(ks, (px, py, pz)) if pc != 0.0]
        if not comps:
            kmin = min(ks)
            axis = int(np.argmin(ks))
            q = np.zeros(3)
            q[axis] = kmin
            return q, -kmin
        inside = (px / ks[0]) ** 2 + (py / ks[1]) ** 2 + (pz / ks[2]) ** 2 <= 1.0

        def g(lam: float) -> float:
            return sum((k * pc / (k * k + lam)) ** 2 for k, pc in comps) - 1.0

        if inside:
            lo = -min(k * k for k, _ in comps)
            hi = 0.0
            # g -> +inf at lo+, g(0) <= 0
            lo = lo + 1e-12 * max(1.0, -lo)
            while g(lo) < 0.0:  # p extremely close to a degenerate stratum
                lo *= 0.5
                if abs(lo) < 1e-30:
                    break
        else:
            lo = 0.0
            hi = max(ks) * max(abs(px), abs(py), abs(pz)) + max(ks) ** 2
            while g(hi) > 0.0:
                hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:
                break
            if g(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        q = np.array([k * k * pc / (k * k + lam) for k, pc in zip(ks, (px, py, pz))])
        d = math.sqrt(float(np.dot(q - np.array([px, py, pz]), q - np.array([px, py, pz]))))
        return q, (-d if inside else d)


@dataclass(frozen=True)
class VascularPhantom:
    """Straight vessel with an ellipsoid-of-revolution aneurysm bulge.

    Geometry lives in rest (breath-out-neutral) coordinates; the breathing
    scaling is applied when sampling.  `aneurysm_center` is a signed offset
    along the axis direction from `axis_point`.
    """

    axis_point: tuple[float, float, float] = (0.0, -20.0, 80.0)
    axis_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)
    vessel_radius: float = 15.0
    aneurysm_center: float = 0.0
    aneurysm_ap_diameter: float = 50.0
    aneurysm_length: float = 60.0
    intensity_vessel: int = 30
    intensity_tissue: int = 150

    def __post_init__(self):
        d = np.asarray(self.axis_dir, dtype=float)
        n = math.sqrt(float(np.dot(d, d)))
        if n == 0:
            raise ValueError("vessel axis direction must be nonzero")
        object.__setattr__(self, "axis_dir", tuple(float(c) for c in d / n))
        if self.vessel_radius <= 0:
            raise ValueError("vessel radius must be positive")
        if self.aneurysm_ap_diameter < 2 * self.vessel_radius:
            raise ValueError("aneurysm AP diameter must be >= vessel diameter")
        if self.aneurysm_length <= 0:
            raise ValueError("aneurysm length must be positive")
        for name in ("intensity_vessel", "intensity_tissue"):
            val = getattr(self, name)
            if not 0 < val <= 255:
                raise ValueError(f"{name} must be in 1..255 (0 is the outside-body level)")
        if self.intensity_vessel == self.intensity_tissue:
            raise ValueError("vessel and tissue intensities must differ")


def ap_diameter_ground_truth(phantom: VascularPhantom) -> float:
    """Maximal lumen extent along the anterior-posterior direction, mm."""
    return float(phantom.aneurysm_ap_diameter)


def sample_volume(body: BodySurface, phantom: VascularPhantom, p, t: float):
    """Intensity at point(s) p (mm): vessel level inside the lumen, tissue
    level elsewhere inside the body, 0 outside.  Accepts shape (..., 3).
    """
    pts = np.asarray(p, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    s = body.breathing_scale(t)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2] / s
    inside_body = (x / body.a) ** 2 + (y / body.b) ** 2 + (z / body.c) ** 2 <= 1.0

    ax = np.asarray(phantom.axis_point)
    d = np.asarray(phantom.axis_dir)
    rel = np.stack([x - ax[0], y - ax[1], z - ax[2]], axis=-1)
    xi = rel @ d
    radial = rel - xi[..., None] * d
    rho2 = np.einsum("...i,...i->...", radial, radial)
    in_cyl = rho2 <= phantom.vessel_radius**2
    half_len = phantom.aneurysm_length / 2.0
    half_ap = phantom.aneurysm_ap_diameter / 2.0
    off = xi - phantom.aneurysm_center
    in_bulge = (off / half_len) ** 2 + rho2 / half_ap**2 <= 1.0
    lumen = in_cyl | in_bulge

    out = np.where(
        inside_body,
        np.where(lumen, phantom.intensity_vessel, phantom.intensity_tissue),
        0,
    ).astype(np.uint8)
    return out[0] if scalar else out


@dataclass(frozen=True)
class ProbePose:
    """Probe tip pose: world position (mm), orientation quaternion and the
    fine axial translation joint value (already folded into tip_position).

    Probe frame convention: orientation matrix columns are (lateral,
    elevation, -axis); the probe axis (image depth direction, pointing into
    the body) is minus the third column.
    """

    tip_position: tuple[float, float, float]
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    fine_d: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float)
        if abs(math.sqrt(float(np.dot(q, q))) - 1.0) > 1e-9:
            raise ValueError("orientation quaternion must be unit norm within 1e-9")
        object.__setattr__(self, "tip_position", tuple(float(c) for c in self.tip_position))
        object.__setattr__(self, "orientation", tuple(float(c) for c in q))

    @property
    def axis(self) -> np.ndarray:
        """Unit vector along the beam, pointing into the body."""
        return -quat_to_matrix(np.asarray(self.orientation))[:, 2]

    @property
    def lateral(self) -> np.ndarray:
        return quat_to_matrix(np.asarray(self.orientation))[:, 0]


@dataclass(frozen=True)
class USFrame:
    """8-bit grayscale slice, row-major, pixel (0, 0) = shallow-left."""

    width: int
    height: int
    pixel_spacing: float
    pixels: bytes
    acquisition_time_us: int = 0
    contact: bool = True

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("frame dimensions must be at least 8x8")
        if len(self.pixels) != self.width * self.height:
            raise ValueError("pixel count must equal width*height")

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)


CONTACT_TOLERANCE_MM = 5.0


def extract_slice(
    body: BodySurface,
    phantom: VascularPhantom,
    pose: ProbePose,
    width: int,
    height: int,
    spacing: float,
    t: float,
    acquisition_time_us: int = 0,
    noise_amplitude: int = 0,
    noise_seed: int = 0,
) -> USFrame:
    """Sample a w x h slice behind the probe tip.

    Rows advance along the probe axis (depth), columns along the lateral
    axis centered on the tip.  A tip further than CONTACT_TOLERANCE_MM from
    the surface yields an all-zero frame flagged contact=False.
    """
    tip = np.asarray(pose.tip_position, dtype=float)
    _, dist = body.nearest_surface_point(tip, t)
    if abs(dist) > CONTACT_TOLERANCE_MM:
        return USFrame(width, height, spacing, bytes(width * height), acquisition_time_us, False)

    axis = pose.axis
    lateral = pose.lateral
    rows = (np.arange(height) + 0.5) * spacing
    cols = (np.arange(width) - (width - 1) / 2.0) * spacing
    pts = (
        tip[None, None, :]
        + rows[:, None, None] * axis[None, None, :]
        + cols[None, :, None] * lateral[None, None, :]
    )
    img = sample_volume(body, phantom, pts, t)
    if noise_amplitude > 0:
        rng = np.random.default_rng((noise_seed, acquisition_time_us))
        noise = rng.integers(-noise_amplitude, noise_amplitude + 1, size=img.shape)
        img = np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8)
    return USFrame(width, height, spacing, img.tobytes(), acquisition_time_us, True)


def write_pgm(frame: USFrame, path) -> None:
    """Binary 8-bit PGM (P5)."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii"))
        fh.write(frame.pixels)


def read_pgm(path) -> tuple[int, int, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
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
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM file")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    pixels = data[pos : pos + width * height]
    if len(pixels) != width * height:
        raise ValueError("truncated PGM payload")
    return width, height, pixels
