"""Dynamic Gaussian state, cameras and the synthetic orbit scene generator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields
from typing import Sequence

import numpy as np

from . import quat

SCENE_FORMAT_VERSION = 1
MOTION_PRESETS = ("rigid-rotation", "articulated", "static")


class ConfigError(ValueError):
    """Invalid configuration values."""


class ShapeError(ValueError):
    """Mismatched array / sequence shapes between inputs."""


@dataclass
class GaussianState:
    p: np.ndarray  # [3]
    q: np.ndarray  # [4] (w, x, y, z), unit
    s: np.ndarray  # [3] positive axis lengths
    alpha: float
    c: np.ndarray  # [3] RGB

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.q = quat.normalize(np.asarray(self.q, dtype=float).reshape(4))
        self.s = np.asarray(self.s, dtype=float).reshape(3)
        self.c = np.asarray(self.c, dtype=float).reshape(3)
        self.alpha = float(self.alpha)
        if np.any(self.s <= 0):
            raise ValueError(f"scale must be positive, got {self.s}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {self.alpha}")
        if np.any(self.c < 0) or np.any(self.c > 1):
            raise ValueError(f"color must lie in [0, 1], got {self.c}")


@dataclass
class GaussianTrajectory:
    states: list[GaussianState]
    canonical_frame: int = 0

    def __post_init__(self):
        first = self.states[0]
        for st in self.states[1:]:
            if (not np.array_equal(st.s, first.s) or st.alpha != first.alpha
                    or not np.array_equal(st.c, first.c)):
                raise ValueError("scale, opacity and color must be constant along a trajectory")
        if not 0 <= self.canonical_frame < len(self.states):
            raise ValueError("canonical frame out of range")

    def __len__(self):
        return len(self.states)


def covariance_of(state: GaussianState) -> np.ndarray:
    """World covariance R diag(s^2) R^T of a Gaussian."""
    R = quat.to_matrix(state.q)
    return (R * state.s ** 2) @ R.T


def covariances(rotations, scales):
    """Batched covariance: rotations [..., 4], scales [..., 3] -> [..., 3, 3]."""
    R = quat.to_matrix(rotations)
    return (R * (scales ** 2)[..., None, :]) @ np.swapaxes(R, -1, -2)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R_wc: np.ndarray  # [3, 3] camera-to-world rotation, OpenCV axes (x right, y down, z forward)
    t_wc: np.ndarray  # [3] camera center in world coordinates
    width: int
    height: int

    def __post_init__(self):
        self.R_wc = np.asarray(self.R_wc, dtype=float).reshape(3, 3)
        self.t_wc = np.asarray(self.t_wc, dtype=float).reshape(3)
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be at least 1x1")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if (np.abs(self.R_wc.T @ self.R_wc - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(self.R_wc) - 1.0) > 1e-9):
            raise ConfigError("R_wc must be a proper rotation")

    @classmethod
    def look_at(cls, eye, target, width, height, focal, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, R, eye, width, height)

    def to_camera(self, x):
        """World points [..., 3] to camera coordinates."""
        return (np.asarray(x) - self.t_wc) @ self.R_wc

    def project(self, x):
        xc = self.to_camera(x)
        z = xc[..., 2]
        return np.stack([self.fx * xc[..., 0] / z + self.cx, self.fy * xc[..., 1] / z + self.cy], -1), z

    @property
    def optical_axis(self):
        return self.R_wc[:, 2]

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R_wc": self.R_wc.tolist(), "t_wc": self.t_wc.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["R_wc"], d["t_wc"], d["width"], d["height"])


@dataclass
class FrameGaussians:
    """All Gaussians at one time instant, as flat arrays."""
    positions: np.ndarray  # [N, 3]
    rotations: np.ndarray  # [N, 4]
    scales: np.ndarray  # [N, 3]
    opacities: np.ndarray  # [N]
    colors: np.ndarray  # [N, 3]

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_states(cls, states: Sequence[GaussianState]):
        if len(states) == 0:
            z3 = np.zeros((0, 3))
            return cls(z3, np.zeros((0, 4)), z3.copy(), np.zeros(0), z3.copy())
        return cls(np.stack([s.p for s in states]), np.stack([s.q for s in states]),
                   np.stack([s.s for s in states]), np.array([s.alpha for s in states]),
                   np.stack([s.c for s in states]))


@dataclass
class DynamicGaussians:
    """Array-backed set of Gaussian trajectories.

    Only positions and rotations vary over time; scale, opacity and color are
    per-Gaussian constants.
    """
    positions: np.ndarray  # [N, T, 3]
    rotations: np.ndarray  # [N, T, 4]
    scales: np.ndarray  # [N, 3]
    opacities: np.ndarray  # [N]
    colors: np.ndarray  # [N, 3]
    canonical_frame: int = 0

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def T(self):
        return self.positions.shape[1]

    def frame(self, t) -> FrameGaussians:
        return FrameGaussians(self.positions[:, t], self.rotations[:, t], self.scales,
                              self.opacities, self.colors)

    def trajectory(self, i) -> GaussianTrajectory:
        return GaussianTrajectory(
            [GaussianState(self.positions[i, t], self.rotations[i, t], self.scales[i],
                           self.opacities[i], self.colors[i]) for t in range(self.T)],
            self.canonical_frame)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[GaussianTrajectory]):
        T = len(trajs[0])
        if any(len(tr) != T for tr in trajs):
            raise ShapeError("all trajectories must have the same frame count")
        return cls(np.array([[s.p for s in tr.states] for tr in trajs]),
                   np.array([[s.q for s in tr.states] for tr in trajs]),
                   np.array([tr.states[0].s for tr in trajs]),
                   np.array([tr.states[0].alpha for tr in trajs]),
                   np.array([tr.states[0].c for tr in trajs]),
                   trajs[0].canonical_frame)

    def copy(self):
        return DynamicGaussians(self.positions.copy(), self.rotations.copy(), self.scales.copy(),
                                self.opacities.copy(), self.colors.copy(), self.canonical_frame)

    def to_records(self, occlusion=None):
        out = []
        for i in range(self.n):
            rec = {"p": self.positions[i].tolist(), "q": self.rotations[i].tolist(),
                   "s": self.scales[i].tolist(), "alpha": float(self.opacities[i]),
                   "c": self.colors[i].tolist()}
            if occlusion is not None:
                rec["occlusion"] = [list(iv) for iv in occlusion[i]]
            out.append(rec)
        return out

    @classmethod
    def from_records(cls, recs, canonical_frame=0):
        return cls(np.array([r["p"] for r in recs], dtype=float).reshape(len(recs), -1, 3),
                   np.array([r["q"] for r in recs], dtype=float).reshape(len(recs), -1, 4),
                   np.array([r["s"] for r in recs], dtype=float).reshape(len(recs), 3),
                   np.array([r["alpha"] for r in recs], dtype=float),
                   np.array([r["c"] for r in recs], dtype=float).reshape(len(recs), 3),
                   canonical_frame)


@dataclass
class EvalView:
    camera: Camera
    frame: int
    offset_deg: float


@dataclass
class SceneConfig:
    n_gaussians: int = 500
    n_frames: int = 121
    width: int = 128
    height: int = 128
    focal_factor: float = 1.5  # focal length in units of image width
    orbit_radius: float = 3.0
    step_deg: float = 3.0
    input_elevation_deg: float = 15.0
    motion: str = "articulated"
    occlusion_fraction: float = 0.2
    occlusion_span: float = 0.2  # interval length as a fraction of T
    eval_offsets_deg: tuple = (30.0, 60.0, 90.0, 120.0, 150.0, 180.0)
    eval_elevation_deg: float = 35.0
    eval_frames: int = 8
    seed: int = 0

    def validate(self):
        if self.n_gaussians < 1:
            raise ConfigError("n_gaussians must be >= 1")
        if self.n_frames < 3:
            raise ConfigError("n_frames must be >= 3")
        if self.orbit_radius <= 0:
            raise ConfigError("orbit_radius must be positive")
        if self.width < 1 or self.height < 1 or self.focal_factor <= 0:
            raise ConfigError("image size and focal factor must be positive")
        if self.motion not in MOTION_PRESETS:
            raise ConfigError(f"unknown motion preset {self.motion!r}; choose from {MOTION_PRESETS}")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ConfigError("occlusion_fraction must lie in [0, 1)")
        if not 0.0 < self.occlusion_span < 1.0:
            raise ConfigError("occlusion_span must lie in (0, 1)")
        if self.eval_frames < 0:
            raise ConfigError("eval_frames must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        d = dict(d)
        if "eval_offsets_deg" in d:
            d["eval_offsets_deg"] = tuple(float(x) for x in d["eval_offsets_deg"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["eval_offsets_deg"] = list(d["eval_offsets_deg"])
        return d


@dataclass
class SyntheticScene:
    gaussians: DynamicGaussians  # ground truth
    input_cameras: list[Camera]
    eval_views: list[EvalView]
    occlusion: list[list[tuple[int, int]]]  # per Gaussian, half-open [start, end) frame intervals
    T: int
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if len(self.input_cameras) != self.T:
            raise ShapeError("exactly one input camera per frame is required")
        for ivs in self.occlusion:
            for a, b in ivs:
                if not 0 <= a < b <= self.T:
                    raise ValueError(f"occlusion interval {(a, b)} outside [0, {self.T})")

    @property
    def trajectories(self) -> list[GaussianTrajectory]:
        return [self.gaussians.trajectory(i) for i in range(self.gaussians.n)]

    def visibility(self) -> np.ndarray:
        """[N, T] bool, False while a Gaussian is hidden from the input view."""
        vis = np.ones((self.gaussians.n, self.T), dtype=bool)
        for i, ivs in enumerate(self.occlusion):
            for a, b in ivs:
                vis[i, a:b] = False
        return vis

    def occluded_mask(self):
        return ~self.visibility()

    def bbox_diagonal(self):
        p = self.gaussians.positions.reshape(-1, 3)
        return float(np.linalg.norm(p.max(0) - p.min(0)))

    def centroid(self):
        return self.gaussians.positions.reshape(-1, 3).mean(0)

    def to_dict(self):
        return {
            "version": SCENE_FORMAT_VERSION,
            "seed": int(self.seed),
            "T": int(self.T),
            "config": self.config.to_dict(),
            "gaussians": self.gaussians.to_records(self.occlusion),
            "input_cameras": [c.to_dict() for c in self.input_cameras],
            "eval_cameras": [dict(v.camera.to_dict(), frame=int(v.frame), offset_deg=float(v.offset_deg))
                             for v in self.eval_views],
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SCENE_FORMAT_VERSION:
            raise ValueError(f"unsupported scene format version {d.get('version')}")
        g = DynamicGaussians.from_records(d["gaussians"])
        occ = [[tuple(iv) for iv in r.get("occlusion", [])] for r in d["gaussians"]]
        evs = [EvalView(Camera.from_dict(c), c["frame"], c["offset_deg"]) for c in d["eval_cameras"]]
        return cls(g, [Camera.from_dict(c) for c in d["input_cameras"]], evs, occ, d["T"], d["seed"],
                   SceneConfig.from_dict(d["config"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# generator

def _ellipsoid_surface(rng, n, center, radii):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + d * radii


def _rest_shape(rng, n, motion):
    """Rest-pose points and part labels (0 = body, 1 = arm)."""
    body_c, body_r = np.array([-0.15, 0.0, -0.05]), np.array([0.27, 0.2, 0.22])
    arm_c, arm_r = np.array([0.3, 0.0, 0.05]), np.array([0.22, 0.075, 0.075])
    n_arm = max(1, int(round(0.35 * n))) if n > 1 else 0
    n_body = n - n_arm
    pts = np.concatenate([_ellipsoid_surface(rng, n_body, body_c, body_r),
                          _ellipsoid_surface(rng, n_arm, arm_c, arm_r)])
    part = np.concatenate([np.zeros(n_body, int), np.ones(n_arm, int)])
    lo, hi = pts.min(0), pts.max(0)
    scale = 1.0 / max((hi - lo).max(), 1e-9)
    pts = (pts - 0.5 * (lo + hi)) * scale
    hinge = (np.array([0.1, 0.0, 0.05]) - 0.5 * (lo + hi)) * scale
    return pts, part, hinge


def _part_motion(motion, T, hinge):
    """Per part, per frame rigid transforms (quaternion [2, T, 4], translation [2, T, 3]).

    A point x of part k at rest moves to rotate(q[k, t], x) + tr[k, t].
    """
    q = np.zeros((2, T, 4))
    q[..., 0] = 1.0
    tr = np.zeros((2, T, 3))
    if motion == "static":
        return q, tr
    ts = np.arange(T)
    phase = 2.0 * np.pi * ts / max(T - 1, 1)
    if motion == "rigid-rotation":
        ang = np.deg2rad(1.0) * ts
        qb = quat.from_axis_angle([0.0, 0.0, 1.0], ang)
        trb = np.stack([np.zeros(T), np.zeros(T), 0.05 * np.sin(phase)], -1)
        return np.stack([qb, qb]), np.stack([trb, trb])
    # articulated: body sways and bobs, arm swings about a hinge fixed to the body
    body_ang = np.deg2rad(20.0) * np.sin(phase)
    qb = quat.from_axis_angle([0.0, 0.0, 1.0], body_ang)
    trb = np.stack([0.05 * np.sin(phase), np.zeros(T), 0.04 * np.sin(2 * phase)], -1)
    arm_ang = np.deg2rad(50.0) * np.sin(phase)
    qh = quat.from_axis_angle([0.0, 1.0, 0.0], arm_ang)
    # arm: x -> B(H(x)), H rotation about the hinge point
    qa = quat.mul(qb, qh)
    tr_h = hinge - quat.rotate(qh, np.broadcast_to(hinge, (T, 3)))
    tra = quat.rotate(qb, tr_h) + trb
    return np.stack([qb, qa]), np.stack([trb, tra])


def make_orbit_scene(config: SceneConfig) -> SyntheticScene:
    """Deterministic synthetic dynamic scene observed by an orbiting camera."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    N, T = config.n_gaussians, config.n_frames

    rest, part, hinge = _rest_shape(rng, N, config.motion)
    rest_q = quat.random_unit(rng, (N,))
    rest_q = quat.positive_hemisphere(rest_q)
    s0 = 0.9 / np.sqrt(N) if N > 1 else 0.1
    scales = s0 * rng.uniform(0.6, 1.4, size=(N, 3))
    opac = rng.uniform(0.7, 0.95, size=N)
    base = np.where(part[:, None] == 0, [[0.85, 0.35, 0.25]], [[0.2, 0.45, 0.85]])
    tint = 0.2 * np.sin(7.0 * rest + rng.uniform(0, 2 * np.pi, size=3))
    colors = np.clip(base + tint, 0.05, 0.95)

    pq, ptr = _part_motion(config.motion, T, hinge)
    qs = pq[part]  # [N, T, 4]
    positions = quat.rotate(qs, np.broadcast_to(rest[:, None], (N, T, 3))) + ptr[part]
    rotations = quat.normalize(quat.mul(qs, rest_q[:, None]))
    gauss = DynamicGaussians(positions, rotations, scales, opac, colors)

    # occlusion schedule: exactly round(f * N) Gaussians get one interval; first and last frames stay visible
    n_occ = int(round(config.occlusion_fraction * N))
    occlusion = [[] for _ in range(N)]
    if n_occ > 0:
        L = int(min(max(round(config.occlusion_span * T), 1), T - 2))
        chosen = np.sort(rng.choice(N, size=n_occ, replace=False))
        starts = rng.integers(1, T - L, size=n_occ)  # in [1, T-L-1]
        for i, a in zip(chosen, starts):
            occlusion[i] = [(int(a), int(a + L))]

    centroid = positions.reshape(-1, 3).mean(0)
    focal = config.focal_factor * config.width

    def orbit_cam(az_deg, el_deg):
        az, el = np.deg2rad(az_deg), np.deg2rad(el_deg)
        eye = centroid + config.orbit_radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return Camera.look_at(eye, centroid, config.width, config.height, focal)

    azimuths = config.step_deg * np.arange(T)
    cams = [orbit_cam(a, config.input_elevation_deg) for a in azimuths]

    evs = []
    if config.eval_frames > 0:
        frames = np.unique(np.round(np.linspace(0, T - 1, min(config.eval_frames, T))).astype(int))
        for t in frames:
            for off in config.eval_offsets_deg:
                evs.append(EvalView(orbit_cam(azimuths[t] + off, config.eval_elevation_deg), int(t), float(off)))

    return SyntheticScene(gauss, cams, evs, occlusion, T, config.seed, config)
