"""Camera path control and training-pose sampling.

The cruise controller keeps target fractions of sky and nearby content in
view by pitching the camera, then advances it along its (new) optical axis.
Training poses are random forward/backward offsets with small orientation
jitter, covering both flying into and out of the frame.
"""

import json
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import CameraPose, RgbdImage, region_fractions

# Proportional gain: degrees of pitch correction per unit fraction error.
PITCH_GAIN_DEG = 30.0
# Camera pitch is clamped to this many degrees from horizontal.
PITCH_LIMIT_DEG = 45.0
# Orientation-lerp fraction when constructing a far future pose.
LOOKAHEAD_TAU_LERP = 0.3
# Training draws the orientation-lerp fraction from [0, this].
TRAIN_TAU_LERP_MAX = 0.3
# Orientation jitter target magnitude (pitch and yaw) at the default range.
TRAIN_TARGET_ANGLE_DEG = 30.0
DEFAULT_S_RANGE = 20.0
# Training samples the field of view uniformly from this range (degrees);
# inference fixes it to AutocruiseParams.fov_deg.
TRAIN_FOV_RANGE = (45.0, 70.0)


@dataclass
class AutocruiseParams:
    """Flight controller targets and step size."""

    tau_sky: float = 0.25
    tau_near: float = 0.1
    tau_lerp: float = 0.05
    speed: float = 0.1875
    fov_deg: float = 55.0

    def __post_init__(self):
        if not 0.0 <= self.tau_lerp <= 1.0:
            raise ValueError(f"tau_lerp must be in [0, 1], got {self.tau_lerp}")
        if not (0.0 <= self.tau_sky <= 1.0 and 0.0 <= self.tau_near <= 1.0):
            raise ValueError("target fractions must be in [0, 1]")
        if self.speed == 0.0:
            raise ValueError("speed must be nonzero")


@dataclass
class TrainingPoseRange:
    """Maximum training step magnitude, in multiples of the base speed."""

    s: float = DEFAULT_S_RANGE

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")


def _pitch_down(rotation: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the camera x-axis so positive angles tilt toward +y (down)."""
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    rot_x = np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    return rotation @ rot_x


def _pitch_of(rotation: np.ndarray) -> float:
    """Downward pitch of the optical axis in degrees (world +y is down)."""
    fwd = rotation[:, 2]
    return float(np.degrees(np.arcsin(np.clip(fwd[1], -1.0, 1.0))))


def slerp_rotation(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Geodesic interpolation from rotation a to b by fraction t."""
    if t == 0.0:
        return a.copy()
    rel = Rotation.from_matrix(a.T @ b).as_rotvec()
    if not rel.any():
        return a.copy()
    return a @ Rotation.from_rotvec(t * rel).as_matrix()


def next_pose_autocruise(current: CameraPose, view: RgbdImage,
                         params: AutocruiseParams) -> CameraPose:
    """One controller step: re-aim toward target view fractions, then advance.

    Too much sky pitches the camera down, too much nearby content pitches it
    up; the target pitch saturates at +-PITCH_LIMIT_DEG and the orientation
    moves only a tau_lerp fraction of the way per step.
    """
    sky_f, near_f = region_fractions(view.disparity)
    correction = (PITCH_GAIN_DEG * (sky_f - params.tau_sky)
                  - PITCH_GAIN_DEG * (near_f - params.tau_near))
    if correction == 0.0 or params.tau_lerp == 0.0:
        new_rot = current.rotation.copy()
    else:
        pitch = _pitch_of(current.rotation)
        target_pitch = float(np.clip(pitch + correction, -PITCH_LIMIT_DEG,
                                     PITCH_LIMIT_DEG))
        target = _pitch_down(current.rotation, target_pitch - pitch)
        new_rot = slerp_rotation(current.rotation, target, params.tau_lerp)
    new_pos = current.translation + params.speed * new_rot[:, 2]
    return CameraPose(new_rot, new_pos)


def generate_path(start: CameraPose, n: int,
                  views: Callable[[CameraPose], RgbdImage],
                  params: AutocruiseParams) -> List[CameraPose]:
    """n poses starting at start; views supplies the frame seen at each pose."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    poses = [start]
    for _ in range(n - 1):
        poses.append(next_pose_autocruise(poses[-1], views(poses[-1]), params))
    return poses


def sample_training_pose(base: CameraPose, pose_range: TrainingPoseRange,
                         params: AutocruiseParams,
                         rng: np.random.Generator) -> CameraPose:
    """Random pseudo pose around base for training-pair construction.

    Translation is u * speed along base's forward axis with u ~ U(-s, s);
    orientation lerps by U[0, TRAIN_TAU_LERP_MAX] toward a random pitch/yaw
    target whose magnitude scales with s so that s -> 0 recovers base.
    """
    s = pose_range.s
    u = rng.uniform(-s, s)
    tau = rng.uniform(0.0, TRAIN_TAU_LERP_MAX)
    angle = TRAIN_TARGET_ANGLE_DEG * min(s / DEFAULT_S_RANGE, 1.0)
    d_pitch = rng.uniform(-angle, angle)
    d_yaw = rng.uniform(-angle, angle)
    translation = base.translation + u * params.speed * base.forward()
    if angle == 0.0 or tau == 0.0:
        return CameraPose(base.rotation.copy(), translation)
    target = base.rotation @ Rotation.from_euler("yx", [d_yaw, d_pitch],
                                                 degrees=True).as_matrix()
    return CameraPose(slerp_rotation(base.rotation, target, tau), translation)


def poses_to_json(poses: Sequence[CameraPose], fov_deg: float) -> str:
    """Serialize a pose list: [{R: 9 floats row-major, t: 3 floats, fov_deg}]."""
    records = [
        {
            "R": [float(x) for x in pose.rotation.ravel()],
            "t": [float(x) for x in pose.translation],
            "fov_deg": float(fov_deg),
        }
        for pose in poses
    ]
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def poses_from_json(text: str) -> tuple:
    """Inverse of poses_to_json; returns (poses, fov_deg)."""
    records = json.loads(text)
    if not isinstance(records, list) or not records:
        raise ValueError("pose file must be a non-empty JSON array")
    poses = [
        CameraPose(np.array(r["R"], dtype=np.float64).reshape(3, 3),
                   np.array(r["t"], dtype=np.float64))
        for r in records
    ]
    return poses, float(records[0]["fov_deg"])
