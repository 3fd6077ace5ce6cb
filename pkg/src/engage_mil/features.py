"""Per-segment features from face-crop videos and pose/gaze tracks.

Two descriptor families are produced for sliding windows of a subsampled
video: a 177-dim spatio-temporal texture histogram (local binary patterns
accumulated over the XY, XT and YT slices of the window volume, 59
uniform-pattern bins per plane) and a 9-dim motion vector (per-window
standard deviations of head position, head rotation and mean eye gaze).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audit import note_read
from .errors import (
    DegenerateWindowError,
    ParseError,
    TooShortVideoError,
)

# Circular neighborhood: radius 1, 8 samples, ordered counter-clockwise
# starting from the positive horizontal axis.  Axis -2 of a plane array is
# the circle's vertical axis, axis -1 the horizontal one.
_DIAG = math.sqrt(0.5)
NEIGHBOR_OFFSETS = (
    (1.0, 0.0),
    (_DIAG, _DIAG),
    (0.0, 1.0),
    (-_DIAG, _DIAG),
    (-1.0, 0.0),
    (-_DIAG, -_DIAG),
    (0.0, -1.0),
    (_DIAG, -_DIAG),
)  # (dx, dy) pairs

PLANE_BINS = 59
N_PLANES = 3
LBP_TOP_DIM = PLANE_BINS * N_PLANES
POSE_GAZE_DIM = 9

POSE_GAZE_COLUMNS = (
    "frame",
    "pose_Tx",
    "pose_Ty",
    "pose_Tz",
    "pose_Rx",
    "pose_Ry",
    "pose_Rz",
    "gaze_0_x",
    "gaze_0_y",
    "gaze_0_z",
    "gaze_1_x",
    "gaze_1_y",
    "gaze_1_z",
)


# ---------------------------------------------------------------------------
# domain records


@dataclass
class FrameSequence:
    """Ordered grayscale face crops of one video."""

    frames: np.ndarray  # (n, height, width) uint8
    fps: float
    subject_id: str
    video_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a nonempty (n, h, w) array")
        if self.frames.dtype != np.uint8:
            raise ValueError("frames must be 8-bit grayscale (uint8)")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


@dataclass(frozen=True)
class SegmentWindow:
    """Half-open frame range [start, start + length) with its stride."""

    start: int
    length: int
    stride: int = 1

    def __post_init__(self):
        if self.start < 0 or self.length < 1 or self.stride < 1:
            raise ValueError(f"bad window: {self}")

    @property
    def stop(self):
        return self.start + self.length


@dataclass
class PoseGazeTrack:
    """Per-frame head pose and eye gaze, aligned with a frame sequence.

    Rotation components are kept in source column order (Rx, Ry, Rz).
    Gaze vectors are one 3-vector per eye per frame.
    """

    head_position: np.ndarray  # (n, 3) mm
    head_rotation: np.ndarray  # (n, 3) rad
    gaze_left: np.ndarray  # (n, 3) unit vectors
    gaze_right: np.ndarray  # (n, 3)

    def __post_init__(self):
        arrs = [self.head_position, self.head_rotation, self.gaze_left, self.gaze_right]
        n = arrs[0].shape[0]
        for a in arrs:
            if a.shape != (n, 3):
                raise ValueError("all track blocks must be (n, 3)")
            if not np.isfinite(a).all():
                raise ValueError("track values must be finite")

    def __len__(self):
        return self.head_position.shape[0]

    def every(self, step: int) -> "PoseGazeTrack":
        return PoseGazeTrack(
            self.head_position[::step],
            self.head_rotation[::step],
            self.gaze_left[::step],
            self.gaze_right[::step],
        )


@dataclass
class LbpTopHistogram:
    """Concatenated per-plane histograms: [XY | XT | YT] per spatial block."""

    bins: np.ndarray  # (177 * n_blocks,)

    def blocks(self) -> np.ndarray:
        return self.bins.reshape(-1, N_PLANES, PLANE_BINS)


@dataclass
class SegmentFeature:
    vector: np.ndarray
    kind: str  # "lbptop" | "posegaze"
    window: SegmentWindow


# ---------------------------------------------------------------------------
# temporal subsampling and windowing


def sample_step(src_fps: float, target_fps: float) -> int:
    """Frame-keeping step for dropping a source rate to a target rate.

    Rounded to the nearest integer, halves away from zero, so a 30 fps
    source at a 6 fps target keeps every 5th frame.
    """
    if src_fps <= 0 or target_fps <= 0:
        raise ValueError("frame rates must be positive")
    if target_fps > src_fps:
        raise ValueError(
            f"target rate {target_fps} exceeds source rate {src_fps}"
        )
    return int(math.floor(src_fps / target_fps + 0.5))


def subsample(seq: FrameSequence, target_fps: float) -> FrameSequence:
    """Keep every step-th frame starting at the first."""
    step = sample_step(seq.fps, target_fps)
    return FrameSequence(seq.frames[::step], seq.fps / step, seq.subject_id, seq.video_id)


def segment(source, length: int, stride: int) -> list[SegmentWindow]:
    """Sliding windows over a frame sequence or track.

    Starts at 0 and advances by `stride` while a full window still fits,
    giving floor((n - length) / stride) + 1 windows.
    """
    if length < 2:
        raise ValueError("window length must be at least 2")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    n = source if isinstance(source, int) else len(source)
    if n < length:
        raise TooShortVideoError(
            f"{n} frames cannot fit one window of length {length}"
        )
    return [
        SegmentWindow(start, length, stride)
        for start in range(0, n - length + 1, stride)
    ]


# ---------------------------------------------------------------------------
# local binary patterns


def lbp_code(center: float, neighbors) -> int:
    """8-bit pattern code: bit b is set iff neighbors[b] >= center."""
    if len(neighbors) != 8:
        raise ValueError("exactly 8 neighbor samples required")
    code = 0
    for bit, value in enumerate(neighbors):
        if value >= center:
            code |= 1 << bit
    return code


def _circular_transitions(code: int) -> int:
    return sum(
        ((code >> i) & 1) != ((code >> ((i + 1) % 8)) & 1) for i in range(8)
    )


def _build_uniform_lut() -> np.ndarray:
    # Uniform codes (<= 2 circular transitions) get bins 0..57 in ascending
    # code order; everything else shares the final catch-all bin.
    lut = np.full(256, PLANE_BINS - 1, dtype=np.int64)
    nxt = 0
    for code in range(256):
        if _circular_transitions(code) <= 2:
            lut[code] = nxt
            nxt += 1
    assert nxt == PLANE_BINS - 1
    return lut


UNIFORM_LUT = _build_uniform_lut()


def _bilinear_taps(dx: float, dy: float):
    x0, y0 = math.floor(dx), math.floor(dy)
    fx, fy = dx - x0, dy - y0
    raw = (
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    )
    return tuple((ro, co, w) for ro, co, w in raw if w != 0.0)


_NEIGHBOR_TAPS = tuple(_bilinear_taps(dx, dy) for dx, dy in NEIGHBOR_OFFSETS)


def _codes(planes: np.ndarray) -> np.ndarray:
    """Pattern codes for all interior positions of stacked 2-D planes.

    `planes` has shape (..., a, b); off-grid neighbor samples are
    bilinearly interpolated.  Returns int64 codes of shape (..., a-2, b-2).
    """
    a, b = planes.shape[-2], planes.shape[-1]
    if a < 3 or b < 3:
        raise DegenerateWindowError(
            f"plane of {a}x{b} has no interior pixels"
        )
    center = planes[..., 1 : a - 1, 1 : b - 1]
    codes = np.zeros(center.shape, dtype=np.int64)
    for bit, taps in enumerate(_NEIGHBOR_TAPS):
        value = None
        for ro, co, w in taps:
            r0, c0 = 1 + ro, 1 + co
            term = w * planes[..., r0 : r0 + a - 2, c0 : c0 + b - 2]
            value = term if value is None else value + term
        codes += (value >= center).astype(np.int64) << bit
    return codes


class _PlaneCodeMaps:
    """Per-voxel pattern codes of one video volume, all three slice sets.

    Sliding windows only re-histogram slices of these maps: a window's
    interior voxels sample temporal neighbors that stay inside the window,
    so per-window recomputation would produce the very same codes.
    """

    def __init__(self, vol: np.ndarray):
        t, h, w = vol.shape
        if t < 3:
            raise DegenerateWindowError(
                f"{t} frames cannot support temporal planes"
            )
        self.shape = (t, h, w)
        self.xy = _codes(vol)  # (t, h-2, w-2)
        self.xt = _codes(vol.transpose(1, 0, 2))  # (h, t-2, w-2)
        self.yt = _codes(vol.transpose(2, 0, 1))  # (w, t-2, h-2)


def _block_ids(coords: np.ndarray, extent: int, blocks: int) -> np.ndarray:
    return (coords * blocks) // extent


def _window_counts(maps: _PlaneCodeMaps, window: SegmentWindow, xy_frames: str, grid) -> np.ndarray:
    """Raw per-(block, plane) bin counts for one window."""
    t_total, h, w = maps.shape
    gy, gx = grid
    n_blocks = gy * gx
    s, k = window.start, window.length
    if k < 3:
        raise DegenerateWindowError("window shorter than 3 frames")
    if s < 0 or s + k > t_total:
        raise ValueError(f"window {window} outside {t_total} frames")

    counts = np.zeros(n_blocks * N_PLANES * PLANE_BINS, dtype=np.int64)
    y_block = _block_ids(np.arange(1, h - 1), h, gy)
    x_block = _block_ids(np.arange(1, w - 1), w, gx)
    y_block_full = _block_ids(np.arange(h), h, gy)
    x_block_full = _block_ids(np.arange(w), w, gx)

    def accumulate(codes, block, plane):
        idx = (block * N_PLANES + plane) * PLANE_BINS + UNIFORM_LUT[codes]
        counts[:] += np.bincount(idx.ravel(), minlength=counts.size)

    if xy_frames == "center":
        xy = maps.xy[s + k // 2][None]
    else:
        xy = maps.xy[s : s + k]
    accumulate(xy, (y_block[:, None] * gx + x_block[None, :])[None], 0)

    # the window's interior voxels occupy rows [s, s+k-2) of the temporal
    # code volumes
    xt = maps.xt[:, s : s + k - 2, :]  # (h, k-2, w-2)
    accumulate(xt, y_block_full[:, None, None] * gx + x_block[None, None, :], 1)

    yt = maps.yt[:, s : s + k - 2, :]  # (w, k-2, h-2)
    accumulate(yt, y_block[None, None, :] * gx + x_block_full[:, None, None], 2)

    return counts.reshape(n_blocks, N_PLANES, PLANE_BINS)


def _normalize_counts(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=2, dtype=np.float64)
    if (totals == 0).any():
        raise DegenerateWindowError("a plane block collected no pixels")
    return (counts / totals[:, :, None]).reshape(-1)


def lbp_top(
    seq: FrameSequence,
    window: SegmentWindow,
    *,
    xy_frames: str = "all",
    grid=(1, 1),
) -> LbpTopHistogram:
    """Texture histogram of one window volume.

    Codes are computed on every voxel whose circular neighborhood fits the
    volume; spatial XY codes come from every frame of the window by default
    (`xy_frames="center"` restricts them to the middle frame).  Each plane
    histogram is normalized to sum 1 per spatial block, then blocks are
    concatenated row-major as [XY | XT | YT] chunks of 59 bins.
    """
    if xy_frames not in ("all", "center"):
        raise ValueError("xy_frames must be 'all' or 'center'")
    if window.stop > len(seq):
        raise ValueError(f"window {window} outside sequence of {len(seq)} frames")
    vol = seq.frames[window.start : window.stop].astype(np.float64)
    maps = _PlaneCodeMaps(vol)
    local = SegmentWindow(0, window.length, window.stride)
    counts = _window_counts(maps, local, xy_frames, grid)
    return LbpTopHistogram(_normalize_counts(counts))


def lbp_top_many(
    seq: FrameSequence,
    windows,
    *,
    xy_frames: str = "all",
    grid=(1, 1),
) -> list[LbpTopHistogram]:
    """Histograms for many windows of one video, sharing one code pass."""
    if xy_frames not in ("all", "center"):
        raise ValueError("xy_frames must be 'all' or 'center'")
    maps = _PlaneCodeMaps(seq.frames.astype(np.float64))
    out = []
    for window in windows:
        counts = _window_counts(maps, window, xy_frames, grid)
        out.append(LbpTopHistogram(_normalize_counts(counts)))
    return out


# ---------------------------------------------------------------------------
# pose / gaze features


def pose_gaze_feature(track: PoseGazeTrack, window: SegmentWindow) -> SegmentFeature:
    """9-dim motion descriptor of one window.

    Population standard deviations over the window's frames of: head x, y,
    z position, the three head rotation channels, and the per-frame mean of
    the two eyes' gaze vector.  Length-1 windows yield all zeros.
    """
    if window.stop > len(track):
        raise ValueError(f"window {window} outside track of {len(track)} frames")
    rows = slice(window.start, window.stop)
    gaze = (track.gaze_left[rows] + track.gaze_right[rows]) / 2.0
    vector = np.concatenate(
        [
            track.head_position[rows].std(axis=0),
            track.head_rotation[rows].std(axis=0),
            gaze.std(axis=0),
        ]
    )
    return SegmentFeature(vector=vector, kind="posegaze", window=window)


# ---------------------------------------------------------------------------
# on-disk inputs: PGM frame archives, manifests, pose/gaze CSV


def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM reader for 8-bit grayscale frames."""
    note_read(path)
    data = Path(path).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ParseError(path, 1, "truncated PGM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ParseError(path, 1, f"not a binary PGM: magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ParseError(path, 1, "non-integer PGM header fields") from None
    if maxval > 255 or maxval < 1:
        raise ParseError(path, 1, f"unsupported maxval {maxval}")
    i += 1  # single whitespace byte after maxval
    raster = data[i : i + width * height]
    if len(raster) != width * height:
        raise ParseError(path, 1, "truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def load_frame_archive(directory) -> FrameSequence:
    """Read one video's manifest + numbered PGM frames."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    note_read(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ParseError(manifest_path, 1, "missing manifest") from None
    except json.JSONDecodeError as exc:
        raise ParseError(manifest_path, exc.lineno, exc.msg) from None
    for key in ("video_id", "subject_id", "fps", "width", "height", "frame_count"):
        if key not in manifest:
            raise ParseError(manifest_path, 1, f"manifest missing {key!r}")
    paths = sorted((directory / "frames").glob("*.pgm"))
    if len(paths) != manifest["frame_count"]:
        raise ParseError(
            manifest_path,
            1,
            f"manifest says {manifest['frame_count']} frames, found {len(paths)}",
        )
    frames = np.stack([read_pgm(p) for p in paths])
    if frames.shape[1:] != (manifest["height"], manifest["width"]):
        raise ParseError(manifest_path, 1, "frame size disagrees with manifest")
    return FrameSequence(
        frames=frames,
        fps=float(manifest["fps"]),
        subject_id=str(manifest["subject_id"]),
        video_id=str(manifest["video_id"]),
    )


def save_frame_archive(seq: FrameSequence, directory) -> None:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    manifest = {
        "video_id": seq.video_id,
        "subject_id": seq.subject_id,
        "fps": seq.fps,
        "width": seq.width,
        "height": seq.height,
        "frame_count": len(seq),
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    digits = max(6, len(str(len(seq))))
    for i, frame in enumerate(seq.frames):
        write_pgm(directory / "frames" / f"{i:0{digits}d}.pgm", frame)


def load_pose_gaze_csv(path) -> PoseGazeTrack:
    """Parse a per-frame pose/gaze CSV (OpenFace column naming)."""
    note_read(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(path, 1, "empty pose/gaze file") from None
        missing = [c for c in POSE_GAZE_COLUMNS if c not in header]
        if missing:
            raise ParseError(path, 1, f"missing columns: {', '.join(missing)}")
        index = {c: header.index(c) for c in POSE_GAZE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([float(row[index[c]]) for c in POSE_GAZE_COLUMNS[1:]])
            except (ValueError, IndexError):
                raise ParseError(path, lineno, "malformed row") from None
    if not rows:
        raise ParseError(path, 2, "no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    return PoseGazeTrack(
        head_position=arr[:, 0:3],
        head_rotation=arr[:, 3:6],
        gaze_left=arr[:, 6:9],
        gaze_right=arr[:, 9:12],
    )


def save_pose_gaze_csv(track: PoseGazeTrack, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_GAZE_COLUMNS)
        for i in range(len(track)):
            writer.writerow(
                [i]
                + [repr(float(v)) for v in track.head_position[i]]
                + [repr(float(v)) for v in track.head_rotation[i]]
                + [repr(float(v)) for v in track.gaze_left[i]]
                + [repr(float(v)) for v in track.gaze_right[i]]
            )
