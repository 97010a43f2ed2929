"""Dataset ingestion, map serialization, and image IO.

Dataset layout (one directory):

    intrinsics.txt     "fx fy cx cy width height"
    trajectory.txt     one frame per line: "timestamp tx ty tz qx qy qz qw"
                       (camera-to-world; inverted to world-to-camera on load)
    images/<ts>.ppm    8- or 16-bit binary PPM, or .png
    points/<ts>.txt    optional sparse seed points, "x y z r g b" rows
    gt_map.ply         synthetic datasets only
    meta.json          synthetic datasets only

Poses match images (and point files) by nearest timestamp within a soft
synchronization window of 0.08 s; frames without a match are skipped and
counted. Images always load as float arrays in [0, 1] (8-bit value v maps
to exactly v / 255).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splatstream.core import Camera, GaussianMap
from splatstream.sh import SH_C0

SOFT_SYNC_DT = 0.08

PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def save_ppm(path, image: np.ndarray, bits: int = 16) -> None:
    """Write a [0, 1] float image as binary PPM (P6), 8- or 16-bit."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w, _ = image.shape
    maxval = 255 if bits == 8 else 65535
    data = np.round(image * maxval).astype(">u2" if bits == 16 else "u1")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n{maxval}\n".encode())
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(raw):
            raise ValueError(f"truncated PPM header in {path}")
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        if raw[pos:pos + 1].isspace():
            pos += 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P6":
        raise ValueError(f"unsupported PPM magic {magic!r} in {path}")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h * 3, offset=pos)
    return (data.reshape(h, w, 3).astype(np.float64) / maxval).clip(0.0, 1.0)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        save_ppm(path, image)
    elif path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
        PILImage.fromarray(arr).save(path)
    else:
        raise ValueError(f"unsupported image format: {path.suffix}")


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return load_ppm(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        arr = np.asarray(PILImage.open(path).convert("RGB"))
        return arr.astype(np.float64) / 255.0
    raise ValueError(f"unsupported image format: {path.suffix}")


# ---------------------------------------------------------------------------
# quaternion <-> rotation helpers for trajectory files
# ---------------------------------------------------------------------------

def _quat_xyzw_to_rotation(qx, qy, qz, qw):
    q = np.array([qw, qx, qy, qz], dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero-norm quaternion in trajectory")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _rotation_to_quat_xyzw(R):
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return x, y, z, w


# ---------------------------------------------------------------------------
# posed dataset
# ---------------------------------------------------------------------------

@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    camera: Camera
    image: np.ndarray
    points: np.ndarray | None = None  # (K, 6) x y z r g b


def parse_intrinsics(path):
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(
                f"intrinsics line must be 'fx fy cx cy width height', got {line!r}")
        fx, fy, cx, cy = map(float, parts[:4])
        w, h = int(parts[4]), int(parts[5])
        return fx, fy, cx, cy, w, h
    raise ValueError(f"no intrinsics found in {path}")


def parse_trajectory(path):
    """Yield (timestamp, c2w rotation, c2w translation) per trajectory line."""
    entries = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 8:
            raise ValueError(
                f"{path}:{ln}: expected 8 fields "
                f"'timestamp tx ty tz qx qy qz qw', got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"{path}:{ln}: {exc}") from None
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        entries.append((ts, _quat_xyzw_to_rotation(qx, qy, qz, qw),
                        np.array([tx, ty, tz])))
    return entries


class PosedDataset:
    """Reader yielding keyframes in strictly increasing timestamp order."""

    def __init__(self, root, dt_max: float = SOFT_SYNC_DT):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {self.root}")
        self.fx, self.fy, self.cx, self.cy, self.width, self.height = \
            parse_intrinsics(self.root / "intrinsics.txt")
        self.entries = parse_trajectory(self.root / "trajectory.txt")
        ts = [e[0] for e in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory timestamps must strictly increase")
        self._images = self._scan(self.root / "images")
        self._points = self._scan(self.root / "points")
        self.n_skipped = 0
        self._matched = []
        for i, (t, R, tvec) in enumerate(self.entries):
            img = self._nearest(self._images, t, dt_max)
            if img is None:
                self.n_skipped += 1
                continue
            pts = self._nearest(self._points, t, dt_max)
            self._matched.append((i, t, R, tvec, img, pts))

    @staticmethod
    def _scan(directory):
        out = []
        if directory.is_dir():
            for p in sorted(directory.iterdir()):
                try:
                    out.append((float(p.stem), p))
                except ValueError:
                    continue
        out.sort(key=lambda e: e[0])
        return out

    @staticmethod
    def _nearest(entries, t, dt_max):
        best, best_dt = None, dt_max
        for ts, p in entries:
            dt = abs(ts - t)
            if dt <= best_dt:
                best, best_dt = p, dt
        return best

    def __len__(self):
        return len(self._matched)

    def __iter__(self):
        for frame_id, (_, t, R, tvec, img_path, pts_path) in enumerate(self._matched):
            camera = Camera.from_c2w(self.fx, self.fy, self.cx, self.cy,
                                     self.width, self.height, R, tvec)
            points = None
            if pts_path is not None:
                data = np.loadtxt(pts_path, dtype=np.float64, ndmin=2)
                if data.size:
                    if data.shape[1] != 6:
                        raise ValueError(
                            f"{pts_path}: point rows must be 'x y z r g b'")
                    points = data
            yield Keyframe(frame_id=frame_id, timestamp=t, camera=camera,
                           image=load_image(img_path), points=points)


def load_posed_dataset(root, dt_max: float = SOFT_SYNC_DT) -> PosedDataset:
    return PosedDataset(root, dt_max=dt_max)


# ---------------------------------------------------------------------------
# map serialization (PLY)
# ---------------------------------------------------------------------------

def save_map(gmap: GaussianMap, path, float32: bool = False) -> None:
    """Write the map as a binary PLY in the common splat property layout.

    Doubles by default so that load(save(m)) round-trips field-exact;
    ``float32=True`` writes the narrower layout external viewers expect.
    """
    n = len(gmap)
    dtype = "<f4" if float32 else "<f8"
    typename = "float" if float32 else "double"
    rec = np.zeros(n, dtype=[(name, dtype) for name in PLY_PROPERTIES])
    rec["x"], rec["y"], rec["z"] = gmap.positions.T
    for c in range(3):
        rec[f"f_dc_{c}"] = gmap.sh[:, 0, c]
    rest = np.transpose(gmap.sh[:, 1:, :], (0, 2, 1)).reshape(n, 45)
    for i in range(45):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = gmap.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = gmap.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = gmap.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {typename} {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        f.write(rec.tobytes())


def load_map(path) -> GaussianMap:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode().splitlines()
    if lines[0] != "ply" or "format binary_little_endian 1.0" not in lines[1]:
        raise ValueError(f"{path}: expected binary little-endian PLY")
    n = None
    names, types = [], []
    for line in lines[2:]:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("element"):
            raise ValueError(f"{path}: unexpected element {line!r}")
        elif line.startswith("property"):
            _, t, name = line.split()
            names.append(name)
            types.append(t)
    if n is None or names != PLY_PROPERTIES:
        raise ValueError(
            f"{path}: unknown property layout; expected exactly "
            f"{' '.join(PLY_PROPERTIES)}")
    np_types = {"float": "<f4", "double": "<f8"}
    rec = np.frombuffer(raw, offset=end,
                        dtype=[(nm, np_types[t]) for nm, t in zip(names, types)],
                        count=n)
    gmap = GaussianMap()
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    sh = np.zeros((n, 16, 3))
    for c in range(3):
        sh[:, 0, c] = rec[f"f_dc_{c}"]
    rest = np.stack([rec[f"f_rest_{i}"] for i in range(45)], axis=1)
    sh[:, 1:, :] = np.transpose(rest.reshape(n, 3, 15), (0, 2, 1))
    log_scales = np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1)
    rotations = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1)
    gmap.insert_arrays(positions, rotations, log_scales,
                       rec["opacity"].astype(np.float64), sh)
    return gmap


# ---------------------------------------------------------------------------
# synthetic scene generator
# ---------------------------------------------------------------------------

def gen_synthetic(n_gaussians: int, n_frames: int, image_size: int, seed: int,
                  out_dir, n_points_per_frame: int = 250) -> Path:
    """Generate a reproducible orbiting-camera dataset on disk.

    Primitives are sampled in the unit box, cameras orbit the centroid,
    and targets are rendered with this package's own forward rasterizer
    (16-bit PPM, so re-rendering the stored ground-truth map reproduces
    the targets to quantization noise). Returns the dataset path.
    """
    from splatstream.rasterizer import RasterOpts, rasterize_forward

    if n_gaussians < 1 or n_frames < 1:
        raise ValueError("n_gaussians and n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "points").mkdir(parents=True, exist_ok=True)

    n = n_gaussians
    positions = rng.uniform(-0.4, 0.4, (n, 3))
    rotations = rng.standard_normal((n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.02, 0.07, (n, 1))).repeat(3, axis=1)
    log_scales += np.log(rng.uniform(0.6, 1.6, (n, 3)))
    # mostly opaque primitives give the scene occlusion structure, like the
    # indoor scans this stands in for
    opacity = rng.uniform(0.55, 0.97, n)
    opacity_logits = np.log(opacity) - np.log1p(-opacity)
    sh = rng.standard_normal((n, 16, 3)) * 0.015
    base = rng.uniform(0.1, 0.9, (n, 3))
    sh[:, 0, :] = (base - 0.5) / SH_C0
    gmap = GaussianMap.from_arrays(positions, rotations, log_scales,
                                   opacity_logits, sh)
    save_map(gmap, out / "gt_map.ply")

    size = int(image_size)
    fov = np.deg2rad(60.0)
    fx = fy = size / (2.0 * np.tan(fov / 2))
    cx = cy = size / 2.0
    (out / "intrinsics.txt").write_text(f"{fx:.17g} {fy:.17g} {cx} {cy} {size} {size}\n")

    opts = RasterOpts(with_checkpoints=False)
    colors = np.clip(SH_C0 * sh[:, 0, :] + 0.5, 0.0, 1.0)
    traj_lines = []
    for i in range(n_frames):
        theta = 2 * np.pi * i / n_frames
        eye = np.array([1.9 * np.sin(theta), 0.55, 1.9 * np.cos(theta)])
        cam = Camera.looking_at(fx, fy, cx, cy, size, size, eye, (0.0, 0.0, 0.0))
        ts = 0.1 * i
        image = rasterize_forward(gmap, cam, opts).image
        save_ppm(out / "images" / f"{ts:.6f}.ppm", image, bits=16)

        n_pts = min(n, n_points_per_frame)
        pick = rng.choice(n, size=n_pts, replace=False)
        pts = np.concatenate([positions[pick], colors[pick]], axis=1)
        np.savetxt(out / "points" / f"{ts:.6f}.txt", pts, fmt="%.17g")

        R_c2w = cam.R.T
        t_c2w = cam.center
        qx, qy, qz, qw = _rotation_to_quat_xyzw(R_c2w)
        traj_lines.append(
            f"{ts:.6f} " + " ".join(f"{v:.17g}" for v in (*t_c2w, qx, qy, qz, qw)))
    (out / "trajectory.txt").write_text("\n".join(traj_lines) + "\n")
    meta = {"image_size": size, "n_frames": n_frames,
            "n_gaussians": n_gaussians, "seed": seed}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return out
