"""Checkpoints, PPM images, camera CSVs and flat float maps."""

import csv
import struct
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import FormatError
from .field import GridField
from .scene import Camera, GroundTruthView

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"SURF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII6dI")
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}

CAMERA_HEADER = [
    "view_id",
    "pos_x", "pos_y", "pos_z",
    "look_x", "look_y", "look_z",
    "up_x", "up_y", "up_z",
    "fov_deg",
]


def save_checkpoint(field: GridField, path: PathLike):
    """Write the field as a self-describing little-endian parameter dump."""
    tensors = [p.detach().cpu() for p in field.parameters()]
    bbox = torch.cat([field.bbox_min, field.bbox_max]).double().tolist()
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        _DTYPE_CODES[field.dtype],
        field.grid_resolution,
        field.color_resolution,
        field.feature_dim,
        field.hidden_dim,
        *bbox,
        len(tensors),
    )
    counts = struct.pack(f"<{len(tensors)}Q", *(t.numel() for t in tensors))
    flat = np.concatenate([t.double().numpy().ravel() for t in tensors]).astype("<f8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(counts)
        f.write(flat.tobytes())


def load_checkpoint(path: PathLike) -> GridField:
    """Rebuild a GridField from ``save_checkpoint`` output."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < _HEADER.size:
        raise FormatError(f"{path} is too short to be a checkpoint")

    (magic, version, dtype_code, grid_res, color_res, feature_dim, hidden_dim, *rest) = _HEADER.unpack_from(data)
    bbox, n_tensors = rest[:6], rest[6]
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a surfreg checkpoint")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"unknown parameter dtype code {dtype_code}")

    offset = _HEADER.size
    if len(data) < offset + 8 * n_tensors:
        raise FormatError(f"{path}: truncated inside the table of {n_tensors} tensor sizes")
    counts = struct.unpack_from(f"<{n_tensors}Q", data, offset)
    offset += 8 * n_tensors
    if (len(data) - offset) % 8:
        raise FormatError(f"{path}: parameter data is not a whole number of float64 values")
    flat = np.frombuffer(data, dtype="<f8", offset=offset)
    if flat.size != sum(counts):
        raise FormatError(f"{path}: expected {sum(counts)} values, found {flat.size}")

    dtype = _CODE_DTYPES[dtype_code]
    field = GridField(
        grid_resolution=grid_res,
        color_resolution=color_res,
        feature_dim=feature_dim,
        hidden_dim=hidden_dim,
        bbox=(bbox[:3], bbox[3:]),
        dtype=dtype,
    )
    params = list(field.parameters())
    if len(params) != n_tensors or any(p.numel() != c for p, c in zip(params, counts)):
        raise FormatError(f"{path}: parameter layout does not match the field")

    start = 0
    with torch.no_grad():
        for param, count in zip(params, counts):
            values = torch.from_numpy(flat[start:start + count].astype(np.float64))
            param.copy_(values.reshape(param.shape).to(dtype))
            start += count
    return field


def write_ppm(path: PathLike, image: np.ndarray):
    """8-bit binary PPM (P6) from an (H, W, 3) image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"expected an (H, W, 3) image, got {image.shape}")
    height, width = image.shape[:2]
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a P6 PPM into an (H, W, 3) float image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1

    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if pixels.size != width * height * 3:
        raise FormatError(f"{path}: pixel data does not match {width}x{height}")
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def write_f32(path: PathLike, array: np.ndarray):
    """Raw little-endian float32 dump."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.asarray(array, dtype="<f4").tofile(path)


def read_f32(path: PathLike, shape: Tuple[int, ...]) -> np.ndarray:
    values = np.fromfile(path, dtype="<f4")
    if values.size != int(np.prod(shape)):
        raise FormatError(f"{path}: expected {int(np.prod(shape))} floats, found {values.size}")
    return values.reshape(shape).astype(np.float64)


def write_cameras(path: PathLike, cameras: Iterable[Camera]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CAMERA_HEADER)
        for cam in cameras:
            writer.writerow([cam.view_id, *map(repr, cam.position), *map(repr, cam.look), *map(repr, cam.up), repr(cam.fov_deg)])


def read_cameras(path: PathLike) -> List[Camera]:
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != CAMERA_HEADER:
                raise FormatError(f"{path}: camera header must be {','.join(CAMERA_HEADER)}")
            cameras = []
            for row in reader:
                cameras.append(
                    Camera(
                        position=tuple(float(row[k]) for k in ("pos_x", "pos_y", "pos_z")),
                        look=tuple(float(row[k]) for k in ("look_x", "look_y", "look_z")),
                        up=tuple(float(row[k]) for k in ("up_x", "up_y", "up_z")),
                        fov_deg=float(row["fov_deg"]),
                        view_id=int(row["view_id"]),
                    )
                )
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot read cameras from {path}: {e}") from e
    return cameras


def write_dataset(directory: PathLike, views: Sequence[GroundTruthView]):
    """Images, depth and normal maps per view plus ``cameras.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for view in views:
        vid = view.camera.view_id
        write_ppm(directory / f"view_{vid:03d}.ppm", view.image)
        write_f32(directory / f"depth_{vid:03d}.f32", view.depth)
        write_f32(directory / f"normal_{vid:03d}.f32", view.normal)
    write_cameras(directory / "cameras.csv", [v.camera for v in views])


def read_dataset(directory: PathLike) -> List[GroundTruthView]:
    """Inverse of ``write_dataset``; the mask is recovered from positive depth."""
    directory = Path(directory)
    views = []
    for cam in read_cameras(directory / "cameras.csv"):
        vid = cam.view_id
        image = read_ppm(directory / f"view_{vid:03d}.ppm")
        height, width = image.shape[:2]
        depth = read_f32(directory / f"depth_{vid:03d}.f32", (height, width))
        normal = read_f32(directory / f"normal_{vid:03d}.f32", (height, width, 3))
        views.append(GroundTruthView(cam, image, depth, normal, depth > 0))
    return views


BATCH_HEADER = [
    "ray_id", "kind", "j",
    "x", "y", "z",
    "dir_x", "dir_y", "dir_z",
    "tau", "n_x", "n_y", "n_z",
    "cs_r", "cs_g", "cs_b",
]


def write_reg_batch(path: PathLike, ray_ids: Sequence[int], batch) -> int:
    """Dump a RegBatch as CSV: spatial rows carry density and normals, directional rows c_s."""
    def values(t):
        return t.detach().double().cpu().numpy()

    x_m, d_m, tau, normals = values(batch.x_m), values(batch.d_m), values(batch.tau), values(batch.normals)
    x_phi, d_phi, c_s = values(batch.x_phi), values(batch.d_phi), values(batch.c_s)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BATCH_HEADER)
        for r, ray_id in enumerate(ray_ids):
            for j in range(x_m.shape[1]):
                writer.writerow(
                    [ray_id, "spatial", j, *map(repr, x_m[r, j].tolist()), *map(repr, d_m[r, j].tolist()),
                     repr(float(tau[r, j])), *map(repr, normals[r, j].tolist()), "", "", ""]
                )
                written += 1
            for j in range(d_phi.shape[1]):
                writer.writerow(
                    [ray_id, "directional", j, *map(repr, x_phi[r].tolist()), *map(repr, d_phi[r, j].tolist()),
                     "", "", "", "", *map(repr, c_s[r, j].tolist())]
                )
                written += 1
    return written
