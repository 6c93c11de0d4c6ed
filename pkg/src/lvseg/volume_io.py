"""Volume ingestion: NIfTI-1 single files and PGM slice directories.

Volumes are held as ``(row, col, slice)`` float arrays. For NIfTI the first
array axis (``i``, fastest varying on disk) is taken as the row axis.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    InvalidTarget,
    IoFailure,
    MalformedHeader,
    ShapeMismatch,
    UnsupportedDataType,
)

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy base dtype
_DATATYPES = {
    4: np.dtype("i2"),
    512: np.dtype("u2"),
    16: np.dtype("f4"),
}
_DATATYPE_CODES = {v.str[1:]: k for k, v in _DATATYPES.items()}

PGM_MAXVAL = 65535
MANIFEST = "manifest.txt"


@dataclass
class CmrVolume:
    case_id: str
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] | None = None
    labels: list[str] | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim == 2:
            self.voxels = self.voxels[:, :, None]
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeMismatch(f"volume must be 3-D and non-empty, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ShapeMismatch("volume contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[2]


@dataclass
class SliceImage:
    pixels: np.ndarray
    p: int
    n: int
    case_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if not 1 <= self.p <= self.n:
            raise ValueError(f"slice position {self.p} outside 1..{self.n}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class GroundTruthMask:
    pixels: np.ndarray
    p: int
    n: int
    case_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=bool)


# ---------------------------------------------------------------------------
# NIfTI-1


def _read_bytes(path: Path) -> bytes:
    try:
        if path.name.endswith(".gz"):
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except (OSError, EOFError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _parse_nifti(raw: bytes):
    if len(raw) < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"file shorter than the {NIFTI_HEADER_SIZE}-byte header")
    for endian in "<>":
        dim0 = struct.unpack_from(endian + "h", raw, 40)[0]
        if 1 <= dim0 <= 7:
            break
    else:
        raise MalformedHeader("dim[0] is not in 1..7 under either byte order")
    if struct.unpack_from(endian + "i", raw, 0)[0] != NIFTI_HEADER_SIZE:
        raise MalformedHeader("sizeof_hdr is not 348")
    if raw[344:348] != NIFTI_MAGIC:
        raise MalformedHeader(f"bad magic {raw[344:348]!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)

    if datatype not in _DATATYPES:
        raise UnsupportedDataType(f"NIfTI datatype {datatype} is not int16, uint16 or float32")
    ndim = dim[0]
    shape = [max(int(d), 1) for d in dim[1 : ndim + 1]]
    if ndim > 3 and any(d > 1 for d in shape[3:]):
        raise UnsupportedDataType(f"only 2-D/3-D volumes are supported, got dims {shape}")
    shape = (shape + [1, 1])[:3]

    dtype = _DATATYPES[datatype].newbyteorder(endian)
    count = int(np.prod(shape))
    end = vox_offset + count * dtype.itemsize
    if vox_offset < NIFTI_HEADER_SIZE or end > len(raw):
        raise MalformedHeader("voxel data runs past end of file")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if slope not in (0.0, 1.0) and np.isfinite(slope):
        data = data * slope + inter
    spacing = tuple(float(s) for s in pixdim[1:4])
    return data, spacing


def save_nifti(path: str | Path, voxels: np.ndarray, dtype: str = "i2",
               spacing=(1.0, 1.0, 1.0), big_endian: bool = False) -> None:
    """Write a minimal single-file NIfTI-1 volume (gzip if the name ends in .gz)."""
    path = Path(path)
    voxels = np.asarray(voxels)
    if voxels.ndim == 2:
        voxels = voxels[:, :, None]
    code = _DATATYPE_CODES[np.dtype(dtype).str[1:]]
    endian = ">" if big_endian else "<"
    dt = np.dtype(dtype).newbyteorder(endian)

    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, 40, 3, *voxels.shape, 1, 1, 1, 1)
    struct.pack_into(endian + "h", hdr, 70, code)
    struct.pack_into(endian + "h", hdr, 72, dt.itemsize * 8)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", hdr, 108, 352.0)
    struct.pack_into(endian + "2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = NIFTI_MAGIC
    payload = bytes(hdr) + b"\x00" * 4 + voxels.astype(dt).tobytes(order="F")
    try:
        if path.name.endswith(".gz"):
            with gzip.open(path, "wb") as fh:
                fh.write(payload)
        else:
            path.write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _case_id_from_path(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


# ---------------------------------------------------------------------------
# PGM and slice directories


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader(f"truncated PGM header in {path}")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise MalformedHeader(f"{path} is not a binary PGM (P5)")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = rows * cols
    if pos + count * dtype.itemsize > len(raw):
        raise MalformedHeader(f"PGM raster in {path} is truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return data.reshape(rows, cols).astype(np.float64)


def write_pgm(path: str | Path, pixels: np.ndarray, maxval: int = PGM_MAXVAL) -> None:
    pixels = np.asarray(pixels)
    rows, cols = pixels.shape
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    data = np.clip(np.rint(pixels), 0, maxval).astype(dtype)
    try:
        Path(path).write_bytes(f"P5\n{cols} {rows}\n{maxval}\n".encode() + data.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_mask_pgm(path: str | Path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool) * 255, maxval=255)


def read_manifest(directory: str | Path) -> dict[str, str]:
    path = Path(directory) / MANIFEST
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    out = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedHeader(f"manifest line without '=': {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_slice_directory(directory: str | Path, volume: CmrVolume,
                          gt: np.ndarray | None = None) -> Path:
    """Write ``volume`` (values already on the 0..65535 scale) as a slice directory.

    ``gt`` is an optional boolean ``(row, col, slice)`` array stored as 0/65535.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows, cols, n = volume.dims
    lines = [f"case_id={volume.case_id}", f"n_slices={n}", f"rows={rows}", f"cols={cols}"]
    if volume.labels is not None:
        lines.append("labels=" + ",".join(volume.labels))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    for k in range(n):
        write_pgm(directory / f"slice_{k + 1:03d}.pgm", volume.voxels[:, :, k])
        if gt is not None:
            write_pgm(directory / f"gt_{k + 1:03d}.pgm", np.asarray(gt[:, :, k], bool) * PGM_MAXVAL)
    return directory


def _load_slice_directory(directory: Path) -> CmrVolume:
    meta = read_manifest(directory)
    try:
        n = int(meta["n_slices"])
        rows, cols = int(meta["rows"]), int(meta["cols"])
    except (KeyError, ValueError) as exc:
        raise MalformedHeader(f"manifest in {directory} lacks n_slices/rows/cols") from exc
    planes = []
    for k in range(1, n + 1):
        plane = read_pgm(directory / f"slice_{k:03d}.pgm")
        if plane.shape != (rows, cols):
            raise ShapeMismatch(f"slice {k} has shape {plane.shape}, manifest says {(rows, cols)}")
        planes.append(plane)
    labels = meta.get("labels")
    labels = [s.strip() for s in labels.split(",")] if labels else None
    if labels is not None and len(labels) != n:
        raise MalformedHeader("manifest labels do not match n_slices")
    return CmrVolume(meta.get("case_id", directory.name), np.stack(planes, axis=2), labels=labels)


def load_volume(path: str | Path) -> CmrVolume:
    path = Path(path)
    if path.is_dir():
        return _load_slice_directory(path)
    if not path.exists():
        raise IoFailure(f"{path} does not exist")
    data, spacing = _parse_nifti(_read_bytes(path))
    return CmrVolume(_case_id_from_path(path), data, spacing_mm=spacing)


# ---------------------------------------------------------------------------
# slicing and geometry


def normalize_slice(plane: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 255]; a constant plane maps to zeros."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi <= lo:
        return np.zeros_like(plane)
    return (plane - lo) * 255.0 / (hi - lo)


def extract_slices(volume: CmrVolume) -> list[SliceImage]:
    n = volume.n_slices
    return [
        SliceImage(normalize_slice(volume.voxels[:, :, k]), k + 1, n, volume.case_id)
        for k in range(n)
    ]


def _grid(src: int, dst: int) -> np.ndarray:
    if dst == 1:
        return np.zeros(1)
    return np.arange(dst) * ((src - 1) / (dst - 1))


def resize_array(pixels: np.ndarray, rows: int, cols: int, order: int = 1) -> np.ndarray:
    """Corner-aligned resampling (``order`` 1 bilinear, 0 nearest neighbour)."""
    if rows < 2 or cols < 2:
        raise InvalidTarget(f"target size must be at least 2x2, got {rows}x{cols}")
    pixels = np.asarray(pixels)
    if pixels.shape == (rows, cols):
        return pixels.copy()
    rr, cc = np.meshgrid(_grid(pixels.shape[0], rows), _grid(pixels.shape[1], cols), indexing="ij")
    if order == 0:
        return pixels[np.rint(rr).astype(int), np.rint(cc).astype(int)]
    return ndimage.map_coordinates(pixels.astype(np.float64), [rr, cc], order=1, mode="nearest")


def resize_bilinear(s: SliceImage, rows: int, cols: int) -> SliceImage:
    return SliceImage(resize_array(s.pixels, rows, cols, order=1), s.p, s.n, s.case_id)


def resize_mask(m: GroundTruthMask, rows: int, cols: int) -> GroundTruthMask:
    return GroundTruthMask(resize_array(m.pixels, rows, cols, order=0), m.p, m.n, m.case_id)


def load_ground_truth(path: str | Path, lv_label: int = 3, size: tuple[int, int] | None = None,
                      expected_dims: tuple[int, int, int] | None = None) -> list[GroundTruthMask]:
    """Read a label volume and return one LV mask per slice.

    NIfTI label volumes are compared against ``lv_label``. A slice directory
    stores binary ``gt_NNN.pgm`` planes (0 / 65535) and any nonzero value
    counts as LV there.
    """
    path = Path(path)
    if path.is_dir():
        meta = read_manifest(path)
        n = int(meta["n_slices"])
        labels = np.stack([read_pgm(path / f"gt_{k:03d}.pgm") for k in range(1, n + 1)], axis=2)
        masks = labels > 0
        case_id = meta.get("case_id", path.name)
    else:
        data, _ = _parse_nifti(_read_bytes(path))
        masks = data == lv_label
        case_id = _case_id_from_path(path)
        if case_id.endswith("_gt"):
            case_id = case_id[:-3]
    if expected_dims is not None and tuple(masks.shape) != tuple(expected_dims):
        raise ShapeMismatch(f"label volume {masks.shape} does not match image volume {expected_dims}")
    n = masks.shape[2]
    out = [GroundTruthMask(masks[:, :, k], k + 1, n, case_id) for k in range(n)]
    if size is not None:
        out = [resize_mask(m, *size) for m in out]
    return out
