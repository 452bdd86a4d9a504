"""Scalar 3D volumes with physical geometry, and integral volumes.

Two on-disk formats are supported:

* a little-endian NIfTI-1 subset (``.nii`` single file or ``.hdr``/``.img``
  pair) with datatypes uint8, int16, int32 and float32, and the
  sform/qform reduced to a per-axis scale plus translation;
* a self-describing raw format: a text header of ``key: value`` lines
  (``dims``, ``spacing``, ``origin``, ``dtype``, ``data``) next to a binary
  payload in x-fastest order.

Voxel ``(i, j, k)`` sits at ``origin + spacing * (i, j, k)`` in mm, i.e. the
origin is the center of the first voxel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
}
NIFTI_CODES = {v: k for k, v in NIFTI_DTYPES.items()}
RAW_DTYPES = {
    "uint8": np.dtype("<u1"),
    "int16": np.dtype("<i2"),
    "int32": np.dtype("<i4"),
    "float32": np.dtype("<f4"),
}


class VolumeFormatError(ValueError):
    """Raised for unreadable or unsupported volume files."""


@dataclass(frozen=True)
class Volume:
    """Scalar 3D image.

    ``voxels`` is a flat array in x-fastest order. Integer sources up to int16
    and float32 are held as float32; int32 is held as float64 so that every
    value stays exact. ``source_dtype`` remembers the on-disk type for
    writing back.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    voxels: np.ndarray
    source_dtype: np.dtype = field(default=np.dtype("<f4"))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"invalid spacing {self.spacing}")
        voxels = np.array(self.voxels, copy=True).reshape(-1)
        if voxels.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(
                f"voxel count {voxels.size} does not match dims {dims}")
        voxels.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxels", voxels)
        object.__setattr__(self, "source_dtype", np.dtype(self.source_dtype))

    @classmethod
    def from_array(cls, array, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   source_dtype=None):
        """Build a volume from a ``(nz, ny, nx)`` array."""
        array = np.asarray(array)
        if array.ndim != 3:
            raise ValueError("expected a 3D array indexed [z, y, x]")
        nz, ny, nx = array.shape
        if source_dtype is None:
            source_dtype = array.dtype if array.dtype in RAW_DTYPES.values() else np.dtype("<f4")
        return cls((nx, ny, nz), spacing, origin,
                   _working_copy(array.reshape(-1), np.dtype(source_dtype)),
                   np.dtype(source_dtype))

    def array(self) -> np.ndarray:
        """Read-only ``(nz, ny, nx)`` view of the voxels."""
        nx, ny, nz = self.dims
        return self.voxels.reshape(nz, ny, nx)

    def index_to_mm(self, ijk) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.spacing) * np.asarray(ijk, dtype=float)

    def mm_to_index(self, xyz) -> np.ndarray:
        return (np.asarray(xyz, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (lo, hi) corners of the voxel-center lattice."""
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.spacing) * (np.asarray(self.dims) - 1)
        return lo, hi


def _working_copy(flat: np.ndarray, source_dtype: np.dtype) -> np.ndarray:
    work = np.float64 if source_dtype == np.dtype("<i4") else np.float32
    return flat.astype(work)


@dataclass(frozen=True)
class IntegralVolume:
    """Zero-padded 3D prefix sums, ``sums`` shaped ``(nz+1, ny+1, nx+1)``."""

    dims: tuple[int, int, int]
    sums: np.ndarray

    def table(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.sums.reshape(nz, ny, nx)


def build_integral(v: Volume) -> IntegralVolume:
    """Cumulative sums in double precision with a one-cell zero border."""
    nx, ny, nz = v.dims
    table = np.zeros((nz + 1, ny + 1, nx + 1), dtype=np.float64)
    a = v.array().astype(np.float64)
    np.cumsum(a, axis=0, out=table[1:, 1:, 1:])
    np.cumsum(table[1:, 1:, 1:], axis=1, out=table[1:, 1:, 1:])
    np.cumsum(table[1:, 1:, 1:], axis=2, out=table[1:, 1:, 1:])
    table.flags.writeable = False
    return IntegralVolume((nx + 1, ny + 1, nz + 1), table.reshape(-1))


def box_sum(iv: IntegralVolume, lo, hi) -> float:
    """Sum of voxels in the closed box ``[lo, hi]`` (voxel ``(i, j, k)`` triples).

    The box is clamped to the volume; a box with no voxel inside sums to 0.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    if lo.shape != (3,) or hi.shape != (3,):
        raise ValueError("lo and hi must be index triples")
    if np.any(lo > hi):
        raise ValueError(f"box lo {tuple(lo)} exceeds hi {tuple(hi)}")
    n = np.asarray(iv.dims) - 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, n - 1)
    if np.any(lo > hi):
        return 0.0
    t = iv.table()
    x0, y0, z0 = lo
    x1, y1, z1 = hi + 1
    return float(
        t[z1, y1, x1] - t[z0, y1, x1] - t[z1, y0, x1] - t[z1, y1, x0]
        + t[z0, y0, x1] + t[z0, y1, x0] + t[z1, y0, x0] - t[z0, y0, x0])


def box_sums(table: np.ndarray, z0, z1, y0, y1, x0, x1) -> np.ndarray:
    """Vectorized closed-box sums on a ``(nz+1, ny+1, nx+1)`` table.

    Bounds are broadcastable integer arrays already clipped to the volume;
    ``*1`` are inclusive.
    """
    z1 = z1 + 1
    y1 = y1 + 1
    x1 = x1 + 1
    return (table[z1, y1, x1] - table[z0, y1, x1] - table[z1, y0, x1]
            - table[z1, y1, x0] + table[z0, y0, x1] + table[z0, y1, x0]
            + table[z1, y0, x0] - table[z0, y0, x0])


# --------------------------------------------------------------------------
# file formats


def load_volume(path) -> Volume:
    path = Path(path)
    try:
        head = path.read_bytes()[:NIFTI_HEADER_SIZE]
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc
    if len(head) >= 4 and struct.unpack("<i", head[:4])[0] == NIFTI_HEADER_SIZE:
        return _load_nifti(path)
    if len(head) >= 4 and struct.unpack(">i", head[:4])[0] == NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: big-endian NIfTI is not supported")
    return _load_raw(path)


def write_volume(path, v: Volume) -> None:
    """Write ``.nii`` as NIfTI-1, anything else as raw header + ``.raw`` payload."""
    path = Path(path)
    if path.suffix == ".nii":
        _write_nifti(path, v)
    else:
        _write_raw(path, v)


def _payload(v: Volume) -> bytes:
    return v.voxels.astype(v.source_dtype).tobytes()


def _load_nifti(path: Path) -> Volume:
    data = path.read_bytes()
    if len(data) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: truncated NIfTI header")
    magic = data[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack_from("<8h", data, 40)
    if dim[0] != 3:
        raise VolumeFormatError(f"{path}: expected 3 dimensions, got {dim[0]}")
    datatype = struct.unpack_from("<h", data, 70)[0]
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
    dtype = NIFTI_DTYPES[datatype]
    pixdim = struct.unpack_from("<8f", data, 76)
    vox_offset = struct.unpack_from("<f", data, 108)[0]
    slope, inter = struct.unpack_from("<2f", data, 112)
    qform_code, sform_code = struct.unpack_from("<2h", data, 252)
    qoffset = struct.unpack_from("<3f", data, 268)
    srow = np.array(struct.unpack_from("<12f", data, 280)).reshape(3, 4)

    dims = tuple(int(d) for d in dim[1:4])
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        origin = tuple(float(o) for o in srow[:, 3])
        spacing = tuple(float(abs(srow[a, a])) or spacing[a] for a in range(3))
    elif qform_code > 0:
        origin = tuple(float(o) for o in qoffset)
    else:
        origin = (0.0, 0.0, 0.0)

    count = dims[0] * dims[1] * dims[2]
    if magic == b"n+1\x00":
        start = int(vox_offset) if vox_offset >= NIFTI_HEADER_SIZE else 352
        payload = data[start:]
    else:
        img = path.with_suffix(".img")
        try:
            payload = img.read_bytes()[int(vox_offset):]
        except OSError as exc:
            raise VolumeFormatError(f"cannot read {img}: {exc}") from exc
    if len(payload) < count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: truncated voxel payload")
    raw = np.frombuffer(payload, dtype=dtype, count=count)
    voxels = _working_copy(raw, dtype)
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope != 0.0:
            voxels = voxels * slope + inter
    return Volume(dims, spacing, origin, voxels, dtype)


def _write_nifti(path: Path, v: Volume) -> None:
    if v.source_dtype not in NIFTI_CODES:
        raise VolumeFormatError(f"cannot write dtype {v.source_dtype} to NIfTI")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, NIFTI_CODES[v.source_dtype])
    struct.pack_into("<h", hdr, 72, v.source_dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)
    srow = np.zeros((3, 4))
    srow[np.arange(3), np.arange(3)] = v.spacing
    srow[:, 3] = v.origin
    struct.pack_into("<12f", hdr, 280, *srow.reshape(-1))
    hdr[344:348] = b"n+1\x00"
    path.write_bytes(bytes(hdr) + _payload(v))


def _load_raw(path: Path) -> Volume:
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{path}: not a NIfTI file or raw header") from exc
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip().lower()] = value.strip()
    missing = {"dims", "dtype", "data"} - fields.keys()
    if missing:
        raise VolumeFormatError(f"{path}: header missing {sorted(missing)}")
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        spacing = tuple(float(x) for x in fields.get("spacing", "1 1 1").split())
        origin = tuple(float(x) for x in fields.get("origin", "0 0 0").split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: bad numeric header field") from exc
    if len(dims) != 3:
        raise VolumeFormatError(f"{path}: expected 3 dimensions, got {len(dims)}")
    if fields["dtype"] not in RAW_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {fields['dtype']!r}")
    dtype = RAW_DTYPES[fields["dtype"]]
    data_path = path.parent / fields["data"]
    try:
        payload = data_path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {data_path}: {exc}") from exc
    count = int(np.prod(dims))
    if len(payload) < count * dtype.itemsize:
        raise VolumeFormatError(f"{data_path}: truncated voxel payload")
    raw = np.frombuffer(payload, dtype=dtype, count=count)
    return Volume(dims, spacing, origin, _working_copy(raw, dtype), dtype)


def _write_raw(path: Path, v: Volume) -> None:
    names = {dt: name for name, dt in RAW_DTYPES.items()}
    if v.source_dtype not in names:
        raise VolumeFormatError(f"cannot write dtype {v.source_dtype}")
    data_path = path.with_suffix(".raw")
    data_path.write_bytes(_payload(v))
    fmt = lambda xs: " ".join(repr(float(x)) for x in xs)
    path.write_text(
        f"dims: {' '.join(str(d) for d in v.dims)}\n"
        f"spacing: {fmt(v.spacing)}\n"
        f"origin: {fmt(v.origin)}\n"
        f"dtype: {names[v.source_dtype]}\n"
        f"data: {data_path.name}\n")
