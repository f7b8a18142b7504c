"""Multi-format medical image I/O with geometry metadata.

Reads and writes NIfTI-1 (.nii/.nii.gz), MetaImage (.mha/.mhd) and raster
(.png/.jpg/...) files into a channel-first :class:`ImageVolume`. Format is
detected from the extension. Raster images carry no geometry and get unit
spacing; their intensities are normalized to [0, 1] unless loaded as labels.
"""

from __future__ import annotations

import enum
import gzip
import math
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class ImageIOError(Exception):
    """An image file could not be read or written."""


class FormatError(ImageIOError):
    """The file extension does not map to a supported format."""


class ImageFormat(enum.Enum):
    NIFTI = "nifti"
    METAIMAGE = "metaimage"
    RASTER = "raster"


NIFTI_EXTENSIONS = (".nii", ".nii.gz")
METAIMAGE_EXTENSIONS = (".mha", ".mhd")
RASTER_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SUPPORTED_EXTENSIONS = NIFTI_EXTENSIONS + METAIMAGE_EXTENSIONS + RASTER_EXTENSIONS


def detect_format(path: str | Path) -> ImageFormat:
    name = str(path).lower()
    if name.endswith(NIFTI_EXTENSIONS):
        return ImageFormat.NIFTI
    if name.endswith(METAIMAGE_EXTENSIONS):
        return ImageFormat.METAIMAGE
    if name.endswith(RASTER_EXTENSIONS):
        return ImageFormat.RASTER
    raise FormatError(f"unsupported image extension: {path}")


def strip_image_suffix(path: str | Path) -> str:
    """File stem with the (possibly double) image extension removed."""
    name = Path(path).name
    lower = name.lower()
    for ext in SUPPORTED_EXTENSIONS:
        if lower.endswith(ext):
            return name[: -len(ext)]
    return Path(name).stem


def _identity_direction(rank: int) -> tuple[float, ...]:
    return tuple(np.eye(rank, dtype=np.float64).ravel())


@dataclass
class ImageVolume:
    """Channel-first image data plus physical geometry.

    ``data`` has shape (C, *spatial) with spatial rank 2 or 3; ``spacing`` is
    the per-axis voxel size in millimeters, aligned with the spatial axes.
    """

    data: torch.Tensor
    spacing: tuple[float, ...] = ()
    origin: tuple[float, ...] = ()
    direction: tuple[float, ...] = ()
    source_format: ImageFormat = ImageFormat.RASTER

    def __post_init__(self) -> None:
        rank = self.data.dim() - 1
        if rank not in (2, 3):
            raise ValueError(f"spatial rank must be 2 or 3, got data shape {tuple(self.data.shape)}")
        if not self.spacing:
            self.spacing = (1.0,) * rank
        if not self.origin:
            self.origin = (0.0,) * rank
        if not self.direction:
            self.direction = _identity_direction(rank)
        if len(self.spacing) != rank:
            raise ValueError(f"spacing has {len(self.spacing)} entries for spatial rank {rank}")

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def num_channels(self) -> int:
        return int(self.data.shape[0])

    def to(self, device: str | torch.device) -> "ImageVolume":
        return replace(self, data=self.data.to(device))


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _read_nifti(path: Path) -> ImageVolume:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise ImageIOError(f"truncated NIfTI file: {path}")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise ImageIOError(f"not a NIfTI-1 file (bad header size): {path}")
    dim = struct.unpack_from(f"{order}8h", raw, 40)
    ndim = dim[0]
    if ndim < 2 or ndim > 4:
        raise ImageIOError(f"unsupported NIfTI dimensionality {ndim}: {path}")
    shape = tuple(max(1, d) for d in dim[1 : ndim + 1])
    (datatype,) = struct.unpack_from(f"{order}h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ImageIOError(f"unsupported NIfTI datatype code {datatype}: {path}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
    pixdim = struct.unpack_from(f"{order}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{order}f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{order}2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(f"{order}2h", raw, 252)
    qoffset = struct.unpack_from(f"{order}3f", raw, 268)
    srow = np.array(struct.unpack_from(f"{order}12f", raw, 280), dtype=np.float64).reshape(3, 4)

    offset = int(vox_offset) if vox_offset >= 348 else 352
    count = int(np.prod(shape))
    buf = raw[offset : offset + count * dtype.itemsize]
    if len(buf) < count * dtype.itemsize:
        raise ImageIOError(f"NIfTI payload shorter than header promises: {path}")
    array = np.frombuffer(buf, dtype=dtype).reshape(shape, order="F")
    array = np.ascontiguousarray(array).astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        array = array.astype(np.float32) * slope + scl_inter

    rank = min(ndim, 3)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1 : rank + 1])
    if sform_code > 0:
        origin = tuple(float(srow[i, 3]) for i in range(rank))
        direction = tuple(
            float(srow[i, j] / spacing[j]) if spacing[j] else 0.0
            for i in range(rank)
            for j in range(rank)
        )
    elif qform_code > 0:
        origin = tuple(float(q) for q in qoffset[:rank])
        direction = _identity_direction(rank)
    else:
        origin = (0.0,) * rank
        direction = _identity_direction(rank)

    if ndim == 4:
        array = np.moveaxis(array, -1, 0)  # trailing volume axis -> channels
    else:
        array = array[np.newaxis]
    return ImageVolume(
        data=torch.from_numpy(np.ascontiguousarray(array)),
        spacing=spacing,
        origin=origin,
        direction=direction,
        source_format=ImageFormat.NIFTI,
    )


def _write_nifti(vol: ImageVolume, path: Path) -> None:
    array = vol.data.detach().cpu().numpy()
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    channels = array.shape[0]
    rank = array.ndim - 1
    if channels > 1 and rank != 3:
        raise ImageIOError("multi-channel NIfTI output requires a 3-D volume")
    if channels == 1:
        payload = array[0]
        dim = (rank,) + payload.shape + (1,) * (7 - rank)
    else:
        payload = np.moveaxis(array, 0, -1)  # channels become the 4th axis
        dim = (4,) + payload.shape + (1,) * (7 - payload.ndim)
    dtype = np.dtype(payload.dtype)
    if dtype not in _NIFTI_CODES:
        raise ImageIOError(f"dtype {dtype} not representable in NIfTI-1")

    spacing = vol.spacing + (1.0,) * (7 - len(vol.spacing))
    direction = np.eye(3, dtype=np.float64)
    dmat = np.asarray(vol.direction, dtype=np.float64).reshape(rank, rank)
    direction[:rank, :rank] = dmat
    srow = direction * np.array([spacing[0], spacing[1], spacing[2]])[np.newaxis, :]
    origin = tuple(vol.origin) + (0.0,) * (3 - len(vol.origin))

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, _NIFTI_CODES[dtype])
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    struct.pack_into("<2h", header, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<3f", header, 268, *origin)
    for i in range(3):
        struct.pack_into("<4f", header, 280 + 16 * i, *srow[i], origin[i])
    struct.pack_into("<4s", header, 344, b"n+1\x00")

    blob = bytes(header) + b"\x00\x00\x00\x00" + payload.tobytes(order="F")
    if str(path).lower().endswith(".gz"):
        path.write_bytes(gzip.compress(blob))
    else:
        path.write_bytes(blob)


# ---------------------------------------------------------------------------
# MetaImage
# ---------------------------------------------------------------------------

_MET_TYPES = {
    "MET_CHAR": np.int8,
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_LONG_LONG": np.int64,
    "MET_ULONG_LONG": np.uint64,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}
_MET_NAMES = {np.dtype(v): k for k, v in _MET_TYPES.items()}


def _read_metaimage(path: Path) -> ImageVolume:
    raw = path.read_bytes()
    header: dict[str, str] = {}
    cursor = 0
    while cursor < len(raw):
        newline = raw.find(b"\n", cursor)
        if newline < 0:
            raise ImageIOError(f"MetaImage header has no ElementDataFile entry: {path}")
        line = raw[cursor:newline].decode("ascii", errors="replace").strip()
        cursor = newline + 1
        if not line:
            continue
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            break
    else:
        raise ImageIOError(f"MetaImage header has no ElementDataFile entry: {path}")

    try:
        ndims = int(header["NDims"])
        sizes = tuple(int(v) for v in header["DimSize"].split())
        element_type = header["ElementType"]
    except KeyError as err:
        raise ImageIOError(f"MetaImage header missing {err} field: {path}") from err
    if ndims not in (2, 3) or len(sizes) != ndims:
        raise ImageIOError(f"unsupported MetaImage dimensionality {ndims}: {path}")
    if element_type not in _MET_TYPES:
        raise ImageIOError(f"unsupported MetaImage element type {element_type}: {path}")
    channels = int(header.get("ElementNumberOfChannels", "1"))
    spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 " * ndims).split())
    origin = tuple(float(v) for v in header.get("Offset", "0 " * ndims).split())
    direction_values = header.get("TransformMatrix")
    direction = (
        tuple(float(v) for v in direction_values.split())
        if direction_values
        else _identity_direction(ndims)
    )

    datafile = header["ElementDataFile"]
    if datafile.upper() == "LOCAL":
        buf = raw[cursor:]
    else:
        buf = (path.parent / datafile).read_bytes()
    if header.get("CompressedData", "False").lower() == "true":
        buf = zlib.decompress(buf)
    dtype = np.dtype(_MET_TYPES[element_type])
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")
    count = channels * int(np.prod(sizes))
    if len(buf) < count * dtype.itemsize:
        raise ImageIOError(f"MetaImage payload shorter than header promises: {path}")
    array = np.frombuffer(buf[: count * dtype.itemsize], dtype=dtype)
    array = array.reshape((channels,) + sizes, order="F")  # channels interleave fastest
    array = np.ascontiguousarray(array).astype(dtype.newbyteorder("="))
    return ImageVolume(
        data=torch.from_numpy(array),
        spacing=spacing,
        origin=origin,
        direction=direction,
        source_format=ImageFormat.METAIMAGE,
    )


def _write_metaimage(vol: ImageVolume, path: Path) -> None:
    array = vol.data.detach().cpu().numpy()
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    dtype = np.dtype(array.dtype)
    if dtype not in _MET_NAMES:
        raise ImageIOError(f"dtype {dtype} not representable in MetaImage")
    rank = array.ndim - 1
    local = str(path).lower().endswith(".mha")
    lines = [
        "ObjectType = Image",
        f"NDims = {rank}",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"TransformMatrix = {' '.join(_fmt(v) for v in vol.direction)}",
        f"Offset = {' '.join(_fmt(v) for v in vol.origin)}",
        f"ElementSpacing = {' '.join(_fmt(v) for v in vol.spacing)}",
        f"DimSize = {' '.join(str(s) for s in array.shape[1:])}",
    ]
    if array.shape[0] != 1:
        lines.append(f"ElementNumberOfChannels = {array.shape[0]}")
    lines.append(f"ElementType = {_MET_NAMES[dtype]}")
    payload = array.tobytes(order="F")
    if local:
        lines.append("ElementDataFile = LOCAL")
        path.write_bytes(("\n".join(lines) + "\n").encode("ascii") + payload)
    else:
        rawname = path.with_suffix(".raw").name
        lines.append(f"ElementDataFile = {rawname}")
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
        (path.parent / rawname).write_bytes(payload)


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# Raster
# ---------------------------------------------------------------------------


def _read_raster(path: Path, is_label: bool) -> ImageVolume:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "I", "I;16", "RGB"):
                img = img.convert("RGB")
            array = np.asarray(img)
    except ImageIOError:
        raise
    except Exception as err:
        raise ImageIOError(f"failed to decode raster image {path}: {err}") from err
    if array.ndim == 2:
        array = array[np.newaxis]
    else:
        array = np.moveaxis(array, -1, 0)
    if is_label:
        data = torch.from_numpy(array.astype(np.int64))
    else:
        peak = 65535.0 if array.dtype.itemsize > 1 else 255.0
        data = torch.from_numpy(array.astype(np.float32) / peak)
    return ImageVolume(data=data, source_format=ImageFormat.RASTER)


def _write_raster(vol: ImageVolume, path: Path) -> None:
    array = vol.data.detach().cpu().numpy()
    if array.ndim != 3:
        raise ImageIOError("raster output requires 2-D data (C, H, W)")
    if np.issubdtype(array.dtype, np.floating):
        array = np.clip(np.round(array.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    else:
        array = np.clip(array, 0, 255).astype(np.uint8)
    if array.shape[0] == 1:
        img = Image.fromarray(array[0], mode="L")
    elif array.shape[0] == 3:
        img = Image.fromarray(np.moveaxis(array, 0, -1), mode="RGB")
    else:
        raise ImageIOError(f"raster output supports 1 or 3 channels, got {array.shape[0]}")
    img.save(path)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def resample_isotropic(vol: ImageVolume, iso_mm: float, is_label: bool = False) -> ImageVolume:
    """Resample every axis to ``iso_mm`` spacing.

    Linear interpolation for images, nearest-neighbor for labels so class
    values stay integral.
    """
    if iso_mm <= 0:
        raise ValueError(f"isotropic spacing must be positive, got {iso_mm}")
    rank = len(vol.spatial_shape)
    new_size = tuple(
        max(1, round(n * s / iso_mm)) for n, s in zip(vol.spatial_shape, vol.spacing)
    )
    if new_size == vol.spatial_shape and all(math.isclose(s, iso_mm) for s in vol.spacing):
        return replace(vol, spacing=(float(iso_mm),) * rank)
    original_dtype = vol.data.dtype
    batch = vol.data.unsqueeze(0).float()
    if is_label or not original_dtype.is_floating_point:
        resized = F.interpolate(batch, size=new_size, mode="nearest-exact")
        data = resized.squeeze(0).to(original_dtype)
    else:
        mode = "bilinear" if rank == 2 else "trilinear"
        resized = F.interpolate(batch, size=new_size, mode=mode, align_corners=False)
        data = resized.squeeze(0).to(original_dtype)
    return replace(vol, data=data, spacing=(float(iso_mm),) * rank)


def load_image(
    path: str | Path,
    resample_iso: float | None = None,
    device: str | torch.device | None = None,
    is_label: bool = False,
) -> ImageVolume:
    """Load an image with automatic format detection.

    Optionally resamples to isotropic spacing and moves the tensor to
    ``device``. ``is_label`` keeps raster intensities integral and switches
    resampling to nearest-neighbor.
    """
    path = Path(path)
    fmt = detect_format(path)
    if not path.exists():
        raise ImageIOError(f"no such file: {path}")
    try:
        if fmt is ImageFormat.NIFTI:
            vol = _read_nifti(path)
        elif fmt is ImageFormat.METAIMAGE:
            vol = _read_metaimage(path)
        else:
            vol = _read_raster(path, is_label)
    except ImageIOError:
        raise
    except Exception as err:
        raise ImageIOError(f"failed to read {path}: {err}") from err
    if is_label and vol.data.dtype.is_floating_point and fmt is not ImageFormat.RASTER:
        vol = replace(vol, data=vol.data.round().long())
    if resample_iso is not None:
        vol = resample_isotropic(vol, resample_iso, is_label=is_label)
    if device is not None:
        vol = vol.to(device)
    return vol


def save_image(vol: ImageVolume | torch.Tensor, path: str | Path) -> None:
    """Write an image; the format is chosen from the target extension."""
    path = Path(path)
    fmt = detect_format(path)
    if isinstance(vol, torch.Tensor):
        data = vol if vol.dim() > 2 else vol.unsqueeze(0)
        vol = ImageVolume(data=data, source_format=fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if fmt is ImageFormat.NIFTI:
            _write_nifti(vol, path)
        elif fmt is ImageFormat.METAIMAGE:
            _write_metaimage(vol, path)
        else:
            _write_raster(vol, path)
    except ImageIOError:
        raise
    except Exception as err:
        raise ImageIOError(f"failed to write {path}: {err}") from err
