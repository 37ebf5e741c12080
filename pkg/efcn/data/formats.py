"""Binary file formats for tensors, label masks and PPM visualizations.

Tensor file: magic ``EFTN``, u16 version, u8 dtype (0 float32, 1 float64), u8 rank,
rank x u32 dims, then the little-endian row-major payload.

Mask file: magic ``EFMK``, u16 version, u32 H, u32 W, u16 M, then H*W little-endian
u64 bit masks (bit j set when class j belongs to the pixel's label, 0 for pixels of
a class outside the frame).
"""

import logging
import re
import struct
import typing as T
from pathlib import Path

import numpy as np

from ..constants import (
    CLASS_COLORS,
    MULTI_CLASS_RGB,
    OMEGA_RGB,
    UNKNOWN_LABEL,
    UNLABELED_RGB,
    WRONG_ASSIGNMENT_RGB,
)
from ..errors import FormatError, InvalidLabelError
from ..frame import Frame, membership

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"EFTN"
TENSOR_VERSION = 1
MASK_MAGIC = b"EFMK"
MASK_VERSION = 1

_TENSOR_HEADER = struct.Struct("<4sHBB")
_MASK_HEADER = struct.Struct("<4sHIIH")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")

PathLike = T.Union[str, Path]


def save_tensor(path: PathLike, tensor: np.ndarray):
    tensor = np.asarray(tensor)
    code = _DTYPE_CODES.get(tensor.dtype)
    if code is None:
        raise FormatError(f"Tensors are float32 or float64, got {tensor.dtype}")
    if tensor.ndim == 0 or any(d < 1 for d in tensor.shape):
        raise FormatError(f"Tensor dims must be strictly positive, got {tensor.shape}")
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, code, tensor.ndim)
    dims = struct.pack(f"<{tensor.ndim}I", *tensor.shape)
    payload = np.ascontiguousarray(tensor, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(header + dims + payload)


def load_tensor(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        magic, version, code, rank = _TENSOR_HEADER.unpack_from(raw)
        dims = struct.unpack_from(f"<{rank}I", raw, _TENSOR_HEADER.size)
    except struct.error as err:
        raise FormatError(f"Truncated tensor header in {path}") from err
    if magic != TENSOR_MAGIC:
        raise FormatError(f"Not a tensor file (magic {magic!r}): {path}")
    if version != TENSOR_VERSION:
        raise FormatError(
            f"Unexpected tensor version `{version}` (expected `{TENSOR_VERSION}`)"
        )
    if rank == 0 or 0 in dims:
        raise FormatError(f"Tensor dims must be strictly positive, got {dims}: {path}")
    if code not in _DTYPES:
        raise FormatError(f"Unknown tensor dtype code {code}")
    dtype = _DTYPES[code]
    offset = _TENSOR_HEADER.size + 4 * rank
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise FormatError(
            f"Tensor payload has {len(raw) - offset} bytes, expected {expected}: {path}"
        )
    array = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)
    return array.astype(dtype.newbyteorder("="))


def save_mask(path: PathLike, label_bits: np.ndarray, frame: Frame):
    label_bits = np.asarray(label_bits, dtype=np.uint64)
    if label_bits.ndim != 2:
        raise FormatError(f"Masks are (H, W) maps, got {label_bits.shape}")
    if frame.M < 64 and np.any(label_bits >> np.uint64(frame.M)):
        raise InvalidLabelError(f"Mask has classes outside a frame of {frame.M}")
    H, W = label_bits.shape
    header = _MASK_HEADER.pack(MASK_MAGIC, MASK_VERSION, H, W, frame.M)
    Path(path).write_bytes(header + label_bits.astype("<u8").tobytes())


def load_mask(path: PathLike, frame: T.Optional[Frame] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        magic, version, H, W, M = _MASK_HEADER.unpack_from(raw)
    except struct.error as err:
        raise FormatError(f"Truncated mask header in {path}") from err
    if magic != MASK_MAGIC:
        raise FormatError(f"Not a mask file (magic {magic!r}): {path}")
    if version != MASK_VERSION:
        raise FormatError(
            f"Unexpected mask version `{version}` (expected `{MASK_VERSION}`)"
        )
    if frame is not None and frame.M != M:
        raise FormatError(f"Mask over {M} classes, frame has {frame.M}")
    expected = H * W * 8
    if len(raw) - _MASK_HEADER.size != expected:
        raise FormatError(
            f"Mask payload has {len(raw) - _MASK_HEADER.size} bytes, "
            f"expected {expected}: {path}"
        )
    bits = np.frombuffer(raw, dtype="<u8", offset=_MASK_HEADER.size).reshape(H, W)
    bits = bits.astype(np.uint64)
    if M < 64 and np.any(bits >> np.uint64(M)):
        raise FormatError(f"Mask {path} has bits set beyond its {M} classes")
    return bits


def save_ppm(path: PathLike, rgb: np.ndarray):
    """Binary PPM (P6), 8 bits per channel."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM export needs an (H, W, 3) image, got {rgb.shape}")
    H, W, _ = rgb.shape
    header = f"P6\n{W} {H}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.astype(np.uint8).tobytes())


def load_ppm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates the header from the pixels
    header = _PPM_HEADER.match(raw)
    if header is None or header.group(3) != b"255":
        raise FormatError(f"Unsupported PPM file {path}")
    W, H = int(header.group(1)), int(header.group(2))
    pixels = raw[header.end() :]
    if len(pixels) != H * W * 3:
        raise FormatError(f"PPM payload of {path} has {len(pixels)} bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(H, W, 3).copy()


def class_palette(M: int) -> np.ndarray:
    colors = np.array(CLASS_COLORS)
    return np.round(colors[np.arange(M) % len(colors)] * 255).astype(np.uint8)


def render_assignment(
    assigned: np.ndarray, frame: Frame, labels: T.Optional[np.ndarray] = None
) -> np.ndarray:
    """Colour an assigned-set map.

    Ω is pink, other multi-class sets green, precise assignments disjoint from a
    known label red, and every other precise assignment takes its class colour.
    """
    assigned = np.asarray(assigned, dtype=np.uint64)
    members = membership(assigned, frame.M)
    cardinality = members.sum(axis=-1)
    rgb = np.zeros(assigned.shape + (3,), dtype=np.uint8)

    precise = cardinality == 1
    rgb[precise] = class_palette(frame.M)[np.argmax(members[precise], axis=-1)]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint64)
        wrong = precise & (labels != UNKNOWN_LABEL) & ((assigned & labels) == 0)
        rgb[wrong] = WRONG_ASSIGNMENT_RGB
    rgb[cardinality > 1] = MULTI_CLASS_RGB
    rgb[assigned == np.uint64(frame.omega.bits)] = OMEGA_RGB
    return rgb


def render_labels(labels: np.ndarray, frame: Frame) -> np.ndarray:
    """Ground truth: class colours, soft labels green, unknown-class pixels black."""
    labels = np.asarray(labels, dtype=np.uint64)
    members = membership(labels, frame.M)
    cardinality = members.sum(axis=-1)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    precise = cardinality == 1
    rgb[precise] = class_palette(frame.M)[np.argmax(members[precise], axis=-1)]
    rgb[cardinality > 1] = MULTI_CLASS_RGB
    rgb[labels == UNKNOWN_LABEL] = UNLABELED_RGB
    return rgb
