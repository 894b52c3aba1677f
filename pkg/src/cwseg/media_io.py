"""File interfaces: PPM/PGM frames, color ground-truth masks, weight stores,
and sequence manifests. Everything here is bit-exact and dependency-free on
purpose so golden files stay stable across platforms.

Weight store format (magic ``CWFCN1``), all integers little-endian:

    magic       6 bytes  b"CWFCN1"
    count       u32      number of entries
    per entry:
      name_len  u32
      name      name_len bytes, UTF-8
      rank      u32
      dims      rank x u32
      payload   prod(dims) x f32

Synthetic weights come from a counter-based splitmix64 stream so the same
(config, seed) pair always yields bit-identical stores; the exact recipe is
documented on :func:`gen_weights`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FileFormatError, ShapeError
from .tensor_ops import Tensor, as_chw
from .net import NetConfig, layer_specs

Color = tuple[int, int, int]

# index 0 = background (black), index 1 = road (magenta)
DEFAULT_PALETTE: tuple[Color, ...] = ((0, 0, 0), (255, 0, 255))

_WHITESPACE = b" \t\r\n\x0b\x0c"


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5), binary, 8-bit only


def _next_token(data: bytes, pos: int, path, what: str) -> tuple[bytes, int]:
    """Return (token, end_pos), skipping whitespace and # comments."""
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == ord('#'):
            nl = data.find(b"\n", pos)
            pos = n if nl < 0 else nl + 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WHITESPACE and data[pos] != ord('#'):
        pos += 1
    if start == pos:
        raise FileFormatError(
            f"{path}: header truncated at byte offset {pos} while reading {what}"
        )
    return data[start:pos], pos


def _header_int(data: bytes, pos: int, path, what: str) -> tuple[int, int]:
    tok, pos = _next_token(data, pos, path, what)
    try:
        value = int(tok)
    except ValueError:
        raise FileFormatError(f"{path}: bad {what} token {tok!r}") from None
    return value, pos


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file.

    Returns uint8 arrays: (H, W) for P5, (H, W, 3) for P6. Only maxval 255
    is accepted.
    """
    data = Path(path).read_bytes()
    magic, pos = _next_token(data, 0, path, "magic")
    if magic not in (b"P5", b"P6"):
        raise FileFormatError(
            f"{path}: unsupported magic {magic!r}, expected P5 or P6"
        )
    width, pos = _header_int(data, pos, path, "width")
    height, pos = _header_int(data, pos, path, "height")
    maxval, pos = _header_int(data, pos, path, "maxval")
    if width < 1 or height < 1:
        raise FileFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FileFormatError(f"{path}: maxval {maxval} not supported, need 255")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FileFormatError(
            f"{path}: missing whitespace after maxval at byte offset {pos}"
        )
    pos += 1
    channels = 1 if magic == b"P5" else 3
    needed = width * height * channels
    avail = len(data) - pos
    if avail < needed:
        raise FileFormatError(
            f"{path}: truncated pixel payload, need {needed} bytes at byte "
            f"offset {pos} but file ends at byte {len(data)}"
        )
    flat = np.frombuffer(data, dtype=np.uint8, count=needed, offset=pos)
    if channels == 1:
        return flat.reshape(height, width).copy()
    return flat.reshape(height, width, 3).copy()


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels as binary PGM (H, W) or PPM (H, W, 3)."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise ShapeError(f"pixels must be uint8, got {px.dtype}")
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"pixels must be (H, W) or (H, W, 3), got {px.shape}")
    h, w = px.shape[0], px.shape[1]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + px.tobytes())


def read_image(path) -> Tensor:
    """Read a PNM file as a float32 (C, H, W) tensor scaled to [0, 1]."""
    px = read_pnm(path)
    if px.ndim == 2:
        chw = px[np.newaxis, :, :]
    else:
        chw = np.transpose(px, (2, 0, 1))
    return np.ascontiguousarray(chw.astype(np.float32) / np.float32(255.0))


def write_image(path, image: Tensor) -> None:
    """Write a [0, 1]-scaled (1|3, H, W) tensor as PGM or PPM."""
    chw = as_chw(image)
    if chw.shape[0] not in (1, 3):
        raise ShapeError(f"image must have 1 or 3 channels, got {chw.shape[0]}")
    px = np.rint(np.clip(chw, 0.0, 1.0) * 255.0).astype(np.uint8)
    if px.shape[0] == 1:
        write_pnm(path, px[0])
    else:
        write_pnm(path, np.transpose(px, (1, 2, 0)).copy())


# ---------------------------------------------------------------------------
# Color-coded ground truth masks


def decode_gt_mask(image: Tensor, palette: Sequence[Color] = DEFAULT_PALETTE) -> np.ndarray:
    """Map an RGB mask image to integer class labels via the palette.

    The image is the [0, 1]-scaled tensor from read_image. Any pixel whose
    color is not in the palette is an error naming the color and location.
    """
    img = as_chw(image)
    if img.shape[0] != 3:
        raise ShapeError(f"mask image must be RGB (3 channels), got {img.shape[0]}")
    rgb = np.rint(img * np.float32(255.0)).astype(np.int64)
    h, w = rgb.shape[1], rgb.shape[2]
    labels = np.full((h, w), -1, dtype=np.int64)
    for idx, (r, g, b) in enumerate(palette):
        hit = (rgb[0] == r) & (rgb[1] == g) & (rgb[2] == b)
        labels[hit] = idx
    if (labels < 0).any():
        row, col = map(int, np.argwhere(labels < 0)[0])
        color = (int(rgb[0, row, col]), int(rgb[1, row, col]), int(rgb[2, row, col]))
        raise FileFormatError(
            f"mask pixel at row {row}, col {col} has color {color} "
            f"which is not in the palette"
        )
    return labels


def write_mask(mask: np.ndarray, palette: Sequence[Color], path) -> None:
    """Write integer class labels as an RGB palette image (inverse of decode)."""
    m = np.asarray(mask)
    if m.ndim != 2 or not np.issubdtype(m.dtype, np.integer):
        raise ShapeError(f"mask must be a 2-D integer array, got {m.dtype} {m.shape}")
    if m.size and (m.min() < 0 or m.max() >= len(palette)):
        raise ShapeError(
            f"mask labels must lie in [0, {len(palette)}), got range "
            f"[{m.min()}, {m.max()}]"
        )
    lut = np.asarray(palette, dtype=np.uint8)
    write_pnm(path, lut[m])


def parse_palette(text: str) -> tuple[Color, ...]:
    """Parse "R,G,B:R,G,B:..." into a palette tuple, class index = position."""
    colors: list[Color] = []
    for part in text.split(":"):
        fields = part.split(",")
        if len(fields) != 3:
            raise FileFormatError(f"palette entry {part!r} is not R,G,B")
        try:
            rgb = tuple(int(f) for f in fields)
        except ValueError:
            raise FileFormatError(f"palette entry {part!r} is not R,G,B") from None
        if any(v < 0 or v > 255 for v in rgb):
            raise FileFormatError(f"palette entry {part!r} out of range 0..255")
        colors.append(rgb)  # type: ignore[arg-type]
    if len(colors) < 2:
        raise FileFormatError("palette needs at least 2 colors")
    if len(set(colors)) != len(colors):
        raise FileFormatError("palette colors must be distinct")
    return tuple(colors)


# ---------------------------------------------------------------------------
# Weight store (CWFCN1)

_MAGIC = b"CWFCN1"


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FileFormatError(
                f"{self.path}: truncated at byte offset {self.pos} while "
                f"reading {what} ({n} bytes needed, "
                f"{len(self.data) - self.pos} remain)"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return int.from_bytes(self.take(4, what), "little")


def write_weights(store: dict[str, np.ndarray], path) -> None:
    """Serialize a name -> float32 array map in CWFCN1 format."""
    parts = [_MAGIC, len(store).to_bytes(4, "little")]
    for name, arr in store.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        nb = name.encode("utf-8")
        parts.append(len(nb).to_bytes(4, "little"))
        parts.append(nb)
        parts.append(a.ndim.to_bytes(4, "little"))
        for d in a.shape:
            parts.append(int(d).to_bytes(4, "little"))
        parts.append(a.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> dict[str, np.ndarray]:
    """Read a CWFCN1 weight store; strict about magic, sizes and duplicates."""
    cur = _Cursor(Path(path).read_bytes(), path)
    magic = cur.take(len(_MAGIC), "magic")
    if magic != _MAGIC:
        raise FileFormatError(
            f"{path}: bad magic {magic!r}, expected {_MAGIC!r} "
            f"(unsupported or wrong format version)"
        )
    count = cur.u32("entry count")
    store: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = cur.u32(f"entry {i} name length")
        if name_len > 4096:
            raise FileFormatError(f"{path}: entry {i} name length {name_len} is absurd")
        try:
            name = cur.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FileFormatError(f"{path}: entry {i} name is not UTF-8") from exc
        if name in store:
            raise FileFormatError(f"{path}: duplicate entry '{name}'")
        rank = cur.u32(f"entry '{name}' rank")
        if rank > 32:
            raise FileFormatError(f"{path}: entry '{name}' rank {rank} is absurd")
        dims = tuple(cur.u32(f"entry '{name}' dim {d}") for d in range(rank))
        n_elems = math.prod(dims)
        payload = cur.take(4 * n_elems, f"entry '{name}' payload")
        store[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(
            np.float32
        )
    return store


# ---------------------------------------------------------------------------
# Deterministic synthetic weights

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64_unit(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs start..start+count-1 of the splitmix64 stream for ``seed``,
    mapped to float64 in [0, 1).

    Output i is mix(seed + (i + 1) * GAMMA) with the standard splitmix64
    finalizer; the unit float takes the top 53 bits: (z >> 11) * 2**-53.
    """
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def gen_weights(cfg: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic pseudorandom weights for every layer of the topology.

    Weights are uniform in [-s, s) with s = sqrt(6 / (fan_in + fan_out)),
    fan_in = in_channels * kh * kw and fan_out = out_channels * kh * kw.
    Biases are zero. Values are drawn from one splitmix64 stream (see
    :func:`_splitmix64_unit`), consumed in layer-list order, so the store is
    a pure function of (cfg, seed).
    """
    store: dict[str, np.ndarray] = {}
    counter = 0
    for spec in layer_specs(cfg):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        fan_out = spec.out_channels * spec.kernel * spec.kernel
        s = math.sqrt(6.0 / (fan_in + fan_out))
        n = spec.out_channels * spec.in_channels * spec.kernel * spec.kernel
        unit = _splitmix64_unit(seed, counter, n)
        counter += n
        w = ((unit * 2.0 - 1.0) * s).astype(np.float32)
        store[spec.name] = w.reshape(
            spec.out_channels, spec.in_channels, spec.kernel, spec.kernel
        )
        store[spec.name + ".bias"] = np.zeros(spec.out_channels, dtype=np.float32)
    return store


# ---------------------------------------------------------------------------
# Sequence manifests


@dataclass(frozen=True)
class SequenceManifest:
    """Ordered frame paths, optional parallel ground-truth paths, palette."""

    frames: tuple[Path, ...]
    truths: Optional[tuple[Path, ...]]
    palette: tuple[Color, ...] = DEFAULT_PALETTE

    def __post_init__(self):
        if self.truths is not None and len(self.truths) != len(self.frames):
            raise FileFormatError(
                f"manifest has {len(self.frames)} frames but "
                f"{len(self.truths)} ground-truth entries"
            )


def read_manifest(path, palette: Sequence[Color] = DEFAULT_PALETTE) -> SequenceManifest:
    """Read a plain-text manifest: one frame path per line, optional second
    whitespace-separated column for the ground-truth path.

    Blank lines and lines starting with # are skipped. Relative paths are
    resolved against the manifest's directory. Either every line has a
    ground-truth column or none does.
    """
    base = Path(path).parent
    frames: list[Path] = []
    truths: list[Path] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split()
            if len(cols) > 2:
                raise FileFormatError(
                    f"{path}:{lineno}: expected 1 or 2 columns, got {len(cols)}"
                )
            frames.append(base / cols[0])
            if len(cols) == 2:
                truths.append(base / cols[1])
    if not frames:
        raise FileFormatError(f"{path}: manifest lists no frames")
    if truths and len(truths) != len(frames):
        raise FileFormatError(
            f"{path}: {len(truths)} of {len(frames)} lines have a "
            f"ground-truth column; it must be all or none"
        )
    return SequenceManifest(
        frames=tuple(frames),
        truths=tuple(truths) if truths else None,
        palette=tuple(palette),
    )
