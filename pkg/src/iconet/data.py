"""Image sources and transforms: FFT, k-space degradation, phantoms, bicubic, PGM files."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# radix-2 FFT
# ---------------------------------------------------------------------------

def is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"FFT length {n} is not a power of two; pad with pad_to_pow2 first")
    lead = x.shape[:-1]
    y = np.asarray(x, dtype=np.complex128)[..., _bit_reverse(n)]
    sign = 1.0 if inverse else -1.0
    m = 1
    while m < n:
        # twiddles computed directly rather than by repeated multiplication
        w = np.exp(sign * 1j * np.pi * np.arange(m) / m)
        y = y.reshape(*lead, n // (2 * m), 2, m)
        even, odd = y[..., 0, :], y[..., 1, :] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    y = y.reshape(*lead, n)
    return y / n if inverse else y


def fft2(img: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the last two axes (row-column radix-2)."""
    img = np.asarray(img)
    if img.ndim < 2:
        raise ValueError("fft2 needs at least two axes")
    rows = _fft_last(img, inverse=False)
    return _fft_last(rows.swapaxes(-1, -2), inverse=False).swapaxes(-1, -2)


def ifft2(spec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2` (carries the 1/(H*W) factor). Returns complex values."""
    spec = np.asarray(spec)
    rows = _fft_last(spec, inverse=True)
    return _fft_last(rows.swapaxes(-1, -2), inverse=True).swapaxes(-1, -2)


def pad_to_pow2(img: np.ndarray) -> np.ndarray:
    """Zero-pad the last two axes at the bottom/right up to powers of two."""
    img = np.asarray(img)
    H, W = img.shape[-2:]
    Hp, Wp = 1 << (H - 1).bit_length(), 1 << (W - 1).bit_length()
    pad = [(0, 0)] * (img.ndim - 2) + [(0, Hp - H), (0, Wp - W)]
    return np.pad(img, pad)


# ---------------------------------------------------------------------------
# k-space degradation
# ---------------------------------------------------------------------------

def degrade_kspace(hr: np.ndarray, scale: int, clamp: bool = True) -> np.ndarray:
    """Low-resolution image from the central (H/s, W/s) block of k-space.

    The spectrum is shifted so DC sits at index (H//2, W//2); the kept block
    starts at H//2 - h//2, which puts DC at (h//2, w//2) of the crop, the
    same place fftshift would put it for an h-by-w image. After the inverse
    transform at the small size, dividing by s^2 keeps the mean intensity.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 2:
        raise ValueError(f"degrade_kspace expects a 2D image, got shape {hr.shape}")
    if scale < 1:
        raise ValueError(f"scale must be a positive integer, got {scale}")
    H, W = hr.shape
    if H % scale or W % scale:
        raise ValueError(f"image {H}x{W} is not divisible by scale {scale}")
    if scale == 1:
        out = hr.copy()
    else:
        h, w = H // scale, W // scale
        spec = np.fft.fftshift(fft2(hr))
        r0, c0 = H // 2 - h // 2, W // 2 - w // 2
        crop = spec[r0:r0 + h, c0:c0 + w]
        out = ifft2(np.fft.ifftshift(crop)).real / (scale * scale)
    return np.clip(out, 0.0, 1.0) if clamp else out


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

def make_phantom(seed: int, size: int = 64) -> np.ndarray:
    """Deterministic anatomy-like test image with smooth regions and sharp edges.

    A body ellipse over a dark background holds a few inner ellipses of
    varied intensity, a gentle intensity ramp, and thin bright lines. The
    scene is rendered at twice the resolution and box-averaged.
    """
    if not is_pow2(size) or size < 32:
        raise ValueError(f"phantom size must be a power of two >= 32, got {size}")
    rng = np.random.default_rng(seed)
    n = 2 * size
    yy, xx = np.mgrid[0:n, 0:n]
    y = (yy + 0.5) / n * 2 - 1
    x = (xx + 0.5) / n * 2 - 1

    def ellipse(cx, cy, ax, ay, theta):
        c, s = np.cos(theta), np.sin(theta)
        u = (x - cx) * c + (y - cy) * s
        v = -(x - cx) * s + (y - cy) * c
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0

    img = np.zeros((n, n))
    body = ellipse(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                   rng.uniform(0.75, 0.9), rng.uniform(0.8, 0.95), rng.uniform(-0.3, 0.3))
    ramp_dir = rng.uniform(0, 2 * np.pi)
    ramp = 0.1 * (np.cos(ramp_dir) * x + np.sin(ramp_dir) * y)
    img[body] = 0.45 + ramp[body]

    for _ in range(rng.integers(4, 8)):
        mask = ellipse(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.06, 0.3),
                       rng.uniform(0.06, 0.3), rng.uniform(0, np.pi)) & body
        img[mask] = rng.uniform(0.1, 0.95)

    for _ in range(rng.integers(2, 5)):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.5, 0.5)
        dist = np.abs(np.cos(angle) * x + np.sin(angle) * y - offset)
        img[(dist < 1.5 / n) & body] = rng.uniform(0.8, 1.0)

    img = img.reshape(size, 2, size, 2).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    factor = n_out / n_in
    support = 2.0 if factor >= 1 else 2.0 / factor  # widen the kernel when shrinking
    kscale = 1.0 if factor >= 1 else factor
    centers = (np.arange(n_out) + 0.5) / factor - 0.5
    taps = np.arange(-int(np.ceil(support)), int(np.ceil(support)) + 1)
    src = np.floor(centers)[:, None].astype(np.intp) + taps[None, :]
    weights = _cubic((src - centers[:, None]) * kscale)
    weights /= weights.sum(axis=1, keepdims=True)
    M = np.zeros((n_out, n_in))
    np.add.at(M, (np.repeat(np.arange(n_out), taps.size), _reflect(src, n_in).ravel()), weights.ravel())
    return M


def bicubic_resize(img: np.ndarray, factor: float) -> np.ndarray:
    """Separable Catmull-Rom resize (a = -0.5) with symmetric border reflection."""
    img = np.asarray(img, dtype=np.float64)
    if factor not in (0.5, 2, 4):
        raise ValueError(f"bicubic factor must be one of 0.5, 2, 4; got {factor}")
    H, W = img.shape[-2:]
    Ho, Wo = int(round(H * factor)), int(round(W * factor))
    if Ho < 1 or Wo < 1:
        raise ValueError(f"image {H}x{W} is too small to resize by {factor}")
    return _resize_matrix(H, Ho) @ img @ _resize_matrix(W, Wo).T


# ---------------------------------------------------------------------------
# portable graymap (P5) files
# ---------------------------------------------------------------------------

class ImageFormatError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("PGM header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    if not buf.startswith(b"P5"):
        raise ImageFormatError("not a binary PGM file: magic number P5 missing")
    tokens, offset = _header_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric PGM header field: {exc}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid PGM dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise ImageFormatError(f"PGM maxval {maxval} outside 1..65535")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated PGM payload: expected {need} bytes, found {len(payload)}")
    samples = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return samples.astype(np.float64) / maxval


def encode_pgm(img: np.ndarray, bits: int = 8) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2D, got shape {img.shape}")
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    if not np.all(np.isfinite(img)):
        raise ValueError("cannot save non-finite pixel values")
    maxval = 255 if bits == 8 else 65535
    # values are non-negative after clipping, so floor(v + 0.5) rounds half away from zero
    q = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5)
    data = q.astype(">u2" if bits == 16 else "u1").tobytes()
    h, w = img.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + data


def load_image(path: PathLike) -> np.ndarray:
    """Read a P5 graymap and map samples to [0, 1]."""
    path = Path(path)
    try:
        return decode_pgm(path.read_bytes())
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def save_image(path: PathLike, img: np.ndarray, bits: int = 8) -> None:
    Path(path).write_bytes(encode_pgm(img, bits))


def read_manifest(path: PathLike) -> list:
    """HR image paths, one per line; relative entries resolve against the manifest's folder."""
    path = Path(path)
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        entries.append(p if p.is_absolute() else path.parent / p)
    if not entries:
        raise ValueError(f"manifest {path} lists no images")
    return entries


def write_manifest(path: PathLike, images) -> None:
    Path(path).write_text("".join(f"{p}\n" for p in images))
