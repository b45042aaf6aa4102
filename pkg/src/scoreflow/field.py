"""Grid and frame data model, binary frame IO and synthetic data generators.

Arrays are stored with shape ``(nx, ny)``: axis 0 runs along x, axis 1 along y.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence as _Seq

import numpy as np

MAGIC = b"SFLD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIq")


class Boundary(str, enum.Enum):
    PERIODIC = "periodic"
    REPLICATE = "replicate"


class FrameFormatError(ValueError):
    """Base class for frame file decoding failures."""

    code = "frame-error"


class BadMagicError(FrameFormatError):
    code = "bad-magic"


class InvalidHeaderError(FrameFormatError):
    code = "invalid-header"


class CorruptFrameError(FrameFormatError):
    code = "corrupt-frame"


class NonFiniteFrameError(FrameFormatError):
    code = "non-finite"


@dataclass(frozen=True)
class Grid2:
    """Uniform rectangular 2D grid."""

    nx: int
    ny: int
    dx: float = 1.0
    dy: float = 1.0
    boundary: Boundary = Boundary.PERIODIC

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise ValueError("grid sizes must be integers")
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("cell sizes must be positive")
        object.__setattr__(self, "boundary", Boundary(self.boundary))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def lengths(self) -> tuple[float, float]:
        return (self.nx * self.dx, self.ny * self.dy)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinates as two ``(nx, ny)`` arrays."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y, indexing="ij")


@dataclass(frozen=True)
class Frame:
    """Named scalar channels on a grid at integer physical time ``tau``."""

    grid: Grid2
    channels: Mapping[str, np.ndarray]
    tau: int = 0

    def __post_init__(self):
        if not self.channels:
            raise ValueError("a frame needs at least one channel")
        chans = {}
        for name, arr in self.channels.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.grid.shape:
                raise ValueError(
                    f"channel {name!r} has shape {arr.shape}, grid is {self.grid.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"channel {name!r} contains non-finite values")
            chans[name] = arr
        object.__setattr__(self, "channels", chans)

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def stack(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self.names if names is None else list(names)
        return np.stack([self.channels[n] for n in names])

    def flat(self) -> np.ndarray:
        return self.stack().ravel()

    def replace(self, tau: int | None = None, **channels: np.ndarray) -> "Frame":
        chans = dict(self.channels)
        for name, arr in channels.items():
            if name not in chans:
                raise KeyError(name)
            chans[name] = arr
        return Frame(self.grid, chans, self.tau if tau is None else tau)

    @classmethod
    def from_flat(cls, grid: Grid2, names: _Seq[str], vec: np.ndarray, tau: int = 0) -> "Frame":
        arr = np.asarray(vec, dtype=np.float64).reshape(len(names), *grid.shape)
        return cls(grid, {n: arr[i] for i, n in enumerate(names)}, tau)


@dataclass
class Sequence:
    """Time-ordered frames sharing one grid and channel list."""

    frames: list[Frame]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")
        first = self.frames[0]
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.tau <= prev.tau:
                raise ValueError("frame taus must be strictly increasing")
            if cur.grid != first.grid or cur.names != first.names:
                raise ValueError("all frames must share grid and channel list")
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def grid(self) -> Grid2:
        return self.frames[0].grid

    @property
    def names(self) -> list[str]:
        return self.frames[0].names

    @property
    def velocity_channels(self) -> tuple[str, str]:
        """Velocity channel names from metadata, defaulting to ``("u", "v")``."""
        spec = self.metadata.get("velocity_channels", "u,v")
        names = tuple(s.strip() for s in spec.split(","))
        if len(names) != 2:
            raise ValueError(f"expected two velocity channels, got {spec!r}")
        return names

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened ``(x^tau, x^{tau-1})`` training pairs for tau = 1..T."""
        flat = np.stack([f.flat() for f in self.frames])
        return flat[1:], flat[:-1]


# --- synthetic generators -------------------------------------------------


def make_gaussian_mixture_dataset(weights, means, stds, n_samples: int, seed: int) -> np.ndarray:
    """Draw ``n_samples`` i.i.d. values from a 1D Gaussian mixture."""
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    sd = np.asarray(stds, dtype=float)
    if not (w.shape == mu.shape == sd.shape) or w.ndim != 1:
        raise ValueError("weights, means and stds must be 1D and equally long")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"mixture weights must be a probability vector, sum={w.sum()}")
    if np.any(sd <= 0):
        raise ValueError("component stds must be positive")
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(w), size=n_samples, p=w)
    return mu[comp] + sd[comp] * rng.standard_normal(n_samples)


def cyclic_shift(arr: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Shift a periodic field by (sx, sy) cells.

    Integer shifts are exact rolls; fractional shifts use a Fourier phase ramp.
    """
    if float(sx).is_integer() and float(sy).is_integer():
        return np.roll(arr, (int(sx), int(sy)), axis=(0, 1))
    nx, ny = arr.shape
    kx = np.fft.fftfreq(nx)[:, None]
    ky = np.fft.rfftfreq(ny)[None, :]
    phase = np.exp(-2j * np.pi * (kx * sx + ky * sy))
    return np.fft.irfft2(np.fft.rfft2(arr) * phase, s=arr.shape)


def _blob_field(grid: Grid2, rng: np.random.Generator, n_blobs: int) -> np.ndarray:
    x, y = grid.coords()
    lx, ly = grid.lengths
    out = np.zeros(grid.shape)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, lx), rng.uniform(0, ly)
        amp = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
        width = rng.uniform(0.08, 0.15) * min(lx, ly)
        ddx = (x - cx + lx / 2) % lx - lx / 2
        ddy = (y - cy + ly / 2) % ly - ly / 2
        out += amp * np.exp(-(ddx**2 + ddy**2) / (2 * width**2))
    return out


def make_advected_blob_sequence(
    grid: Grid2,
    velocity: tuple[float, float],
    n_steps: int,
    seed: int,
    noise: float = 0.01,
    n_blobs: int = 3,
) -> Sequence:
    """Two-channel blob field advected cyclically by a constant velocity.

    Frame ``tau + 1`` is frame ``tau`` shifted by ``velocity * dt`` (dt = 1) plus
    ``noise``-amplitude Gaussian noise. Channels are named ``u`` and ``v``.
    """
    if grid.boundary is not Boundary.PERIODIC:
        raise ValueError("advected blob sequences need a periodic grid")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(seed)
    chans = {"u": _blob_field(grid, rng, n_blobs), "v": _blob_field(grid, rng, n_blobs)}
    sx, sy = velocity[0] / grid.dx, velocity[1] / grid.dy
    frames = [Frame(grid, chans, 0)]
    for tau in range(1, n_steps + 1):
        chans = {
            k: cyclic_shift(a, sx, sy) + (noise * rng.standard_normal(grid.shape) if noise else 0.0)
            for k, a in chans.items()
        }
        frames.append(Frame(grid, chans, tau))
    meta = {
        "generator": "advected_blob",
        "cx": repr(float(velocity[0])),
        "cy": repr(float(velocity[1])),
        "noise": repr(float(noise)),
        "seed": str(seed),
        "velocity_channels": "u,v",
    }
    return Sequence(frames, meta)


def wavenumber_grid(grid: Grid2, rfft: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Wavenumber components in units of 2*pi/L_max, broadcastable to FFT layout."""
    lx, ly = grid.lengths
    lmax = max(lx, ly)
    kx = np.fft.fftfreq(grid.nx) * grid.nx * (lmax / lx)
    if rfft:
        ky = np.fft.rfftfreq(grid.ny) * grid.ny * (lmax / ly)
    else:
        ky = np.fft.fftfreq(grid.ny) * grid.ny * (lmax / ly)
    return kx[:, None], ky[None, :]


def nyquist_shell(grid: Grid2) -> int:
    lx, ly = grid.lengths
    lmax = max(lx, ly)
    return int(np.floor(min(grid.nx / 2 * lmax / lx, grid.ny / 2 * lmax / ly)))


def shell_index(kx: np.ndarray, ky: np.ndarray) -> np.ndarray:
    """Integer shell k with k - 1/2 <= |kappa| < k + 1/2."""
    return np.floor(np.hypot(kx, ky) + 0.5).astype(int)


def rfft_weights(ny: int) -> np.ndarray:
    """Multiplicity of each rfft column in the full spectrum."""
    w = np.full(ny // 2 + 1, 2.0)
    w[0] = 1.0
    if ny % 2 == 0:
        w[-1] = 1.0
    return w


def make_spectral_field(
    grid: Grid2, slope: float, k_min: int, k_max: int, seed: int, rms: float = 1.0
) -> Frame:
    """Random-phase solenoidal velocity field with shell spectrum ~ kappa**slope.

    The field is built from a streamfunction differentiated with the same
    central-difference operator used for divergence checks, so the periodic
    discrete divergence vanishes to round-off. Only shells k_min..k_max carry energy.
    """
    if grid.boundary is not Boundary.PERIODIC:
        raise ValueError("spectral fields need a periodic grid")
    kny = nyquist_shell(grid)
    if not (1 <= k_min < k_max <= kny):
        raise ValueError(f"need 1 <= k_min < k_max <= {kny}, got {k_min}, {k_max}")
    rng = np.random.default_rng(seed)

    kx, ky = wavenumber_grid(grid, rfft=False)
    shells_full = shell_index(kx, ky)
    sx_full = np.sin(2 * np.pi * np.fft.fftfreq(grid.nx))[:, None] / grid.dx
    sy_full = np.sin(2 * np.pi * np.fft.fftfreq(grid.ny))[None, :] / grid.dy
    live = (shells_full >= k_min) & (shells_full <= k_max) & ((sx_full**2 + sy_full**2) > 0)
    counts = np.bincount(shells_full[live].ravel(), minlength=k_max + 1)

    kx, ky = wavenumber_grid(grid)
    shells = shell_index(kx, ky)
    sx = sx_full
    sy = np.sin(2 * np.pi * np.fft.rfftfreq(grid.ny))[None, :] / grid.dy
    mod2 = sx**2 + sy**2
    mask = (shells >= k_min) & (shells <= k_max) & (mod2 > 0)

    shells_c = np.clip(shells, 1, k_max)
    target = np.where(mask, shells_c.astype(float) ** slope / np.maximum(counts[shells_c], 1), 0.0)
    noise = np.fft.rfft2(rng.standard_normal(grid.shape))
    phases = noise / np.maximum(np.abs(noise), 1e-300)
    psi = np.where(mask, np.sqrt(target / np.where(mod2 > 0, mod2, 1.0)), 0.0) * phases

    u = np.fft.irfft2(1j * sy * psi, s=grid.shape)
    v = np.fft.irfft2(-1j * sx * psi, s=grid.shape)
    scale = rms / np.sqrt(np.mean(u**2 + v**2))
    return Frame(grid, {"u": u * scale, "v": v * scale}, 0)


# --- frame IO -------------------------------------------------------------


def encode_frame(frame: Frame) -> bytes:
    g = frame.grid
    parts = [_HEADER.pack(MAGIC, VERSION, g.nx, g.ny, len(frame.channels), int(frame.tau))]
    for name, arr in frame.channels.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_frame(buf: bytes, grid: Grid2 | None = None) -> Frame:
    """Decode frame bytes. ``grid`` supplies spacing/boundary (shape must match)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("bad magic: not a frame file")
    if len(buf) < _HEADER.size:
        raise CorruptFrameError("corrupt frame: truncated header")
    _, version, nx, ny, nch, tau = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise InvalidHeaderError(f"invalid header: unsupported version {version}")
    if nch == 0:
        raise InvalidHeaderError("invalid header: channel count is 0")
    if nx < 4 or ny < 4:
        raise InvalidHeaderError(f"invalid header: grid {nx}x{ny} below 4x4")
    if grid is None:
        grid = Grid2(nx, ny)
    elif grid.shape != (nx, ny):
        raise CorruptFrameError(f"corrupt frame: shape {(nx, ny)} does not match grid {grid.shape}")
    pos = _HEADER.size
    nbytes = nx * ny * 8
    chans = {}
    for _ in range(nch):
        if pos + 2 > len(buf):
            raise CorruptFrameError("corrupt frame: truncated channel header")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen + nbytes > len(buf):
            raise CorruptFrameError("corrupt frame: truncated channel data")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr = np.frombuffer(buf, dtype="<f8", count=nx * ny, offset=pos).reshape(nx, ny)
        pos += nbytes
        if not np.all(np.isfinite(arr)):
            raise NonFiniteFrameError(f"channel {name!r} holds non-finite values")
        if name in chans:
            raise InvalidHeaderError(f"invalid header: duplicate channel {name!r}")
        chans[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise CorruptFrameError("corrupt frame: trailing bytes")
    return Frame(grid, chans, tau)


def write_frame(frame: Frame, path) -> None:
    Path(path).write_bytes(encode_frame(frame))


def read_frame(path, grid: Grid2 | None = None) -> Frame:
    return decode_frame(Path(path).read_bytes(), grid)


def _grid_meta(grid: Grid2) -> dict[str, str]:
    return {"dx": repr(grid.dx), "dy": repr(grid.dy), "boundary": grid.boundary.value}


def write_metadata(meta: Mapping[str, str], path) -> None:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"metadata entry {k!r} cannot be written as key=value")
        lines.append(f"{k}={v}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_metadata(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed metadata line: {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def write_sequence(seq: Sequence, directory) -> None:
    """Write frames as ``frame_<tau>.sfld`` plus ``metadata.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        write_frame(f, d / f"frame_{f.tau:06d}.sfld")
    write_metadata({**seq.metadata, **_grid_meta(seq.grid)}, d / "metadata.txt")


def read_sequence(directory) -> Sequence:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"sequence directory {d} not found")
    meta_path = d / "metadata.txt"
    meta = read_metadata(meta_path) if meta_path.exists() else {}
    files = sorted(d.glob("frame_*.sfld"))
    if not files:
        raise FileNotFoundError(f"no frame files in {d}")
    probe = read_frame(files[0])
    grid = Grid2(
        probe.grid.nx,
        probe.grid.ny,
        float(meta.get("dx", 1.0)),
        float(meta.get("dy", 1.0)),
        Boundary(meta.get("boundary", "periodic")),
    )
    frames = [read_frame(p, grid) for p in files]
    for key in ("dx", "dy", "boundary"):
        meta.pop(key, None)
    return Sequence(frames, meta)


def export_channel_csv(frame: Frame, channel: str, path) -> None:
    """Write ``x,y,value`` rows for one channel."""
    x, y = frame.grid.coords()
    data = np.column_stack([x.ravel(), y.ravel(), frame[channel].ravel()])
    np.savetxt(path, data, delimiter=",", header="x,y," + channel, comments="", fmt="%.17g")


__all__ = [
    "Boundary", "Grid2", "Frame", "Sequence",
    "FrameFormatError", "BadMagicError", "InvalidHeaderError", "CorruptFrameError",
    "NonFiniteFrameError",
    "make_gaussian_mixture_dataset", "make_advected_blob_sequence", "make_spectral_field",
    "cyclic_shift", "wavenumber_grid", "nyquist_shell", "shell_index", "rfft_weights",
    "encode_frame", "decode_frame", "read_frame", "write_frame",
    "read_sequence", "write_sequence", "read_metadata", "write_metadata",
    "export_channel_csv",
]
