"""A 256 x 256 processor-element array with analog and digital register planes.

Every primitive acts on whole planes at once (SIMD).  The array is split into
a 4 x 4 grid of 64 x 64 blocks; shifts are block-isolated by default, so data
shifted across a block edge is replaced by zero, as it is at the array edge.

Analog planes hold one real value per PE and saturate at [-128, 127].  Every
charge-transferring write (upload, add, subtract) draws Gaussian noise when the
noise model is on; copies and shifts only suffer the optional decay.  Digital
planes hold one noise-free bit per PE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIDE = 256
BLOCK = 64
GRID = SIDE // BLOCK
ANALOG_NAMES = ("A", "B", "C", "D", "E", "F")
N_DIGITAL = 13
LO, HI = -128.0, 127.0
INCREMENT = 10.0

# direction -> (dy, dx) such that new[y, x] = old[y + dy, x + dx]
DIRECTIONS = {"N": (1, 0), "S": (-1, 0), "W": (0, 1), "E": (0, -1)}


@dataclass(frozen=True)
class NoiseModel:
    """Analog uncertainty.

    An upload of value v stores gain * v + N(0, sigma^2).  An increment add
    stores +-increment + N(0, sigma^2) (the increment itself is trimmed, so its
    mean is exact).  A plane add draws one N(0, sigma^2) per PE.  `decay` is a
    linear per-shift leakage factor; `refresh_every` snaps analog values back to
    the increment lattice every that many shifts (0 disables both hooks).
    """

    sigma: float = 2.90
    gain: float = 1.073
    decay: float = 0.0
    refresh_every: int = 0
    enabled: bool = True

    @classmethod
    def off(cls) -> "NoiseModel":
        return cls(sigma=0.0, gain=1.0, enabled=False)

    @classmethod
    def calibrated(cls, mean: float = 10.73, std: float = 2.90, value: float = 10.0, **kw) -> "NoiseModel":
        """Model whose repeated upload of `value` reads back with the given mean and std."""
        return cls(sigma=std, gain=mean / value, **kw)

    @property
    def active(self) -> bool:
        return self.enabled and (self.sigma > 0 or self.gain != 1.0 or self.decay > 0)


def block_view(plane: np.ndarray) -> np.ndarray:
    """(256, 256) -> (4, 64, 4, 64) view: [block row, y, block col, x]."""
    return plane.reshape(GRID, BLOCK, GRID, BLOCK)


def block_mask(blocks) -> np.ndarray:
    m = np.zeros((SIDE, SIDE), dtype=bool)
    v = block_view(m)
    for bi, bj in blocks:
        v[bi, :, bj, :] = True
    return m


ALL_BLOCKS = tuple((i, j) for i in range(GRID) for j in range(GRID))


def shift_plane(plane: np.ndarray, dy: int, dx: int, isolate: bool = True) -> np.ndarray:
    """new[y, x] = old[y + dy, x + dx]; zero where the source is outside the array
    (or, with `isolate`, outside the PE's own block)."""
    out = np.zeros_like(plane)
    if isolate:
        src, dst = block_view(plane), block_view(out)
        n = BLOCK
    else:
        src, dst = plane[None, :, None, :], out[None, :, None, :]
        n = SIDE
    ys, ye = max(0, -dy), min(n, n - dy)
    xs, xe = max(0, -dx), min(n, n - dx)
    if ys < ye and xs < xe:
        dst[:, ys:ye, :, xs:xe] = src[:, ys + dy:ye + dy, :, xs + dx:xe + dx]
    return out


class PEArray:
    """One simulated chip.  Not thread-safe; run one instance per thread."""

    def __init__(self, noise: NoiseModel | None = None, seed: int | None = 0, trace: bool = False):
        self.noise = noise if noise is not None else NoiseModel()
        self.rng = np.random.default_rng(seed)
        self.analog: dict[str, np.ndarray] = {}
        self.digital: dict[str, np.ndarray] = {}
        self.trace: list[str] | None = [] if trace else None
        self.n_shifts = 0

    # -- bookkeeping

    def log(self, msg: str) -> None:
        if self.trace is not None:
            self.trace.append(msg)

    def dump_trace(self) -> str:
        return "\n".join(self.trace or [])

    def a(self, name: str) -> np.ndarray:
        if name not in ANALOG_NAMES:
            raise ValueError(f"analog plane {name!r} does not exist (planes are {ANALOG_NAMES})")
        if name not in self.analog:
            self.analog[name] = np.zeros((SIDE, SIDE))
        return self.analog[name]

    def d(self, name: str) -> np.ndarray:
        if name not in self.digital:
            if len(self.digital) >= N_DIGITAL:
                raise RuntimeError(f"out of digital registers: {N_DIGITAL} planes already live")
            self.digital[name] = np.zeros((SIDE, SIDE), dtype=bool)
        return self.digital[name]

    def free(self, name: str) -> None:
        self.digital.pop(name, None)

    def _noise(self, shape_or_mask) -> np.ndarray | float:
        nm = self.noise
        if not nm.enabled or nm.sigma == 0:
            return 0.0
        return np.float32(nm.sigma) * self.rng.standard_normal(shape_or_mask, dtype=np.float32)

    def _clamp(self, name: str) -> None:
        np.clip(self.analog[name], LO, HI, out=self.analog[name])

    # -- analog primitives

    def clear(self, name: str, mask=None) -> None:
        p = self.a(name)
        if mask is None:
            p[...] = 0.0
        else:
            p[mask] = 0.0
        self.log(f"clear {name}")

    def upload(self, name: str, values, mask=None) -> None:
        """Write external values into an analog plane (gain and noise apply)."""
        p = self.a(name)
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), (SIDE, SIDE))
        gain = self.noise.gain if self.noise.enabled else 1.0
        if mask is None:
            p[...] = gain * values + self._noise((SIDE, SIDE))
        else:
            p[mask] = gain * values[mask] + self._noise(int(mask.sum()))
        self._clamp(name)
        self.log(f"upload {name}")

    def read(self, name: str) -> np.ndarray:
        self.log(f"readout {name}")
        return self.a(name).copy()

    def copy(self, dst: str, src: str) -> None:
        self.a(dst)[...] = self.a(src)
        self.log(f"copy-plane {src}->{dst}")

    def add_planes(self, dst: str, src: str, mask=None) -> None:
        """dst += src (one noisy write per PE), saturating."""
        p, q = self.a(dst), self.a(src)
        if mask is None:
            p += q + self._noise((SIDE, SIDE))
        else:
            p[mask] += q[mask] + self._noise(int(mask.sum()))
        self._clamp(dst)
        self.log(f"add-planes {dst}+={src}")

    def relu(self, name: str) -> None:
        np.maximum(self.a(name), 0.0, out=self.a(name))
        self.log(f"relu {name}")

    def max_planes(self, dst: str, src: str) -> None:
        np.maximum(self.a(dst), self.a(src), out=self.a(dst))
        self.log(f"max {dst}=max({dst},{src})")

    def xnor_accumulate(self, acc: str, bits: str, weight: str, valid: str, mask=None) -> None:
        """acc += +increment where bits == weight, -increment where they differ,
        only where `valid` is set; one noisy write per accumulating PE."""
        x, w, v = self.d(bits), self.d(weight), self.d(valid)
        if mask is not None:
            v = v & mask
        step = np.where(x == w, INCREMENT, -INCREMENT)
        p = self.a(acc)
        if self.noise.enabled and self.noise.sigma > 0:
            # draw noise only for the PEs that write
            p[v] += step[v] + self._noise(int(v.sum()))
        else:
            p += np.where(v, step, 0.0)  # PEs outside `v` receive exactly 0
        self._clamp(acc)
        self.log(f"xnor-accumulate {acc} +=/-= {INCREMENT:g} ({bits} xnor {weight})")

    # -- shifts

    def shift(self, name: str, direction: str, steps: int = 1, isolate: bool = True, digital: bool = False) -> None:
        """Move a plane `steps` PEs in a compass direction (N = content moves up)."""
        dy, dx = DIRECTIONS[direction]
        if digital:
            self.digital[name] = shift_plane(self.d(name), dy * steps, dx * steps, isolate)
        else:
            p = shift_plane(self.a(name), dy * steps, dx * steps, isolate)
            nm = self.noise
            if nm.enabled and nm.decay:
                p *= (1.0 - nm.decay) ** steps
            self.analog[name] = p
        self.n_shifts += steps
        nm = self.noise
        if nm.enabled and nm.refresh_every and self.n_shifts % nm.refresh_every < steps:
            self.refresh()
        self.log(f"shift {direction}x{steps} {name}{' (isolated)' if isolate else ''}")

    def shift_by(self, name: str, dy: int, dx: int, isolate: bool = True, digital: bool = False) -> None:
        """new[y, x] = old[y + dy, x + dx] as a sequence of compass shifts."""
        if dy:
            self.shift(name, "N" if dy > 0 else "S", abs(dy), isolate, digital)
        if dx:
            self.shift(name, "W" if dx > 0 else "E", abs(dx), isolate, digital)

    def refresh(self) -> None:
        for name, p in self.analog.items():
            np.round(p / INCREMENT, out=p)
            p *= INCREMENT
            self._clamp(name)
        self.log("refresh analog planes")

    # -- digital primitives

    def dcopy(self, dst: str, src: str) -> None:
        self.d(dst)[...] = self.d(src)
        self.log(f"copy-plane {src}->{dst} (digital)")

    def dset(self, name: str, bits) -> None:
        self.d(name)[...] = bits
        self.log(f"load {name} (digital)")

    def threshold(self, dst: str, src: str, level: float, strict: bool = True, mask=None) -> None:
        """dst = src > level (or >= level when not strict); outside `mask` dst is cleared."""
        p = self.a(src)
        bits = p > level if strict else p >= level
        if mask is not None:
            bits &= mask
        self.d(dst)[...] = bits
        self.log(f"threshold {dst}={src}{'>' if strict else '>='}{level:g}")

    def xnor(self, dst: str, a: str, b: str) -> None:
        """Elementwise product of +-1 planes: XNOR of their bits."""
        self.d(dst)[...] = ~(self.d(a) ^ self.d(b))
        self.log(f"elementwise-mult {dst}={a} xnor {b}")

    def duplicate_to_blocks(self, dst: str, src: str, src_block=(0, 0), blocks=ALL_BLOCKS) -> None:
        """Copy one 64 x 64 block of a digital plane into the listed blocks."""
        s = block_view(self.d(src))[src_block[0], :, src_block[1], :].copy()
        out = np.zeros((SIDE, SIDE), dtype=bool)
        v = block_view(out)
        for bi, bj in blocks:
            v[bi, :, bj, :] = s
        self.d(dst)[...] = out
        self.log(f"duplicate-to-blocks {src}{src_block}->{dst}{list(blocks)}")

    def load_weight_broadcast(self, dst: str, weights: str, ty: int, tx: int) -> None:
        """Read the weight stored at block-local (ty, tx) of an analog plane and
        broadcast its sign over the whole block, in every block."""
        w = block_view(self.a(weights))[:, ty, :, tx] >= 0  # (4, 4) signs
        self.d(dst)[...] = np.broadcast_to(w[:, None, :, None], (GRID, BLOCK, GRID, BLOCK)).reshape(SIDE, SIDE)
        self.log(f"load-weight-broadcast {dst}<-{weights}[{ty},{tx}]")
