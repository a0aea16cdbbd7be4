"""Encoder programs for the processor array: shift-add convolution, the CNN
layer pipeline, and the PixelRNN block dataflow.

Plane assignment:

    A  uploaded pixel values
    B  resident weights, +-increment at block-local rows 5s..5s+4, cols 0..4
       (slot s = CNN layer index; the slot after the CNN layers holds the gate
       kernels w_f, u_f, w_o, u_o in blocks (1,1), (1,2), (2,1), (2,2))
    C  convolution accumulators / gate pre-activations
    D  shifted copies (pooling and the block-to-block add)

Digital planes: X (convolution input), XS/VS (shifted input and validity),
V (validity), WB (broadcast weight bit), P (binarized maps), IN (encoder input
or CNN output, block (0,0)), H (hidden state, block (0,0)), F (forget gate).
"""

from __future__ import annotations

import numpy as np

from .._runtime import keep_heap
from ..bitcore import KERNEL_SIZE, RADIUS
from ..cells.spec import CellSpec, Params
from .array import ALL_BLOCKS, BLOCK, INCREMENT, SIDE, NoiseModel, PEArray, block_mask, block_view

GATE_BLOCKS = {"w_f": (1, 1), "u_f": (1, 2), "w_o": (2, 1), "u_o": (2, 2)}
F_BLOCK, O_BLOCK = (1, 1), (2, 1)


def _place(block: np.ndarray, where) -> np.ndarray:
    """A full-array plane holding `block` (64 x 64) in block `where`, zeros elsewhere."""
    out = np.zeros((SIDE, SIDE), dtype=block.dtype)
    block_view(out)[where[0], :, where[1], :] = block
    return out


def _take(plane: np.ndarray, where) -> np.ndarray:
    return block_view(plane)[where[0], :, where[1], :].copy()


def store_weights(array: PEArray, slot: int, kernels_by_block: dict) -> None:
    """Upload +-1 kernels as +-increment into plane B at the slot's block-local rows."""
    values = array.a("B").copy()
    mask = np.zeros((SIDE, SIDE), dtype=bool)
    vv, mv = block_view(values), block_view(mask)
    r0 = slot * KERNEL_SIZE
    for (bi, bj), k in kernels_by_block.items():
        k = np.asarray(k)
        if not np.all((k == 1) | (k == -1)):
            raise ValueError("the array stores binary kernels only")
        vv[bi, r0:r0 + KERNEL_SIZE, bj, :KERNEL_SIZE] = INCREMENT * k
        mv[bi, r0:r0 + KERNEL_SIZE, bj, :KERNEL_SIZE] = True
    array.upload("B", values, mask)


def shift_add_conv(array: PEArray, slot: int, blocks=ALL_BLOCKS, src: str = "X", acc: str = "C") -> None:
    """25-tap convolution of digital plane `src` with the slot's kernels, per block.

    For each tap the preserved input and its validity plane are copied and
    shifted into position (shifting out and back would lose the edge columns);
    the tap's weight is loaded and broadcast, and the increment is added where
    input and weight agree, subtracted where they differ.
    """
    mask = block_mask(blocks)
    array.clear(acc, mask)
    array.dset("V", mask)
    r0 = slot * KERNEL_SIZE
    for row in range(KERNEL_SIZE):
        for col in range(KERNEL_SIZE):
            array.dcopy("XS", src)
            array.dcopy("VS", "V")
            for name in ("XS", "VS"):
                array.shift_by(name, row - RADIUS, col - RADIUS, digital=True)
            array.load_weight_broadcast("WB", "B", r0 + row, col)
            array.xnor_accumulate(acc, "XS", "WB", "VS", mask)
    array.free("XS")
    array.free("VS")


def conv_taps_in_order() -> list[tuple[int, int]]:
    """Tap offsets in the order shift_add_conv visits them (raster order)."""
    return [(row - RADIUS, col - RADIUS) for row in range(KERNEL_SIZE) for col in range(KERNEL_SIZE)]


def _pool_max(array: PEArray, acc: str, k: int) -> None:
    """After this, the top-left PE of every k x k cell holds the cell maximum."""
    step = 1
    while step < k:
        for direction in ("W", "N"):
            array.copy("D", acc)
            array.shift("D", direction, step)
            array.max_planes(acc, "D")
        step *= 2


def downsample_concat(array: PEArray, dst: str, src: str, pool: int, grid=(4, 4)) -> None:
    """Gather every block's pooled cells into block (0,0), channel s at grid cell s."""
    bits = block_view(array.d(src))
    cells = BLOCK // pool
    out = np.zeros((BLOCK, BLOCK), dtype=bool)
    for s, (bi, bj) in enumerate(ALL_BLOCKS[: grid[0] * grid[1]]):
        gr, gc = divmod(s, grid[1])
        out[gr * cells:(gr + 1) * cells, gc * cells:(gc + 1) * cells] = bits[bi, ::pool, bj, ::pool]
    array.dset(dst, _place(out, (0, 0)))


def binarize_frame_on_array(array: PEArray, frame, threshold: float = 127.5) -> None:
    """Upload an 8-bit 64 x 64 frame into A (centered at 128) and binarize it into IN."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (BLOCK, BLOCK):
        raise ValueError(f"the array encodes {BLOCK}x{BLOCK} frames, got {frame.shape}")
    where = block_mask([(0, 0)])
    array.upload("A", _place(frame - 128.0, (0, 0)), where)
    gain = array.noise.gain if array.noise.enabled else 1.0
    array.threshold("IN", "A", gain * (threshold - 128.0), mask=where)


def cnn_on_array(array: PEArray, params: Params, src: str = "IN", dst: str = "IN") -> None:
    """Every binary CNN layer on a 64 x 64 digital input held in block (0,0).

    Duplicate to the 16 blocks, 16 parallel shift-add convolutions, ReLU,
    max-pool, binarize against 10 tau, downsample and concatenate back into
    block (0,0).  Assumes each layer's kernels are resident in its B slot.
    """
    for i, layer in enumerate(params.cnn.layers):
        if layer.pool and BLOCK % layer.pool:
            raise ValueError("the array pipeline needs the pool size to divide 64")
        blocks = ALL_BLOCKS[: len(layer.kernels)]
        array.duplicate_to_blocks("X", src, (0, 0), blocks)
        shift_add_conv(array, i, blocks)
        array.relu("C")
        _pool_max(array, "C", layer.pool)
        array.threshold("P", "C", layer.threshold * INCREMENT)
        downsample_concat(array, dst, "P", layer.pool, layer.grid)
        src = dst


def load_encoder(array: PEArray, spec: CellSpec, params: Params) -> None:
    """Make the encoder's kernels resident in plane B."""
    if not spec.binary or spec.regime != "pm1":
        raise ValueError("the array runs binary (-1, +1) encoders only")
    if spec.plane != BLOCK:
        raise ValueError(f"the array runs {BLOCK}x{BLOCK} planes, spec has {spec.plane}")
    n_layers = len(params.cnn.layers) if params.cnn is not None else 0
    for i in range(n_layers):
        store_weights(array, i, {blk: k for blk, k in zip(ALL_BLOCKS, params.cnn.layers[i].kernels)})
    if spec.kind == "PIXELRNN":
        store_weights(array, n_layers, {GATE_BLOCKS[g]: params.gates[g] for g in GATE_BLOCKS})


def rnn_on_array(array: PEArray, slot: int, emit: bool, reset: bool, src: str = "IN"):
    """One PixelRNN step on the CNN output in block (0,0) of `src`.

    Returns the analog o block divided by the increment when `emit`, else None.
    """
    if reset:
        array.dset("H", block_mask([(0, 0)]))
        array.log("reset H to ones")
    c_blk = _take(array.d(src), (0, 0))
    h_blk = _take(array.d("H"), (0, 0))
    x = np.zeros((SIDE, SIDE), dtype=bool)
    for g, where in GATE_BLOCKS.items():
        block_view(x)[where[0], :, where[1], :] = c_blk if g.startswith("w_") else h_blk
    array.dset("X", x)
    array.log("transfer IN(0,0)->X(1,1),(2,1); H(0,0)->X(1,2),(2,2)")
    shift_add_conv(array, slot, tuple(GATE_BLOCKS.values()))
    # bring the u_* sums next to the w_* sums and add: f_pre in (1,1), o_pre in (2,1)
    array.copy("D", "C")
    array.shift("D", "W", BLOCK, isolate=False)
    array.add_planes("C", "D", block_mask([F_BLOCK, O_BLOCK]))
    array.threshold("F", "C", 0.0, strict=False, mask=block_mask([F_BLOCK]))
    f_blk = _take(array.d("F"), F_BLOCK)
    array.dset("F", _place(f_blk, (0, 0)))
    array.log("transfer F(1,1)->F(0,0)")
    array.xnor("H", "F", "H")
    array.dset("H", array.d("H") & block_mask([(0, 0)]))
    if emit:
        return _take(array.read("C"), O_BLOCK) / INCREMENT
    return None


def run_clip(array: PEArray, spec: CellSpec, params: Params, frames) -> list[np.ndarray]:
    """Encode one clip of raw 8-bit 64 x 64 frames; returns the emissions.

    PixelRNN emits o every K frames; the CNN-only encoder emits its binary
    output (+-1) every frame.
    """
    if spec.kind not in ("PIXELRNN", "CNN"):
        raise ValueError(f"the array program covers PIXELRNN and CNN, not {spec.kind}")
    load_encoder(array, spec, params)
    n_layers = len(params.cnn.layers) if params.cnn is not None else 0
    out = []
    for t, frame in enumerate(frames):
        array.log(f"-- frame {t}")
        binarize_frame_on_array(array, frame, spec.frame_threshold)
        if n_layers:
            cnn_on_array(array, params)
        if spec.kind == "CNN":
            out.append(np.where(_take(array.d("IN"), (0, 0)), 1.0, -1.0))
            continue
        o = rnn_on_array(array, n_layers, emit=(t + 1) % spec.K == 0, reset=t % spec.K == 0)
        if o is not None:
            out.append(o)
    return out


def clip_seed(base: int, index: int, run: int = 0) -> int:
    """Independent, reproducible noise stream per (base seed, clip, run)."""
    return int(np.random.SeedSequence([base, index, run]).generate_state(1)[0])


def encode_clips(spec: CellSpec, params: Params, clips, noise: NoiseModel | None = None,
                 seed: int = 0, run: int = 0) -> np.ndarray:
    """Run every clip through a fresh array; returns features (N, E, 64, 64)."""
    noise = noise if noise is not None else NoiseModel.off()
    keep_heap()
    feats = []
    for i, frames in enumerate(clips):
        array = PEArray(noise, seed=clip_seed(seed, i, run))
        feats.append(np.stack(run_clip(array, spec, params, frames)))
    return np.stack(feats)


def characterize_noise(array: PEArray, value: float = 10.0, repetitions: int = 1000,
                       bins: int = 60, plane: str = "F") -> dict:
    """Upload `value` into a whole plane `repetitions` times and read it back.

    Statistics pool every PE of every repetition.  Returns the density
    histogram (area 1), its bin edges, and the sample mean and std.
    """
    total = total_sq = 0.0
    n = 0
    half = max(4 * array.noise.sigma, 1.0)
    edges = np.linspace(value * (array.noise.gain if array.noise.enabled else 1.0) - half,
                        value * (array.noise.gain if array.noise.enabled else 1.0) + half, bins + 1)
    counts = np.zeros(bins)
    samples = []
    for _ in range(repetitions):
        array.upload(plane, value)
        v = array.read(plane).ravel()
        total += v.sum()
        total_sq += np.square(v).sum()
        n += v.size
        counts += np.histogram(v, edges)[0]
        samples.append(v[0])
    mean = total / n
    std = float(np.sqrt(max(total_sq / n - mean * mean, 0.0)))
    width = np.diff(edges)
    density = counts / (counts.sum() * width) if counts.sum() else counts
    return {"mean": float(mean), "std": std, "hist": density, "edges": edges, "n": n,
            "single_pe": np.array(samples)}

