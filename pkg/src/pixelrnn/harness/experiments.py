"""Experiment runner: single runs, the bandwidth sweep, the noise study and the
accounting report.

Every result that feeds a determinism check (metrics records, sweep tables)
holds only seed-determined values; wall-clock goes to the manifest.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..cells import (
    CellSpec,
    feature_memory,
    make_spec,
    parameter_count,
    readout_bandwidth,
    readout_bits,
)
from ..pearray import NoiseModel, encode_clips
from ..train.fit import TrainConfig, decoder_scores, evaluate, finetune_decoder, fit
from .data import SynthSpec, load_dataset, pool_frames, split_indices, synth_dataset, to_arrays

POOL_GRID = (1, 2, 3, 4, 5, 6, 7, 8, 16, 24, 32, 40, 48, 56, 64)
FRAME_SIDE = 64


@dataclass
class RunConfig:
    """One experiment: architecture, bandwidth pooling, noise, seeds, data and output."""

    arch: str = "PIXELRNN"
    cnn_layers: int = 1
    precision: str = "binary"
    regime: str = "pm1"
    K: int = 16
    pool: int = 1
    noise_sigma: float = 0.0
    seeds: tuple = (0,)
    synth: dict = field(default_factory=dict)
    dataset: str | None = None
    output: str | None = None
    train: dict = field(default_factory=dict)
    data_seed: int = 0
    split_seed: int = 0

    def __post_init__(self):
        if self.pool not in POOL_GRID:
            raise ValueError(f"pooling size {self.pool} is not on the grid {POOL_GRID}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not self.seeds:
            raise ValueError("need at least one seed")
        self.seeds = tuple(int(s) for s in self.seeds)
        unknown = set(self.train) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training settings {sorted(unknown)}")
        unknown = set(self.synth) - set(SynthSpec.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic-task settings {sorted(unknown)}")
        self.cell_spec()  # validates arch / precision / regime / K

    @property
    def side(self) -> int:
        return FRAME_SIDE // self.pool

    def cell_spec(self) -> CellSpec:
        cnn_layers = 0 if self.arch in ("RAW", "DIFF", "EVENT") else self.cnn_layers
        return make_spec(self.arch, cnn_layers, precision=self.precision, regime=self.regime, K=self.K,
                         plane=self.side)

    def synth_spec(self) -> SynthSpec:
        d = dict(self.synth)
        if "classes" in d:
            d["classes"] = tuple(d["classes"])
        return SynthSpec(**d)

    def train_config(self, seed: int) -> TrainConfig:
        d = dict(self.train)
        if "split" in d:
            d["split"] = tuple(d["split"])
        return TrainConfig(**{**d, "seed": seed, "noise_sigma": self.noise_sigma})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run settings {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Metrics:
    """Outcome of one trained model on its test split, with its accounting."""

    arch: str
    pool: int
    seed: int
    accuracy: float
    per_class: list
    bandwidth_values: int
    bandwidth_bits: int
    parameters: int
    memory_binary_bytes: float
    memory_full32_bytes: float
    best_epoch: int
    val_accuracy: float
    wall_clock: float = 0.0

    @classmethod
    def from_run(cls, cfg: RunConfig, seed: int, accuracy: float, per_class, best_epoch: int,
                 val_accuracy: float, wall_clock: float) -> "Metrics":
        spec = cfg.cell_spec()
        mem = feature_memory(spec)
        return cls(arch=spec.arch_id, pool=cfg.pool, seed=seed, accuracy=accuracy, per_class=list(per_class),
                   bandwidth_values=readout_bandwidth(spec), bandwidth_bits=readout_bits(spec),
                   parameters=parameter_count(spec), memory_binary_bytes=mem.binary_bytes,
                   memory_full32_bytes=mem.full32_bytes, best_epoch=best_epoch, val_accuracy=val_accuracy,
                   wall_clock=wall_clock)

    def record(self) -> dict:
        """The deterministic part (everything except wall-clock)."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


def load_clips(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(frames (N, 16, H, W) uint8, labels, class names), pooled to the run's bandwidth."""
    if cfg.dataset is not None:
        side = cfg.cell_spec().sensor if cfg.arch == "RAW" else FRAME_SIDE
        clips, classes = load_dataset(cfg.dataset, side=side, seed=cfg.data_seed)
    else:
        sspec = cfg.synth_spec()
        clips, classes = synth_dataset(sspec, cfg.data_seed), list(sspec.classes)
    x, y = to_arrays(clips)
    return pool_frames(x, cfg.pool), y, classes


def splits(cfg: RunConfig, x: np.ndarray, y: np.ndarray, seed: int | None = None):
    split = tuple(cfg.train.get("split", TrainConfig.split))
    tr, va, te = split_indices(len(x), split, cfg.split_seed if seed is None else seed)
    return (x[tr], y[tr]), (x[va], y[va]), (x[te], y[te])


def run_experiment(cfg: RunConfig, seed: int | None = None, data=None, metrics_path=None, log=None):
    """Train and test one model; returns (Metrics, FitResult)."""
    seed = cfg.seeds[0] if seed is None else seed
    t0 = time.perf_counter()
    x, y, classes = data if data is not None else load_clips(cfg)
    train, val, test = splits(cfg, x, y)
    res = fit(cfg.cell_spec(), train, val, cfg.train_config(seed), len(classes), metrics_path=metrics_path,
              log=log)
    s = evaluate(res.model, *test)
    metrics = Metrics.from_run(cfg, seed, s["acc"], s["per_class"], res.best_epoch, res.best_val_acc,
                               time.perf_counter() - t0)
    return metrics, res


def _sweep_cell(args) -> tuple[int, int, dict, float]:
    cfg_dict, pool, seed = args
    cfg = RunConfig.from_dict({**cfg_dict, "pool": pool})
    m, _ = run_experiment(cfg, seed)
    return pool, seed, m.record(), m.wall_clock


def bandwidth_sweep(cfg: RunConfig, pools=POOL_GRID, seeds=None, workers: int = 1) -> tuple[list[dict], dict]:
    """Accuracy against readout bandwidth over pooling sizes, best of the seeds.

    Cells (pool, seed) are independent; with workers > 1 they run in a process
    pool.  Aggregation is keyed by (pool, seed), so arrival order is irrelevant.
    Returns (table rows, wall-clock per cell).
    """
    seeds = tuple(range(10)) if seeds is None else tuple(seeds)
    for p in pools:
        if p not in POOL_GRID:
            raise ValueError(f"pooling size {p} is not on the grid {POOL_GRID}")
    jobs = [(cfg.to_dict(), p, s) for p in pools for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_sweep_cell, jobs))
    else:
        done = [_sweep_cell(j) for j in jobs]
    cells = {(p, s): rec for p, s, rec, _ in done}
    timing = {f"{p}/{s}": t for p, s, _, t in done}
    rows = []
    for p in pools:
        accs = np.array([cells[(p, s)]["accuracy"] for s in seeds])
        best = int(np.argmax(accs))
        rows.append({
            "pool": p,
            "bandwidth": cells[(p, seeds[0])]["bandwidth_values"],
            "bandwidth_nominal": (FRAME_SIDE / p) ** 2,
            "best_accuracy": float(accs[best]),
            "best_seed": seeds[best],
            "mean_accuracy": float(accs.mean()),
            "std_accuracy": float(accs.std()),
            "accuracies": [float(a) for a in accs],
        })
    return rows, timing


def nominal_bandwidth_grid(pools=POOL_GRID) -> list[int]:
    """Emitted values per 16 frames at each pooling size: floor(64 / p) squared."""
    return [(FRAME_SIDE // p) ** 2 for p in pools]


def noise_study(cfg: RunConfig, sigma: float = 2.90, noise: NoiseModel | None = None, seed: int | None = None,
                finetune_epochs: int = 300, warm_start: bool = True, log=None) -> dict:
    """Noise-free vs noise-trained encoders evaluated through the noisy array.

    Both models are trained in torch (noise injection only differs).  Each
    model's train split then runs through the emulated array twice: run-1
    features fine-tune the decoder, run-2 features give the second train
    accuracy.  The test split runs once more.  The same replays without
    noise are reported for the determinism check.  With `warm_start` the
    noise-trained model is retrained from the noise-free weights.
    """
    seed = cfg.seeds[0] if seed is None else seed
    noise = noise if noise is not None else NoiseModel(sigma=sigma)
    x, y, classes = load_clips(cfg)
    train, val, test = splits(cfg, x, y)
    spec = cfg.cell_spec()
    report = {"sigma": sigma, "gain": noise.gain, "rows": []}
    init = None
    for name, train_sigma in (("noise-free", 0.0), ("noise-trained", sigma)):
        res = fit(spec, train, val, replace(cfg.train_config(seed), noise_sigma=train_sigma), len(classes), log=log,
                  init=init)
        if warm_start:
            init = res.model
        params = res.model.encoder.export_params()
        run1 = encode_clips(spec, params, train[0], noise, seed=seed, run=1)
        run2 = encode_clips(spec, params, train[0], noise, seed=seed, run=2)
        test_feats = encode_clips(spec, params, test[0], noise, seed=seed + 1, run=3)
        tuned = finetune_decoder(res.model, run1, train[1], epochs=finetune_epochs, seed=seed)
        clean1 = encode_clips(spec, params, train[0], NoiseModel.off(), seed=seed, run=1)
        clean2 = encode_clips(spec, params, train[0], NoiseModel.off(), seed=seed, run=2)
        report["rows"].append({
            "model": name,
            "train_noise_sigma": train_sigma,
            "warm_start": init is not None and train_sigma > 0,
            "torch_test_accuracy": evaluate(res.model, *test)["acc"],
            "train_run1_accuracy": decoder_scores(tuned, run1, train[1])["acc"],
            "train_run2_accuracy": decoder_scores(tuned, run2, train[1])["acc"],
            "test_accuracy": decoder_scores(tuned, test_feats, test[1])["acc"],
            "noisy_replays_differ": bool(not np.array_equal(run1, run2)),
            "clean_replays_identical": bool(np.array_equal(clean1, clean2)),
            "clean_train_run1_accuracy": decoder_scores(tuned, clean1, train[1])["acc"],
            "clean_train_run2_accuracy": decoder_scores(tuned, clean2, train[1])["acc"],
        })
    return report


# Published accounting rows: (label, kind, cnn layers, regime, params, bandwidth,
# feature memory binary bytes or None, full32 bytes or None)
REFERENCE_ROWS = (
    ("RAW", "RAW", 0, "pm1", 0, 1_048_576, None, 1.50),
    ("Difference Camera", "DIFF", 0, "pm1", 0, 65_536, 0.25, None),
    ("Event Camera", "EVENT", 0, "pm1", 0, 65_536, 0.25, None),
    ("1CNN+SRNN", "SRNN", 1, "pm1", 451, 4096, 2.38, 76.00),
    ("1CNN+LSTM", "LSTM", 1, "pm1", 601, 4096, 3.38, 108.00),
    ("1CNN+GRU", "GRU", 1, "pm1", 551, 4096, 2.88, 92.00),
    ("1CNN+MGU", "MGU", 1, "pm1", 501, 4096, 2.63, 84.00),
    ("1CNN+genRNN(0,1)", "GENRNN", 1, "01", 553, 4096, 3.00, 96.00),
    ("1CNN+genRNN(-1,1)", "GENRNN", 1, "pm1", 553, 4096, 3.00, 96.00),
    ("1CNN+PixelRNN", "PIXELRNN", 1, "pm1", 501, 4096, 2.75, 88.00),
    ("2CNN+SRNN", "SRNN", 2, "pm1", 852, 4096, 4.38, 140.00),
    ("2CNN+LSTM", "LSTM", 2, "pm1", 1002, 4096, 5.38, 172.00),
    ("2CNN+GRU", "GRU", 2, "pm1", 952, 4096, 4.88, 156.00),
    ("2CNN+MGU", "MGU", 2, "pm1", 902, 4096, 4.63, 148.00),
    ("2CNN+genRNN(0,1)", "GENRNN", 2, "01", 954, 4096, 5.00, 160.00),
    ("2CNN+genRNN(-1,1)", "GENRNN", 2, "pm1", 954, 4096, 5.00, 160.00),
    ("2CNN+PixelRNN", "PIXELRNN", 2, "pm1", 902, 4096, 4.75, 152.00),
)
BINARY_TOL = 0.125  # one 1-bit value per pixel
FULL32_TOL = 4.0  # one 32-bit value per pixel


def report_accounting() -> dict:
    """Parameters, bandwidth and feature memory of every published row, with the
    per-row tally and a flag wherever a figure departs from the published one."""
    rows = []
    for label, kind, layers, regime, ref_params, ref_bw, ref_bin, ref_f32 in REFERENCE_ROWS:
        spec = make_spec(kind, layers, regime=regime)
        mem = feature_memory(spec)
        flags = []
        params = parameter_count(spec)
        bw = readout_bandwidth(spec)
        if params != ref_params:
            flags.append(f"parameters {params} != published {ref_params}")
        if bw != ref_bw:
            flags.append(f"bandwidth {bw} != published {ref_bw}")
        if ref_bin is not None and abs(mem.binary_bytes - ref_bin) > BINARY_TOL:
            flags.append(f"binary memory {mem.binary_bytes} outside published {ref_bin} +- {BINARY_TOL}")
        if ref_f32 is not None and abs(mem.full32_bytes - ref_f32) > FULL32_TOL:
            flags.append(f"full32 memory {mem.full32_bytes} outside published {ref_f32} +- {FULL32_TOL}")
        elif ref_f32 is not None and mem.full32_bytes != ref_f32:
            flags.append(f"full32 memory {mem.full32_bytes} differs from published {ref_f32}, within tolerance")
        rows.append({
            "label": label,
            "arch": spec.arch_id,
            "regime": regime,
            "parameters": params,
            "bandwidth_values": bw,
            "bandwidth_bits": readout_bits(spec),
            "memory_values": mem.values,
            "memory_binary_bytes": mem.binary_bytes,
            "memory_full32_bytes": mem.full32_bytes,
            "tally": mem.tally,
            "published": {"parameters": ref_params, "bandwidth": ref_bw, "memory_binary_bytes": ref_bin,
                          "memory_full32_bytes": ref_f32},
            "flags": flags,
        })
    return {"rows": rows, "binary_tolerance": BINARY_TOL, "full32_tolerance": FULL32_TOL}
