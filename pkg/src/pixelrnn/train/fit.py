"""Training loop, checkpoints and decoder fine-tuning."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .. import container
from .._runtime import keep_heap
from ..cells.spec import CellSpec
from .model import Classifier, Encoder, clip_logits, loss_fn
from .quant import surrogate_grad_sigmoid, surrogate_grad_sign


@dataclass
class TrainConfig:
    """Optimization settings.  Adam betas/eps are torch's defaults (0.9, 0.999, 1e-8)."""

    epochs: int = 300
    lr: float = 1e-2
    lr_max: float = 1e-1
    lr_min: float = 1e-4
    patience: int = 10
    lr_factor: float = 0.5
    batch_size: int = 16
    noise_sigma: float = 0.0
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    m: float = 2.0
    mode: str = "binary"
    decoder_bias: bool = False
    decoder_decay: float = 0.0
    init_scale: float = 0.5
    tau_init: float = 0.5
    augment_shift: int = 0
    augment_time: int = 0
    augment_roll: bool = False
    encoder_lr_scale: float = 1.0
    target_acc: float | None = None
    threads: int = 1

    def __post_init__(self):
        if not self.lr_min <= self.lr_max:
            raise ValueError("learning-rate bounds must satisfy lr_min <= lr_max")
        if not self.lr_min <= self.lr <= self.lr_max:
            raise ValueError(f"lr {self.lr} outside [{self.lr_min}, {self.lr_max}]")
        if self.encoder_lr_scale <= 0:
            raise ValueError("encoder_lr_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.m <= 0:
            raise ValueError("surrogate steepness m must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9 or len(self.split) != 3:
            raise ValueError("split must be three fractions summing to 1")
        self.split = tuple(self.split)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite.  `last_good` holds the best checkpoint so far."""

    def __init__(self, message: str, last_good: bytes | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class ShadowParam:
    """Continuous latent weight and the quantizer that deploys it."""

    name: str
    shadow: np.ndarray
    m: float
    regime: str = "pm1"  # "pm1", "01", or "real" for unquantized parameters

    @property
    def value(self) -> np.ndarray:
        if self.regime == "pm1":
            return np.where(self.shadow >= 0, 1, -1).astype(np.int8)
        if self.regime == "01":
            return (self.shadow > 0).astype(np.int8)
        return self.shadow

    def surrogate_grad(self) -> np.ndarray:
        if self.regime == "pm1":
            return surrogate_grad_sign(self.shadow, self.m)
        if self.regime == "01":
            return surrogate_grad_sigmoid(self.shadow, self.m)
        return np.ones_like(self.shadow)


def shadow_params(encoder: Encoder) -> list[ShadowParam]:
    spec = encoder.spec
    out = []
    for name, p in encoder.named_parameters():
        regime = "real"
        if spec.binary and name.startswith("cnn_w."):
            regime = "pm1"
        elif spec.binary and name.startswith("gates."):
            regime = spec.regime
        out.append(ShadowParam(name, p.detach().numpy().copy(), encoder.m, regime))
    return out


# -- checkpoints

def checkpoint_bytes(model: Classifier, meta: dict | None = None) -> bytes:
    enc = model.encoder
    spec = enc.spec
    params = shadow_params(enc)
    header = {
        "format": "checkpoint",
        "arch": spec.arch_id,
        "spec": spec.to_dict(),
        "precision": spec.precision,
        "regime": spec.regime,
        "K": spec.K,
        "layer_shapes": {p.name: list(p.shadow.shape) for p in params},
        "mode": enc.mode if enc.mode != "full" else "binary",
        "m": enc.m,
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "n_emissions": model.n_emissions,
        "decoder_bias": model.decoder.bias is not None,
        "meta": meta or {},
    }
    records = []
    for p in params:
        if p.regime == "real":
            records.append(container.Record("encoder." + p.name, p.shadow))
        else:
            records.append(container.Record("encoder." + p.name, p.value, p.shadow))
    for name, t in model.decoder.named_parameters():
        records.append(container.Record("decoder." + name, t.detach().numpy().copy()))
    return container.to_bytes(header, records)


def save_checkpoint(path, model: Classifier, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def load_checkpoint(source) -> tuple[Classifier, dict]:
    """Rebuild a Classifier from checkpoint bytes or a path; returns (model, header)."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    header, recs = container.from_bytes(bytes(blob))
    if header.get("format") != "checkpoint":
        raise container.ContainerError("not a checkpoint")
    spec = CellSpec.from_dict(header["spec"])
    enc = Encoder(spec, mode=header["mode"], m=header["m"])
    frames = header["n_emissions"] * spec.K if spec.is_rnn else spec.K
    side = int(math.isqrt(header["n_features"] // header["n_emissions"]))
    model = Classifier(enc, header["n_classes"], frames=frames, side=side, bias=header["decoder_bias"])
    state = {}
    for name, rec in recs.items():
        arr = rec.shadow if rec.binary else rec.value
        state[name.split(".", 1)[1] if name.startswith("encoder.") else name] = torch.from_numpy(arr.copy())
    enc_state = {k: v for k, v in state.items() if not k.startswith("decoder.")}
    dec_state = {k.split(".", 1)[1]: v for k, v in state.items() if k.startswith("decoder.")}
    enc.load_state_dict(enc_state)
    model.decoder.load_state_dict(dec_state)
    # the stored bits must be the quantization of the stored shadows
    for p in shadow_params(enc):
        rec = recs["encoder." + p.name]
        if rec.binary:
            bits = rec.value if p.regime == "pm1" else (rec.value + 1) // 2
            if not np.array_equal(bits, p.value):
                raise container.ContainerError(f"{p.name}: stored bits disagree with the shadow values")
    return model, header


# -- evaluation

def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def predict_logits(model: Classifier, frames: np.ndarray, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for sl in _batches(len(frames), batch_size):
            out.append(model(torch.as_tensor(frames[sl])))
    return torch.cat(out)


def scores(logits: torch.Tensor, labels, n_classes: int) -> dict:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    loss = float(loss_fn(logits, labels))
    pred = clip_logits(logits).argmax(1)
    correct = (pred == labels).numpy()
    per_class = []
    for k in range(n_classes):
        sel = labels.numpy() == k
        per_class.append(float(correct[sel].mean()) if sel.any() else None)
    return {"loss": loss, "acc": float(correct.mean()), "per_class": per_class, "pred": pred.numpy()}


def evaluate(model: Classifier, frames: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> dict:
    return scores(predict_logits(model, frames, batch_size), labels, model.n_classes)


def unrolled_backward(model: Classifier, frames, labels) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss of one batch and the gradient of every shadow and decoder weight.

    Gradients flow back through all unrolled steps of the recurrence, with the
    surrogate derivative at every quantization site.
    """
    model.zero_grad(set_to_none=True)
    frames = torch.as_tensor(np.asarray(frames))
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    loss = loss_fn(model(frames), labels)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {float(loss)}")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in {name}")
        grads[name] = g.detach().clone()
    return float(loss.detach()), grads


# -- training

def _augment(frames: np.ndarray, rng: np.random.Generator, shift: int, time: int,
             roll: bool = False) -> np.ndarray:
    """Random spatial offset (zero fill), temporal offset (last frame repeated), and
    circular translation by a uniform offset (for wraparound scenes)."""
    if roll:
        n, _, h, w = frames.shape
        frames = frames.copy()
        for i, (dy, dx) in enumerate(zip(rng.integers(0, h, n), rng.integers(0, w, n))):
            frames[i] = np.roll(frames[i], (int(dy), int(dx)), axis=(1, 2))
    if not shift and not time:
        return frames
    out = np.zeros_like(frames)
    n, t_len, h, w = frames.shape
    for i in range(n):
        clip = frames[i]
        if time:
            k = int(rng.integers(0, time + 1))
            clip = np.concatenate([clip[k:], np.repeat(clip[-1:], k, axis=0)])
        if shift:
            dy, dx = rng.integers(-shift, shift + 1, size=2)
            ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
            xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
            shifted = np.zeros_like(clip)
            shifted[:, yd, xd] = clip[:, ys, xs]
            clip = shifted
        out[i] = clip
    return out


@dataclass
class FitResult:
    model: Classifier
    checkpoint: bytes
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0


def build_model(spec: CellSpec, config: TrainConfig, n_classes: int, frames: int, side: int) -> Classifier:
    enc = Encoder(spec, mode=config.mode, m=config.m, noise_sigma=config.noise_sigma, seed=config.seed,
                  init_scale=config.init_scale, tau_init=config.tau_init)
    return Classifier(enc, n_classes, frames=frames, side=side, bias=config.decoder_bias)


def fit(spec: CellSpec, train, val, config: TrainConfig, n_classes: int, metrics_path=None,
        log=None, init: Classifier | None = None) -> FitResult:
    """Train on `train` = (frames, labels), select the epoch with the best validation accuracy.

    frames are raw 8-bit clips (N, T, H, W).  One JSON record per epoch goes to
    `metrics_path` if given.  `init` starts from another model's weights
    instead of a fresh initialization.
    """
    x_tr, y_tr = (np.asarray(a) for a in train)
    x_va, y_va = (np.asarray(a) for a in val)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation splits must be non-empty")
    keep_heap()
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_model(spec, config, n_classes, frames=x_tr.shape[1], side=x_tr.shape[-1])
    if init is not None:
        model.load_state_dict(init.state_dict())
        model.encoder.noise_sigma = config.noise_sigma
    groups = [{"params": list(model.decoder.parameters()), "weight_decay": config.decoder_decay}]
    if spec.kind not in ("RAW", "DIFF", "EVENT"):
        groups.append({"params": list(model.encoder.parameters()), "lr": config.lr * config.encoder_lr_scale})
    opt = torch.optim.Adam(groups, lr=config.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.lr_factor, patience=config.patience, min_lr=config.lr_min)

    sink = open(metrics_path, "w") if metrics_path is not None else None
    best = None
    best_key = None
    history = []
    try:
        for epoch in range(config.epochs):
            model.train()
            order = rng.permutation(len(x_tr))
            total, hits, seen = 0.0, 0, 0
            for sl in _batches(len(order), config.batch_size):
                idx = order[sl]
                xb = _augment(x_tr[idx], rng, config.augment_shift, config.augment_time, config.augment_roll)
                yb = torch.as_tensor(y_tr[idx], dtype=torch.long)
                opt.zero_grad(set_to_none=True)
                logits = model(torch.as_tensor(xb))
                loss = loss_fn(logits, yb)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                hits += int((clip_logits(logits).argmax(1) == yb).sum())
                seen += len(idx)
            v = evaluate(model, x_va, y_va, config.batch_size)
            record = {
                "epoch": epoch,
                "lr": opt.param_groups[0]["lr"],
                "train_loss": total / seen,
                "train_acc": hits / seen,
                "val_loss": v["loss"],
                "val_acc": v["acc"],
                "seed": config.seed,
            }
            history.append(record)
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
            if log is not None:
                log(record)
            key = (v["acc"], -v["loss"])
            if best_key is None or key > best_key:
                best_key = key
                best = checkpoint_bytes(model, {"epoch": epoch, "config": config.to_dict()})
            sched.step(v["loss"])
            if config.target_acc is not None and v["acc"] >= config.target_acc and record["train_acc"] >= config.target_acc:
                break
    finally:
        if sink is not None:
            sink.close()

    best_model, header = load_checkpoint(best)
    best_model.encoder.noise_sigma = config.noise_sigma
    return FitResult(best_model, best, history, header["meta"]["epoch"], best_key[0])


def sweep_learning_rate(spec: CellSpec, train, val, config: TrainConfig, n_classes: int,
                        candidates=(1e-1, 1e-2, 1e-3, 1e-4)) -> tuple[float, FitResult]:
    """Train once per initial learning rate inside the configured bounds; keep the best by validation."""
    best = None
    for lr in candidates:
        if not config.lr_min <= lr <= config.lr_max:
            continue
        res = fit(spec, train, val, replace(config, lr=lr), n_classes)
        if best is None or res.best_val_acc > best[1].best_val_acc:
            best = (lr, res)
    if best is None:
        raise ValueError("no candidate learning rate inside the configured bounds")
    return best


def finetune_decoder(model: Classifier, features, labels, epochs: int = 300, lr: float = 1e-2,
                     seed: int = 0) -> Classifier:
    """Retrain only the decoder on externally produced emissions (N, E, h, w).

    Starts from the model's current decoder; the encoder is shared, untouched.
    """
    features = torch.as_tensor(np.asarray(features), dtype=model.decoder.weight.dtype)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    per_clip = int(np.prod(features.shape[1:]))
    expected = model.n_features if not model.encoder.spec.streams_every_frame else None
    if expected is not None and per_clip != expected:
        raise ValueError(f"features hold {per_clip} values per clip, decoder expects {expected}")
    if expected is None and int(np.prod(features.shape[2:])) != model.n_features:
        raise ValueError(f"features hold {int(np.prod(features.shape[2:]))} values per frame, "
                         f"decoder expects {model.n_features}")
    if len(features) != len(labels):
        raise ValueError("features and labels differ in length")
    torch.manual_seed(seed)
    tuned = model.with_decoder(copy.deepcopy(model.decoder))
    dec = tuned.decoder
    opt = torch.optim.Adam(dec.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(tuned.decode(features), labels)
        if not torch.isfinite(loss):
            raise TrainingDiverged("non-finite loss while fine-tuning the decoder")
        loss.backward()
        opt.step()
    return tuned


def decoder_scores(model: Classifier, features, labels) -> dict:
    with torch.no_grad():
        logits = model.decode(torch.as_tensor(np.asarray(features)))
    return scores(logits, labels, model.n_classes)


def cross_entropy_at_init(n_classes: int) -> float:
    """Loss of a zero decoder: the uniform distribution over M classes."""
    return float(F.cross_entropy(torch.zeros(1, n_classes), torch.zeros(1, dtype=torch.long)))
