import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pixelrnn.harness.cli import main
from pixelrnn.harness.data import (
    SynthSpec,
    load_dataset,
    pad_indices,
    pool_frames,
    render_sweep,
    sample_indices,
    split_indices,
    sweep_positions,
    synth_dataset,
    to_arrays,
)
from pixelrnn.harness.experiments import (
    POOL_GRID,
    RunConfig,
    nominal_bandwidth_grid,
    report_accounting,
    run_experiment,
)

# -- frame selection

def test_sample_indices_examples():
    assert sample_indices(16) == list(range(16))
    assert sample_indices(31) == list(range(0, 31, 2))
    assert sample_indices(1) == [0] * 16
    idx = sample_indices(100)
    assert idx[0] == 0 and idx[-1] == 99 and idx == sorted(idx)
    with pytest.raises(ValueError):
        sample_indices(0)


@given(st.integers(1, 15), st.integers(0, 2**31 - 1))
def test_pad_indices(n_available, seed):
    idx = pad_indices(n_available, 16, np.random.default_rng(seed))
    assert len(idx) == 16
    assert idx == sorted(idx)
    assert set(idx) == set(range(n_available))


def test_pool_frames():
    x = np.arange(2 * 8 * 8).reshape(2, 8, 8)
    assert np.array_equal(pool_frames(x, 1), x)
    out = pool_frames(x, 3)
    assert out.shape == (2, 2, 2)
    assert out[0, 0, 0] == x[0, :3, :3].max() and out[1, 1, 1] == x[1, 3:6, 3:6].max()
    with pytest.raises(ValueError):
        pool_frames(x, 9)


def test_split_indices_partition():
    tr, va, te = split_indices(400, seed=3)
    assert (len(tr), len(va), len(te)) == (320, 40, 40)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(400))
    with pytest.raises(ValueError):
        split_indices(2)


# -- synthetic task

def test_default_sweep_range():
    assert SynthSpec().sweep_range() == (5, 14)
    with pytest.raises(ValueError):
        SynthSpec(speed=6)
    with pytest.raises(ValueError):
        SynthSpec(motion="spiral")
    with pytest.raises(ValueError):
        SynthSpec(classes=("right", "sideways"))


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 14), st.integers(5, 47))
def test_sweep_right_is_translation(start, offset):
    spec = SynthSpec()
    clip = render_sweep(spec, "right", [start], [offset])
    for t in range(spec.visible):
        assert np.array_equal(clip[t], np.roll(clip[0], spec.speed * t, axis=1))
    assert not clip[spec.visible:].any()
    ys, xs = np.nonzero(clip[0])
    assert (ys.min(), xs.min()) == (offset, start)


@given(st.integers(5, 14), st.integers(5, 47))
def test_opposite_directions_visit_the_same_positions(start, offset):
    spec = SynthSpec()
    lo, hi = spec.sweep_range()
    mirror = lo + hi - start
    for a, b in (("right", "left"), ("down", "up")):
        pa = sweep_positions(spec, a, [start], [offset]).reshape(-1, 2)
        pb = sweep_positions(spec, b, [mirror], [offset]).reshape(-1, 2)
        assert sorted(map(tuple, pa)) == sorted(map(tuple, pb))
    # the square always stays inside the frame
    p = sweep_positions(spec, "up", [start], [offset])
    assert p.min() >= 0 and p.max() <= spec.side - spec.size


def test_synth_dataset_determinism_and_balance():
    spec = SynthSpec(n_clips=40)
    a, b = to_arrays(synth_dataset(spec, 7)), to_arrays(synth_dataset(spec, 7))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], to_arrays(synth_dataset(spec, 8))[0])
    assert a[0].shape == (40, 16, 64, 64) and a[0].dtype == np.uint8
    assert np.bincount(a[1]).tolist() == [10] * 4
    assert not a[0][:, spec.visible:].any()
    # every visible frame holds exactly one full square
    assert np.all((a[0][:, :spec.visible] == 255).sum(axis=(2, 3)) == spec.size ** 2)


def test_wrap_motion():
    spec = SynthSpec(n_clips=8, motion="wrap", n_objects=2)
    for clip in synth_dataset(spec, 0):
        dy, dx = {"right": (0, 1), "left": (0, -1), "up": (-1, 0), "down": (1, 0)}[spec.classes[clip.label]]
        for t in range(spec.frames):
            assert np.array_equal(clip.frames[t], np.roll(clip.frames[0], (dy * 3 * t, dx * 3 * t), axis=(0, 1)))


# -- directory datasets

def write_clip(d, frames):
    d.mkdir(parents=True)
    for t, f in enumerate(frames):
        Image.fromarray(f).save(d / f"{t:03d}.png")


def test_load_dataset(tmp_path):
    rng = np.random.default_rng(0)
    long = rng.integers(0, 256, size=(20, 32, 32)).astype(np.uint8)
    short = rng.integers(0, 256, size=(5, 64, 64)).astype(np.uint8)
    write_clip(tmp_path / "b_wave" / "c0", long)
    write_clip(tmp_path / "a_clap" / "c1", short)
    clips, classes = load_dataset(tmp_path, side=64, seed=1)
    assert classes == ["a_clap", "b_wave"]
    by_label = {c.label: c for c in clips}
    assert by_label[0].frames.shape == (16, 64, 64)
    assert np.array_equal(by_label[0].frames, short[by_label[0].indices])
    assert by_label[1].indices == sample_indices(20)
    again, _ = load_dataset(tmp_path, side=64, seed=1)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(clips, again))


def test_load_dataset_reports_problems(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    (tmp_path / "empty_class").mkdir()
    write_clip(tmp_path / "ok" / "c0", np.zeros((3, 8, 8), np.uint8))
    (tmp_path / "ok" / "c1").mkdir()
    with pytest.raises(ValueError) as err:
        load_dataset(tmp_path)
    assert "empty class" in str(err.value) and "clip without frames" in str(err.value)


def test_load_dataset_rejects_color(tmp_path):
    d = tmp_path / "x" / "c0"
    d.mkdir(parents=True)
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(d / "000.png")
    with pytest.raises(ValueError, match="grayscale"):
        load_dataset(tmp_path)


# -- experiments

def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(pool=9)
    with pytest.raises(ValueError):
        RunConfig(noise_sigma=-1)
    with pytest.raises(ValueError):
        RunConfig(train={"learning_rate": 1})
    with pytest.raises(ValueError):
        RunConfig(synth={"colour": 1})
    with pytest.raises(ValueError):
        RunConfig(seeds=())
    cfg = RunConfig(pool=4, seeds=(1, 2), train={"epochs": 3})
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.side == 16 and cfg.cell_spec().plane == 16


def test_nominal_grid():
    assert nominal_bandwidth_grid() == [4096, 1024, 441, 256, 144, 100, 81, 64, 16, 4, 4, 1, 1, 1, 1]
    assert len(POOL_GRID) == 15


def test_report_accounting():
    report = report_accounting()
    rows = {r["label"]: r for r in report["rows"]}
    assert rows["1CNN+PixelRNN"]["parameters"] == 501 and rows["2CNN+LSTM"]["parameters"] == 1002
    assert rows["RAW"]["bandwidth_values"] == 1_048_576
    assert rows["Event Camera"]["bandwidth_values"] == 65_536
    assert all(r["bandwidth_values"] == 4096 for r in report["rows"][3:])
    flagged = [r["label"] for r in report["rows"] if r["flags"]]
    assert flagged == ["RAW"]
    assert all("within tolerance" in f for f in rows["RAW"]["flags"])


def test_run_experiment_small():
    cfg = RunConfig(K=8, pool=4, synth={"n_clips": 24}, train={"epochs": 2, "batch_size": 8})
    metrics, res = run_experiment(cfg)
    assert 0.0 <= metrics.accuracy <= 1.0
    assert metrics.bandwidth_values == 2 * 16 * 16
    assert "wall_clock" not in metrics.record()
    assert len(res.history) == 2


# -- CLI

def run_cli(*argv):
    return main([str(a) for a in argv])


def test_cli_report_accounting(tmp_path):
    assert run_cli("report-accounting", "--output", tmp_path, "--quiet") == 0
    lines = [json.loads(s) for s in (tmp_path / "accounting.jsonl").read_text().splitlines()]
    assert len(lines) == 17 and all(r["type"] == "accounting" for r in lines)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "report-accounting" and "wall_clock" in manifest


def test_cli_synth_data_roundtrip(tmp_path):
    out = tmp_path / "synth"
    assert run_cli("synth-data", "--synth", '{"n_clips": 8}', "--output", out, "--quiet") == 0
    clips, classes = load_dataset(out / "clips")
    assert classes == sorted(SynthSpec().classes) and len(clips) == 8
    direct = {c.name: c for c in synth_dataset(SynthSpec(n_clips=8), 0)}
    for clip in clips:
        assert np.array_equal(clip.frames, direct[clip.name.rsplit("/", 1)[-1]].frames)


def test_cli_train_eval_emulate(tmp_path):
    out = tmp_path / "train"
    common = ["--K", 8, "--synth", '{"n_clips": 12}', "--quiet"]
    assert run_cli("train", *common, "--epochs", 2, "--batch-size", 8, "--output", out) == 0
    recs = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["type"] for r in recs] == ["epoch", "epoch", "metrics"]
    assert all("wall_clock" not in r for r in recs)
    ck = out / "checkpoint_seed0.pxck"
    assert ck.exists()
    ev = tmp_path / "eval"
    assert run_cli("eval", *common, "--checkpoint", ck, "--output", ev) == 0
    rec = json.loads((ev / "eval.jsonl").read_text())
    assert rec["accuracy"] == pytest.approx(recs[-1]["accuracy"])
    em = tmp_path / "emulate"
    assert run_cli("emulate", *common, "--checkpoint", ck, "--limit", 2, "--trace", "--output", em) == 0
    assert (em / "features.pxck").exists() and (em / "trace.txt").read_text().strip()


def test_cli_error_record(tmp_path, capsys):
    assert run_cli("train", "--pool", 9, "--output", tmp_path, "--quiet") == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["type"] == "error" and err["command"] == "train" and "grid" in err["message"]
