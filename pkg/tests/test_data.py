"""Synthetic data determinism and label semantics; checkpoint and
metrics-log round-trips and corruption detection."""

import json
import os

import numpy as np
import pytest

from layerlock.data import (
    MOTION_CLASSES,
    STATIC_LABEL,
    IntegrityError,
    MetricsWriter,
    batch_frames,
    motion_octant,
    read_checkpoint,
    read_metrics,
    synth_video,
    write_checkpoint,
)

DIMS = (4, 16, 16)


class TestSynthVideo:
    def test_deterministic_bitwise(self):
        a = synth_video("moving_shapes", 42, DIMS)
        b = synth_video("moving_shapes", 42, DIMS)
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.label == b.label

    def test_different_seeds_differ(self):
        a = synth_video("moving_shapes", 1, DIMS)
        b = synth_video("moving_shapes", 2, DIMS)
        assert not np.array_equal(a.frames, b.frames)

    def test_frames_shape_and_range(self):
        clip = synth_video("moving_shapes", 7, DIMS)
        assert clip.frames.shape == (*DIMS, 3)
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0

    def test_label_in_range(self):
        labels = {synth_video("moving_shapes", s, DIMS).label for s in range(64)}
        assert labels <= set(range(MOTION_CLASSES))
        assert len(labels) >= 6  # most octants show up across 64 seeds

    def test_static_sentinel(self):
        clip = synth_video("moving_shapes", 5, DIMS, static=True)
        assert clip.label == STATIC_LABEL
        # All frames identical when nothing moves.
        for t in range(1, DIMS[0]):
            np.testing.assert_array_equal(clip.frames[t], clip.frames[0])

    def test_motion_octant_quantization(self):
        assert motion_octant(1.0, 0.0) == 0
        assert motion_octant(1.0, 1.0) == 1
        assert motion_octant(0.0, 1.0) == 2
        assert motion_octant(-1.0, 0.0) == 4
        assert motion_octant(0.0, -1.0) == 6
        assert motion_octant(1.0, -0.01) == 7

    def test_gradient_field_dense_target(self):
        clip = synth_video("gradient_field", 9, DIMS)
        assert clip.dense_target.shape == DIMS
        assert np.all(clip.dense_target >= 0.0)
        # Scaled by 8/max(H, W): bounded by the scaled image diagonal.
        assert clip.dense_target.max() <= np.hypot(*DIMS[1:]) * 8.0 / max(DIMS[1:])

    def test_moving_shapes_has_no_dense_target(self):
        assert synth_video("moving_shapes", 3, DIMS).dense_target is None

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            synth_video("noise", 0, DIMS)

    def test_batch_frames_stacks(self):
        clips = [synth_video("moving_shapes", s, DIMS) for s in range(3)]
        assert batch_frames(clips).shape == (3, *DIMS, 3)


class TestCheckpoint:
    def arrays(self, rng):
        return {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(7,)),
                "scalar": np.array(2.5)}

    def test_round_trip_lossless(self, tmp_path, rng):
        path = str(tmp_path / "ck")
        meta = {"step": 17, "note": "x"}
        arrays = self.arrays(rng)
        write_checkpoint(path, meta, arrays)
        meta2, arrays2 = read_checkpoint(path)
        assert meta2["step"] == 17 and meta2["note"] == "x"
        for k in arrays:
            np.testing.assert_array_equal(arrays2[k], arrays[k])

    def test_byte_identical_for_identical_inputs(self, tmp_path, rng):
        arrays = self.arrays(rng)
        p1, p2 = str(tmp_path / "c1"), str(tmp_path / "c2")
        write_checkpoint(p1, {"step": 1}, arrays)
        write_checkpoint(p2, {"step": 1}, arrays)
        for fname in ("manifest.json", "payload.bin"):
            with open(os.path.join(p1, fname), "rb") as f1, \
                    open(os.path.join(p2, fname), "rb") as f2:
                assert f1.read() == f2.read()

    def test_corrupted_payload_detected(self, tmp_path, rng):
        path = str(tmp_path / "ck")
        write_checkpoint(path, {"step": 0}, self.arrays(rng))
        payload = os.path.join(path, "payload.bin")
        with open(payload, "r+b") as f:
            f.seek(8)
            f.write(b"\xff")
        with pytest.raises(IntegrityError):
            read_checkpoint(path)

    def test_truncated_payload_detected(self, tmp_path, rng):
        path = str(tmp_path / "ck")
        write_checkpoint(path, {"step": 0}, self.arrays(rng))
        manifest = os.path.join(path, "manifest.json")
        with open(manifest) as f:
            m = json.load(f)
        # Claim an in-range checksum over a shorter payload.
        payload = os.path.join(path, "payload.bin")
        with open(payload, "rb") as f:
            data = f.read()[:-16]
        with open(payload, "wb") as f:
            f.write(data)
        import hashlib
        m["payload_sha256"] = hashlib.sha256(data).hexdigest()
        with open(manifest, "w") as f:
            json.dump(m, f)
        with pytest.raises(IntegrityError):
            read_checkpoint(path)

    def test_missing_checkpoint_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            read_checkpoint(str(tmp_path / "nope"))


class TestMetrics:
    def test_jsonl_round_trip(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        w = MetricsWriter(path)
        records = [{"step": i, "loss": 0.5 / (i + 1)} for i in range(5)]
        for r in records:
            w.append(r)
        w.close()
        assert read_metrics(path) == records

    def test_append_only(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        w = MetricsWriter(path)
        w.append({"step": 0})
        w.close()
        w = MetricsWriter(path)
        w.append({"step": 1})
        w.close()
        assert [r["step"] for r in read_metrics(path)] == [0, 1]

    def test_null_writer_noop(self):
        w = MetricsWriter(None)
        w.append({"step": 0})
        w.close()

    def test_one_line_per_record(self, tmp_path):
        path = str(tmp_path / "m.jsonl")
        w = MetricsWriter(path)
        for i in range(3):
            w.append({"step": i})
        w.close()
        with open(path) as f:
            assert len(f.readlines()) == 3
