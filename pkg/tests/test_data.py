import numpy as np
import pytest

from calibkit.data import (
    CorruptionSpec,
    FormatError,
    LogitsDump,
    corrupt,
    load_dataset,
    make_blobs,
    noise_std,
    read_dump,
    stratified_split,
    write_dump,
)


class TestBlobs:
    def test_deterministic(self):
        a = load_dataset("blobs-synthetic", seed=7, params={"n": 300, "num_classes": 3})
        b = load_dataset("blobs-synthetic", seed=7, params={"n": 300, "num_classes": 3})
        assert np.array_equal(a.x_train, b.x_train)
        assert np.array_equal(a.y_test, b.y_test)

    def test_values_in_unit_range(self):
        x, y = make_blobs(n=500, seed=1)
        assert x.min() >= 0.0 and x.max() <= 1.0
        assert set(np.unique(y)) <= {0, 1, 2}


class TestSplits:
    def test_disjoint_and_exhaustive(self):
        x, y = make_blobs(n=400, seed=2)
        x = x + np.arange(400)[:, None] * 1e-6  # make rows unique
        split = stratified_split(x, y, seed=3)
        total = len(split.x_train) + len(split.x_val) + len(split.x_test)
        assert total == 400
        rows = {tuple(r) for part in (split.x_train, split.x_val, split.x_test) for r in part}
        assert len(rows) == 400

    def test_stratified_preserves_imbalance(self):
        rng = np.random.default_rng(0)
        y = np.array([0] * 270 + [1] * 100)  # imbalance factor 2.7
        x = rng.random((370, 4)).astype(np.float32)
        split = stratified_split(x, y, fractions=(0.5, 0.25, 0.25), seed=1, num_classes=2)
        assert split.imbalance_factor == pytest.approx(2.7)
        for part in (split.y_train, split.y_val, split.y_test):
            counts = np.bincount(part, minlength=2)
            assert counts[0] / counts[1] == pytest.approx(2.7, rel=0.02)

    def test_seed_changes_assignment(self):
        x, y = make_blobs(n=200, seed=4)
        a = stratified_split(x, y, seed=1)
        b = stratified_split(x, y, seed=2)
        assert not np.array_equal(a.x_train, b.x_train)

    def test_empty_directory_errors(self, tmp_path):
        with pytest.raises(IOError):
            load_dataset("cifar10-binary-subset", root=str(tmp_path))

    def test_unknown_id(self):
        with pytest.raises(IOError):
            load_dataset("imagenet")


class TestCifarBinary:
    def _write_records(self, path, n, trailing=0):
        rng = np.random.default_rng(5)
        rows = np.zeros((n, 3073), dtype=np.uint8)
        rows[:, 0] = rng.integers(0, 10, n)
        rows[:, 1:] = rng.integers(0, 256, (n, 3072))
        raw = rows.tobytes() + b"\x00" * trailing
        path.write_bytes(raw)

    def test_loads_valid_records(self, tmp_path):
        self._write_records(tmp_path / "data_batch_1.bin", 40)
        split = load_dataset("cifar10-binary-subset", root=str(tmp_path), seed=0)
        assert split.x_train.shape[1:] == (3, 32, 32)
        assert split.x_train.max() <= 1.0

    def test_truncated_record_names_offset(self, tmp_path):
        self._write_records(tmp_path / "data_batch_1.bin", 3, trailing=100)
        with pytest.raises(FormatError, match=str(3 * 3073)):
            load_dataset("cifar10-binary-subset", root=str(tmp_path))


class TestFolderPerClass:
    def test_loads_and_labels_sorted(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(6)
        for cls in ("ants", "bees"):
            (tmp_path / cls).mkdir()
            for i in range(8):
                arr = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
                Image.fromarray(arr, "RGB").save(tmp_path / cls / f"{i}.png")
        split = load_dataset("folder-per-class", root=str(tmp_path), seed=0)
        assert split.num_classes == 2
        assert split.x_train.shape[1:] == (3, 8, 8)


class TestCorruption:
    def test_monotone_noise_schedule(self):
        assert noise_std(5) > noise_std(1)
        stds = [noise_std(s) for s in range(1, 6)]
        assert stds == sorted(stds)

    def test_deterministic(self):
        x, _ = make_blobs(n=50, seed=7)
        spec = CorruptionSpec("gaussian-noise", 3, seed=11)
        assert np.array_equal(corrupt(x, spec), corrupt(x, spec))

    def test_values_clipped(self):
        x, _ = make_blobs(n=50, seed=8)
        for kind in ("gaussian-noise", "gaussian-blur", "pixel-dropout"):
            out = corrupt(x, CorruptionSpec(kind, 5, seed=0))
            assert out.min() >= 0.0 and out.max() <= 1.0
            assert out.shape == x.shape

    def test_severity_bounds(self):
        with pytest.raises(ValueError):
            CorruptionSpec("gaussian-noise", 0)
        with pytest.raises(ValueError):
            CorruptionSpec("gaussian-noise", 6)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            CorruptionSpec("fog", 1)

    def test_parse_cli_form(self):
        spec = CorruptionSpec.parse("gaussian-noise:3:11")
        assert spec == CorruptionSpec("gaussian-noise", 3, 11)
        assert CorruptionSpec.parse("gaussian-blur:2").seed == 0
        with pytest.raises(ValueError):
            CorruptionSpec.parse("gaussian-noise")

    def test_images_blur_spatially(self):
        rng = np.random.default_rng(9)
        x = rng.random((4, 3, 8, 8)).astype(np.float32)
        out = corrupt(x, CorruptionSpec("gaussian-blur", 3, 0))
        # blur reduces per-image variance
        assert out.var() < x.var()


class TestDump:
    def _random_dump(self, rng, n=None, k=None):
        n = n or int(rng.integers(1, 30))
        k = k or int(rng.integers(2, 6))
        return LogitsDump(
            dataset_id="blobs-synthetic",
            logits=rng.normal(size=(n, k)),
            labels=rng.integers(0, k, n),
            model_checksum="abc123",
            temperature=float(rng.random()) if rng.random() < 0.5 else None,
        )

    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(10)
        for i in range(20):
            dump = self._random_dump(rng)
            path = tmp_path / f"d{i}.bin"
            write_dump(path, dump)
            back = read_dump(path)
            assert np.array_equal(back.logits, dump.logits)
            assert np.array_equal(back.labels, dump.labels)
            assert back.dataset_id == dump.dataset_id
            assert back.model_checksum == dump.model_checksum
            assert back.temperature == dump.temperature

    def test_file_size_formula(self, tmp_path):
        rng = np.random.default_rng(11)
        dump = self._random_dump(rng, n=1000, k=10)
        path = tmp_path / "size.bin"
        write_dump(path, dump)
        size = path.stat().st_size
        import json, struct
        header = {
            "dataset_id": dump.dataset_id, "num_classes": 10, "count": 1000,
            "model_checksum": dump.model_checksum, "temperature": dump.temperature,
        }
        hlen = len(json.dumps(header, sort_keys=True).encode())
        assert size == 4 + 4 + hlen + 1000 * 84

    def test_length_mismatch_detected(self, tmp_path):
        rng = np.random.default_rng(12)
        dump = self._random_dump(rng, n=5, k=3)
        path = tmp_path / "bad.bin"
        write_dump(path, dump)
        raw = path.read_bytes()
        path.write_bytes(raw[:-28])  # drop one record
        with pytest.raises(FormatError):
            read_dump(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            read_dump(path)
