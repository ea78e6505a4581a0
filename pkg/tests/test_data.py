"""Dataset IO tests: decoding, unit conversion, splits, batching, validation."""

import numpy as np
import pytest
from PIL import Image

from terraseg.data import (
    BASEPROD_CLASS_NAMES,
    ClassSet,
    DatasetManifest,
    ManifestEntry,
    Normalization,
    batches,
    class_pixel_frequencies,
    load_frame,
    load_manifest,
    normalize,
    save_manifest,
    split_dataset,
    validate_dataset,
)
from terraseg.errors import ConfigurationError, DataError


def write_entry(root, entry_id, size=8, depth_raw=2000, thermal_raw=2981, label_class=4,
                class_set=None) -> ManifestEntry:
    class_set = class_set or ClassSet()
    rgb = np.full((size, size, 3), 128, dtype=np.uint8)
    depth = np.full((size, size), depth_raw, dtype=np.uint16)
    thermal = np.full((size, size), thermal_raw, dtype=np.uint16)
    label = np.zeros((size, size, 3), dtype=np.uint8)
    label[:] = class_set.palette[label_class]
    Image.fromarray(rgb).save(root / f"{entry_id}_rgb.png")
    Image.fromarray(depth).save(root / f"{entry_id}_depth.png")
    Image.fromarray(thermal).save(root / f"{entry_id}_thermal.png")
    Image.fromarray(label).save(root / f"{entry_id}_label.png")
    return ManifestEntry(
        id=entry_id,
        rgb_path=f"{entry_id}_rgb.png",
        depth_path=f"{entry_id}_depth.png",
        thermal_path=f"{entry_id}_thermal.png",
        label_path=f"{entry_id}_label.png",
    )


@pytest.fixture
def small_manifest(tmp_path):
    entries = [write_entry(tmp_path, f"e{i}") for i in range(3)]
    return DatasetManifest(entries=entries, class_set=ClassSet(), normalization=Normalization(), root=tmp_path)


class TestLoadFrame:
    def test_depth_millimeters_to_meters(self, small_manifest):
        frame = load_frame(small_manifest.entries[0], small_manifest)
        assert frame.depth[0, 0] == pytest.approx(2.0)

    def test_thermal_decikelvin_to_celsius(self, small_manifest):
        frame = load_frame(small_manifest.entries[0], small_manifest)
        assert frame.thermal[0, 0] == pytest.approx(24.95, abs=1e-4)

    def test_rgb_scaled_to_unit(self, small_manifest):
        frame = load_frame(small_manifest.entries[0], small_manifest)
        assert frame.rgb[0, 0, 0] == pytest.approx(128 / 255)

    def test_label_palette_match(self, small_manifest):
        frame = load_frame(small_manifest.entries[0], small_manifest)
        assert (frame.label == 4).all()

    def test_missing_file_names_entry(self, tmp_path, small_manifest):
        entry = ManifestEntry(id="ghost", rgb_path="nope.png", depth_path="nope.png", thermal_path="nope.png")
        with pytest.raises(DataError, match="ghost"):
            load_frame(entry, small_manifest)

    def test_unknown_palette_color_rejected(self, tmp_path):
        class_set = ClassSet()
        entry = write_entry(tmp_path, "bad")
        stray = np.full((8, 8, 3), 7, dtype=np.uint8)  # not a palette color
        Image.fromarray(stray).save(tmp_path / "bad_label.png")
        manifest = DatasetManifest(entries=[entry], class_set=class_set,
                                   normalization=Normalization(), root=tmp_path)
        with pytest.raises(DataError, match="bad"):
            load_frame(entry, manifest)

    def test_extent_mismatch_rejected(self, tmp_path):
        entry = write_entry(tmp_path, "odd")
        Image.fromarray(np.zeros((4, 8), dtype=np.uint16)).save(tmp_path / "odd_depth.png")
        manifest = DatasetManifest(entries=[entry], class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)
        with pytest.raises(DataError, match="odd"):
            load_frame(entry, manifest)


class TestNormalize:
    def test_depth_scaling(self, small_manifest):
        frame = load_frame(small_manifest.entries[0], small_manifest)
        x = normalize(frame, small_manifest)
        assert x[3, 0, 0] == pytest.approx(0.2)  # 2 m / 10 m

    def test_thermal_window_endpoints(self, small_manifest):
        norm = small_manifest.normalization
        frame = load_frame(small_manifest.entries[0], small_manifest)
        frame.thermal[:] = norm.thermal_min_c
        assert normalize(frame, small_manifest)[4].max() == 0.0
        frame.thermal[:] = norm.thermal_max_c
        assert normalize(frame, small_manifest)[4].min() == 1.0

    def test_out_of_range_thermal_clamps(self, small_manifest):
        frame = load_frame(small_manifest.entries[0], small_manifest)
        frame.thermal[:] = 500.0
        assert normalize(frame, small_manifest)[4].max() == 1.0
        frame.thermal[:] = -100.0
        assert normalize(frame, small_manifest)[4].min() == 0.0

    def test_standardization_applied(self, small_manifest):
        small_manifest.normalization.channel_mean = (0.5,) * 5
        small_manifest.normalization.channel_std = (0.5,) * 5
        frame = load_frame(small_manifest.entries[0], small_manifest)
        x = normalize(frame, small_manifest)
        assert x[3, 0, 0] == pytest.approx((0.2 - 0.5) / 0.5)

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(ConfigurationError):
            Normalization(thermal_min_c=30.0, thermal_max_c=30.0)


class TestSplit:
    def test_eighty_twenty(self):
        entries = [ManifestEntry(str(i), "r", "d", "t") for i in range(10)]
        train, val = split_dataset(entries, 0.8, seed=0)
        assert len(train) == 8 and len(val) == 2

    def test_deterministic_and_seed_sensitive(self):
        entries = [ManifestEntry(str(i), "r", "d", "t") for i in range(20)]
        a_train, _ = split_dataset(entries, 0.8, seed=1)
        b_train, _ = split_dataset(entries, 0.8, seed=1)
        c_train, _ = split_dataset(entries, 0.8, seed=2)
        assert [e.id for e in a_train] == [e.id for e in b_train]
        assert [e.id for e in a_train] != [e.id for e in c_train]

    def test_disjoint_and_exhaustive(self):
        entries = [ManifestEntry(str(i), "r", "d", "t") for i in range(37)]
        for seed in range(5):
            train, val = split_dataset(entries, 0.7, seed=seed)
            ids = sorted(e.id for e in train) + sorted(e.id for e in val)
            assert sorted(ids) == sorted(e.id for e in entries)
            assert not set(e.id for e in train) & set(e.id for e in val)

    def test_labeled_campaign_proportions(self):
        # 950 labeled samples at an 80/20 split leave 190 for validation
        entries = [ManifestEntry(str(i), "r", "d", "t") for i in range(950)]
        train, val = split_dataset(entries, 0.8, seed=0)
        assert len(train) == 760 and len(val) == 190

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            split_dataset([], 0.8, seed=0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ConfigurationError):
            split_dataset([ManifestEntry("0", "r", "d", "t")], 1.0, seed=0)


class TestBatches:
    def test_batch_sizes(self, tmp_path):
        entries = [write_entry(tmp_path, f"b{i}") for i in range(10)]
        manifest = DatasetManifest(entries=entries, class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)
        sizes = [b.inputs.shape[0] for b in batches(entries, manifest, 4, seed=0, epoch=0)]
        assert sizes == [4, 4, 2]

    def test_epoch_reshuffle(self, tmp_path):
        entries = [write_entry(tmp_path, f"s{i}") for i in range(8)]
        manifest = DatasetManifest(entries=entries, class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)

        def order(epoch):
            ids = []
            for b in batches(entries, manifest, 4, seed=0, epoch=epoch):
                ids.extend(b.ids)
            return ids

        assert order(0) == order(0)
        e0, e1 = order(0), order(1)
        assert sum(a != b for a, b in zip(e0, e1)) >= 3

    def test_epoch_is_exact_partition(self, tmp_path):
        entries = [write_entry(tmp_path, f"p{i}") for i in range(7)]
        manifest = DatasetManifest(entries=entries, class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)
        seen = []
        for b in batches(entries, manifest, 3, seed=5, epoch=2):
            seen.extend(b.ids)
        assert sorted(seen) == sorted(e.id for e in entries)

    def test_mixed_extents_padded_with_void(self, tmp_path):
        big = write_entry(tmp_path, "big", size=12)
        small = write_entry(tmp_path, "small", size=8)
        manifest = DatasetManifest(entries=[big, small], class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)
        (batch,) = list(batches([big, small], manifest, 2, seed=0, epoch=0, shuffle=False))
        assert batch.inputs.shape == (2, 5, 12, 12)
        small_idx = batch.ids.index("small")
        assert (batch.labels[small_idx, 8:, :] == 0).all()

    def test_ablation_zeroes_channel(self, tmp_path):
        entries = [write_entry(tmp_path, "a0")]
        manifest = DatasetManifest(entries=entries, class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)
        (batch,) = list(batches(entries, manifest, 1, seed=0, epoch=0, ablate_channels=(4,)))
        assert (batch.inputs[:, 4] == 0).all()
        assert (batch.inputs[:, 3] != 0).any()

    def test_unlabeled_entry_rejected(self, tmp_path):
        entry = write_entry(tmp_path, "u0")
        entry.label_path = None
        manifest = DatasetManifest(entries=[entry], class_set=ClassSet(),
                                   normalization=Normalization(), root=tmp_path)
        with pytest.raises(DataError, match="u0"):
            list(batches([entry], manifest, 1, seed=0, epoch=0))


class TestManifestIO:
    def test_round_trip(self, tmp_path, small_manifest):
        path = tmp_path / "m.jsonl"
        save_manifest(path, small_manifest)
        loaded = load_manifest(path)
        assert [e.id for e in loaded.entries] == [e.id for e in small_manifest.entries]
        assert loaded.class_set == small_manifest.class_set
        assert loaded.normalization.depth_max_m == small_manifest.normalization.depth_max_m

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(tmp_path / "absent.jsonl")

    def test_malformed_manifest_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("not json\n")
        with pytest.raises(DataError):
            load_manifest(path)


class TestSyntheticDataset:
    def test_validates_clean(self, synth_manifest):
        summary = validate_dataset(synth_manifest)
        assert summary["entries"] == 4 and summary["labeled"] == 4

    def test_classes_present(self, synth_manifest):
        freqs = class_pixel_frequencies(synth_manifest)
        for name in ("void", "compact", "sandy", "rock", "bush"):
            assert freqs[name] > 0, name

    def test_default_class_names_match_schema(self):
        assert BASEPROD_CLASS_NAMES == ("void", "compact", "grass", "bedrock", "sandy", "gravel", "rock", "bush")

    def test_thermal_pair_identical_without_thermal(self, synth_manifest):
        """Sandy and compact pixels are indistinguishable once thermal is gone."""
        frames = [load_frame(e, synth_manifest) for e in synth_manifest.entries]
        base = normalize(frames[0], synth_manifest)
        for frame in frames[1:]:
            x = normalize(frame, synth_manifest)
            np.testing.assert_array_equal(x[:4], base[:4])  # rgb + depth identical
            assert (x[4] != base[4]).any()  # thermal varies

    def test_pair_pixels_balanced_across_frames(self, synth_manifest):
        """Each background pixel is sandy in exactly half the frames."""
        labels = np.stack([load_frame(e, synth_manifest).label for e in synth_manifest.entries])
        pair = (labels == 1) | (labels == 4)
        bg = pair.all(axis=0)
        assert bg.any()
        sandy_count = (labels[:, bg] == 4).sum(axis=0)
        assert (sandy_count == 2).all()
