"""Dataset construction, splitting, disk layout, and toy-data oracles."""

import csv

import numpy as np
import pytest

from lesionforge.data import (
    HAM_CLASSES,
    LabeledDataset,
    from_diffusion_range,
    ingest_ham_format,
    load_dataset,
    make_toy_dataset,
    mean_hue,
    save_dataset,
    split,
    to_classifier_input,
    to_diffusion_range,
)
from lesionforge.errors import DataError, ParameterError
from lesionforge.images import image_grid, load_png, save_png

# per-class counts with the same shape as a real dermoscopy archive
ARCHIVE_COUNTS = (6705, 1113, 1099, 514, 327, 142, 115)


def _dataset_from_counts(counts, image_size=8):
    """Minimal labeled dataset with the requested class frequencies."""
    labels = np.concatenate(
        [np.full(n, c, dtype=np.int64) for c, n in enumerate(counts)]
    )
    images = np.zeros((len(labels), 3, image_size, image_size))
    names = tuple(f"benign{c}" for c in range(len(counts)))
    return LabeledDataset(
        images=images,
        labels=labels,
        class_names=names,
        benign_flags=(True,) * len(counts),
    )


class TestLabeledDataset:
    def test_frequency_table(self):
        ds = _dataset_from_counts([5, 3, 0, 2])
        assert ds.frequency_table().tolist() == [5, 3, 0, 2]

    def test_label_out_of_range_rejected(self):
        with pytest.raises(DataError, match=r"\[0, 2\)"):
            LabeledDataset(
                images=np.zeros((1, 3, 8, 8)),
                labels=np.array([2]),
                class_names=("a", "b"),
                benign_flags=(True, True),
            )

    def test_length_mismatch_rejected(self):
        with pytest.raises(DataError, match="2 images but 1 labels"):
            LabeledDataset(
                images=np.zeros((2, 3, 8, 8)),
                labels=np.array([0]),
                class_names=("a",),
                benign_flags=(True,),
            )

    def test_flag_count_mismatch_rejected(self):
        with pytest.raises(DataError, match="benign flags"):
            LabeledDataset(
                images=np.zeros((1, 3, 8, 8)),
                labels=np.array([0]),
                class_names=("a", "b"),
                benign_flags=(True,),
            )

    def test_subset_preserves_metadata(self):
        ds = make_toy_dataset([4, 3], image_size=8, seed=0, malignant_classes=1)
        sub = ds.subset([0, 5])
        assert len(sub) == 2
        assert sub.class_names == ds.class_names
        assert sub.image_ids == (ds.image_ids[0], ds.image_ids[5])
        assert np.array_equal(sub.images[1], ds.images[5])

    def test_merge_concatenates_and_mixes_provenance(self):
        real = make_toy_dataset([3, 2], image_size=8, seed=0, malignant_classes=1)
        synth = LabeledDataset(
            images=np.zeros((2, 3, 8, 8)),
            labels=np.array([1, 1]),
            class_names=real.class_names,
            benign_flags=real.benign_flags,
            provenance="synthetic",
            image_ids=("s0", "s1"),
        )
        merged = real.merge(synth)
        assert merged.provenance == "mixed"
        assert merged.frequency_table().tolist() == [3, 4]
        assert len(merged) == 7

    def test_merge_balances_minority_to_target(self):
        # a synthetic top-up must raise the minority count exactly to target
        real = _dataset_from_counts([90, 10])
        target = 90
        need = target - 10
        synth = LabeledDataset(
            images=np.zeros((need, 3, 8, 8)),
            labels=np.full(need, 1, dtype=np.int64),
            class_names=real.class_names,
            benign_flags=real.benign_flags,
            provenance="synthetic",
            image_ids=tuple(f"s{i}" for i in range(need)),
        )
        merged = real.merge(synth)
        assert merged.frequency_table().tolist() == [90, 90]

    def test_merge_rejects_class_mismatch(self):
        a = _dataset_from_counts([2, 2])
        b = make_toy_dataset([2, 2], image_size=8, seed=0, malignant_classes=1)
        with pytest.raises(DataError, match="class sets"):
            a.merge(b)


class TestNormalization:
    def test_diffusion_range_round_trip(self):
        img = np.linspace(0, 1, 24).reshape(2, 3, 2, 2)
        assert np.allclose(from_diffusion_range(to_diffusion_range(img)), img)
        assert to_diffusion_range(np.zeros(1))[0] == -1.0
        assert to_diffusion_range(np.ones(1))[0] == 1.0

    def test_classifier_input_is_standardized(self):
        x = to_classifier_input(np.array([0.0, 0.5, 1.0]))
        assert np.allclose(x, [-1.0, 0.0, 1.0])


class TestToyData:
    def test_deterministic_under_seed(self):
        a = make_toy_dataset([4, 2], image_size=16, seed=7)
        b = make_toy_dataset([4, 2], image_size=16, seed=7)
        assert np.array_equal(a.images, b.images)

    def test_seeds_differ(self):
        a = make_toy_dataset([4], image_size=16, seed=0)
        b = make_toy_dataset([4], image_size=16, seed=1)
        assert not np.array_equal(a.images, b.images)

    def test_counts_and_names(self):
        ds = make_toy_dataset(
            [9, 7, 5, 3, 2, 2, 1, 1], image_size=8, seed=0, malignant_classes=3
        )
        assert ds.frequency_table().tolist() == [9, 7, 5, 3, 2, 2, 1, 1]
        assert ds.class_names[:5] == tuple(f"benign{i}" for i in range(5))
        assert ds.class_names[5:] == tuple(f"malignant{i}" for i in range(3))
        assert ds.benign_flags == (True,) * 5 + (False,) * 3

    def test_pixels_in_unit_range(self):
        ds = make_toy_dataset([6, 6], image_size=16, seed=2)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_hue_stump_separates_extreme_classes(self, seed):
        # a depth-2 threshold rule on mean hue must split class 0 from the
        # last class at >= 95% accuracy: the bands are far apart by design
        counts = [0] * 8
        counts[0], counts[7] = 30, 30
        ds = make_toy_dataset(counts, image_size=16, seed=seed)
        hues = np.array([mean_hue(img) for img in ds.images])
        is_last = ds.labels == 7
        best = 0.0
        for threshold in np.unique(hues):
            acc = np.mean((hues > threshold) == is_last)
            best = max(best, acc, 1.0 - acc)
        assert best >= 0.95

    def test_rejects_bad_parameters(self):
        with pytest.raises(ParameterError):
            make_toy_dataset([-1, 2], image_size=8, seed=0)
        with pytest.raises(ParameterError):
            make_toy_dataset([2], image_size=4, seed=0)
        with pytest.raises(ParameterError):
            make_toy_dataset([2, 2], image_size=8, seed=0, malignant_classes=3)


class TestSplit:
    def test_archive_counts_split_exactly(self):
        # 80/20 on the archive-shaped frequencies must produce the known
        # totals: stratified largest-remainder apportionment
        ds = _dataset_from_counts(ARCHIVE_COUNTS)
        sp = split(ds, {"train": 0.8, "val": 0.2}, seed=0)
        assert len(sp.train) == 8012
        assert len(sp.val) == 2003
        assert len(sp.test) == 0

    def test_partition_is_disjoint_and_complete(self):
        ds = _dataset_from_counts([13, 7, 3])
        sp = split(ds, {"train": 0.6, "val": 0.2}, seed=5)
        all_idx = np.concatenate([sp.train, sp.val, sp.test])
        assert len(np.unique(all_idx)) == len(ds)
        assert sorted(all_idx.tolist()) == list(range(len(ds)))

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_per_class_fraction_within_one_record(self, seed):
        ds = _dataset_from_counts([101, 53, 17, 9])
        sp = split(ds, {"train": 0.8, "val": 0.2}, seed=seed)
        for c, n in enumerate([101, 53, 17, 9]):
            got = np.sum(ds.labels[sp.train] == c)
            assert abs(got - 0.8 * n) <= 1.0

    def test_deterministic_under_seed(self):
        ds = _dataset_from_counts([20, 10])
        a = split(ds, {"train": 0.8, "val": 0.2}, seed=3)
        b = split(ds, {"train": 0.8, "val": 0.2}, seed=3)
        assert np.array_equal(a.train, b.train)
        assert np.array_equal(a.val, b.val)

    def test_seed_changes_assignment(self):
        ds = _dataset_from_counts([20, 10])
        a = split(ds, {"train": 0.5, "val": 0.5}, seed=0)
        b = split(ds, {"train": 0.5, "val": 0.5}, seed=1)
        assert not np.array_equal(a.train, b.train)

    def test_tiny_class_goes_to_train_with_warning(self):
        ds = _dataset_from_counts([10, 1])
        with pytest.warns(UserWarning, match="fewer than"):
            sp = split(ds, {"train": 0.8, "val": 0.2}, seed=0)
        assert sp.warnings and "assigning all to train" in sp.warnings[0]
        member = np.flatnonzero(ds.labels == 1)[0]
        assert member in sp.train

    def test_rejects_bad_fractions(self):
        ds = _dataset_from_counts([4])
        with pytest.raises(ParameterError):
            split(ds, {"train": 0.9, "val": 0.2}, seed=0)
        with pytest.raises(ParameterError):
            split(ds, {"train": -0.1, "val": 0.2}, seed=0)
        with pytest.raises(ParameterError, match="unknown"):
            split(ds, {"train": 0.5, "holdout": 0.5}, seed=0)

    def test_three_way_split(self):
        ds = _dataset_from_counts([100])
        sp = split(ds, {"train": 0.7, "val": 0.2}, seed=0)
        assert (len(sp.train), len(sp.val), len(sp.test)) == (70, 20, 10)


class TestDiskLayout:
    def test_round_trip_preserves_labels_and_pixels(self, tmp_path):
        ds = make_toy_dataset([3, 2], image_size=16, seed=4, malignant_classes=1)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.class_names == ds.class_names
        assert np.array_equal(back.labels, ds.labels)
        assert back.image_ids == ds.image_ids
        # 8-bit quantization is the only loss
        assert np.abs(back.images - ds.images).max() <= 0.5 / 255.0 + 1e-12

    def test_layout_files(self, tmp_path):
        ds = make_toy_dataset([2], image_size=8, seed=0, malignant_classes=0)
        save_dataset(ds, tmp_path)
        assert (tmp_path / "metadata.csv").exists()
        pngs = sorted((tmp_path / "images").glob("*.png"))
        assert len(pngs) == 2

    def test_missing_metadata_rejected(self, tmp_path):
        with pytest.raises(DataError, match="metadata file not found"):
            load_dataset(tmp_path)

    def test_missing_image_file_rejected(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        with open(tmp_path / "metadata.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["image_id", "label"], ["ghost", "nv"]])
        with pytest.raises(DataError, match="missing"):
            load_dataset(tmp_path)

    def test_empty_metadata_gives_empty_dataset(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        with open(tmp_path / "metadata.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(["image_id", "label"])
        ds = ingest_ham_format(tmp_path)
        assert len(ds) == 0
        assert ds.class_names == HAM_CLASSES


class TestHamIngestion:
    def _write(self, tmp_path, rows):
        from lesionforge.images import save_png

        (tmp_path / "images").mkdir(parents=True, exist_ok=True)
        with open(tmp_path / "metadata.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "label"])
            rng = np.random.default_rng(0)
            for image_id, label in rows:
                save_png(
                    tmp_path / "images" / f"{image_id}.png",
                    rng.uniform(size=(3, 8, 8)),
                )
                writer.writerow([image_id, label])

    def test_labels_map_through_fixed_table(self, tmp_path):
        self._write(tmp_path, [("a", "nv"), ("b", "mel"), ("c", "df")])
        ds = ingest_ham_format(tmp_path)
        assert ds.class_names == HAM_CLASSES
        by_name = dict(zip(ds.image_ids, ds.labels))
        assert ds.class_names[by_name["a"]] == "nv"
        assert ds.class_names[by_name["b"]] == "mel"

    def test_benign_flags_follow_diagnosis(self, tmp_path):
        self._write(tmp_path, [("a", "nv")])
        ds = ingest_ham_format(tmp_path)
        flags = dict(zip(ds.class_names, ds.benign_flags))
        assert flags["nv"] and flags["bkl"] and flags["df"] and flags["vasc"]
        assert not flags["mel"] and not flags["bcc"] and not flags["akiec"]

    def test_unknown_label_names_row_and_accepted_set(self, tmp_path):
        self._write(tmp_path, [("a", "nv"), ("b", "warts")])
        with pytest.raises(DataError, match="row 3") as err:
            ingest_ham_format(tmp_path)
        assert "warts" in str(err.value)
        assert "nv" in str(err.value)

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "images").mkdir(parents=True)
        with open(tmp_path / "metadata.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["id", "diagnosis"], ["a", "nv"]])
        with pytest.raises(DataError, match="header"):
            ingest_ham_format(tmp_path)


class TestImageHelpers:
    def test_png_round_trip_quantization(self, tmp_path):
        img = np.random.default_rng(1).uniform(size=(3, 12, 12))
        path = save_png(tmp_path / "x.png", img)
        back = load_png(path)
        assert back.shape == (3, 12, 12)
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_grid_shape_and_padding(self):
        imgs = np.zeros((5, 3, 8, 8))
        grid = image_grid(imgs, cols=3, pad=2)
        # 2 rows x 3 cols of 8px tiles with 2px padding everywhere
        assert grid.shape == (3, 2 * 10 + 2, 3 * 10 + 2)

    def test_grid_rejects_empty(self):
        with pytest.raises(DataError, match="zero images"):
            image_grid(np.zeros((0, 3, 8, 8)))

    def test_save_png_rejects_bad_shape(self, tmp_path):
        with pytest.raises(DataError):
            save_png(tmp_path / "x.png", np.zeros((8, 8)))
