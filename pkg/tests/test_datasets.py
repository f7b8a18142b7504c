from __future__ import annotations

import pytest
import torch

from medsegkit import ArrayDataset, BinarizedDataset, MergedDataset, NNUNetDataset
from medsegkit.data import DatasetError

from conftest import write_nnunet_folder


def simple_dataset(n: int) -> ArrayDataset:
    images = [torch.full((1, 4, 4), float(i)) for i in range(n)]
    labels = [torch.full((4, 4), i % 3, dtype=torch.long) for i in range(n)]
    return ArrayDataset(images, labels)


class TestFold:
    def test_sizes_and_disjointness(self):
        train, val = simple_dataset(10).fold(fold=0, k=5, seed=0)
        assert len(val) == 2
        assert len(train) == 8
        train_ids = {train.case_id(i) for i in range(len(train))}
        val_ids = {val.case_id(i) for i in range(len(val))}
        assert not train_ids & val_ids

    def test_determinism(self):
        ds = simple_dataset(10)
        first = ds.fold(fold=2, k=5, seed=7)
        second = ds.fold(fold=2, k=5, seed=7)
        assert [first[1].case_id(i) for i in range(2)] == [second[1].case_id(i) for i in range(2)]

    def test_folds_partition_index_set(self):
        ds = simple_dataset(10)
        seen: list[str] = []
        for fold in range(5):
            _, val = ds.fold(fold=fold, k=5, seed=3)
            seen.extend(val.case_id(i) for i in range(len(val)))
        assert sorted(seen) == sorted(ds.case_ids)
        assert len(set(seen)) == len(seen)

    def test_uneven_sizes_differ_by_at_most_one(self):
        ds = simple_dataset(7)
        sizes = [len(ds.fold(fold=f, k=3, seed=0)[1]) for f in range(3)]
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == 7

    def test_fold_out_of_range(self):
        with pytest.raises(ValueError):
            simple_dataset(10).fold(fold=5, k=5)
        with pytest.raises(ValueError):
            simple_dataset(10).fold(fold=-1, k=5)

    def test_too_few_items(self):
        with pytest.raises(DatasetError):
            simple_dataset(3).fold(fold=0, k=5)


class TestNNUNetDataset:
    def test_multimodal_stacking(self, tmp_path):
        write_nnunet_folder(tmp_path, n_cases=2, modalities=2, size=64)
        ds = NNUNetDataset(tmp_path, split="Tr")
        assert len(ds) == 2
        image, label = ds[0]
        assert tuple(image.shape) == (2, 64, 64)
        assert tuple(label.shape) == (64, 64)
        assert label.dtype == torch.int64

    def test_single_modality_channel_dim(self, tmp_path):
        write_nnunet_folder(tmp_path, n_cases=2, modalities=1)
        image, _ = NNUNetDataset(tmp_path, split="Tr")[0]
        assert image.shape[0] == 1

    def test_case_ordering_and_ids(self, tmp_path):
        write_nnunet_folder(tmp_path, n_cases=3, modalities=1)
        ds = NNUNetDataset(tmp_path, split="Tr")
        assert ds.case_ids == sorted(ds.case_ids)

    def test_workflow_shape_fold_then_index(self, tmp_path):
        folder = tmp_path / "Dataset501_PH2"
        write_nnunet_folder(folder, n_cases=6, modalities=1)
        train, val = NNUNetDataset(folder=folder, split="Tr").fold(fold=0)
        assert len(train) + len(val) == 6
        image, label = train[0]
        assert image.shape[1:] == label.shape

    def test_missing_label_names_case(self, tmp_path):
        write_nnunet_folder(tmp_path, n_cases=2, modalities=1)
        (tmp_path / "labelsTr" / "case_0001.nii.gz").unlink()
        with pytest.raises(DatasetError, match="case_0001"):
            NNUNetDataset(tmp_path, split="Tr")

    def test_inconsistent_modalities(self, tmp_path):
        write_nnunet_folder(tmp_path, n_cases=2, modalities=2)
        (tmp_path / "imagesTr" / "case_0001_0001.nii.gz").unlink()
        with pytest.raises(DatasetError, match="modality"):
            NNUNetDataset(tmp_path, split="Tr")

    def test_missing_split_folders(self, tmp_path):
        with pytest.raises(DatasetError):
            NNUNetDataset(tmp_path, split="Ts")

    def test_ts_split(self, tmp_path):
        write_nnunet_folder(tmp_path, n_cases=2, modalities=1, split="Ts")
        ds = NNUNetDataset(tmp_path, split="Ts")
        assert len(ds) == 2


class TestBinarizedDataset:
    def test_multiclass_to_binary(self):
        label = torch.arange(4).reshape(2, 2)
        ds = BinarizedDataset(ArrayDataset([torch.zeros(1, 2, 2)], [label]))
        _, binary = ds[0]
        assert torch.equal(binary, (label > 0).long())
        assert set(binary.unique().tolist()) <= {0, 1}

    def test_all_zero_stays_zero(self):
        ds = BinarizedDataset(ArrayDataset([torch.zeros(1, 2, 2)], [torch.zeros(2, 2).long()]))
        assert ds[0][1].sum() == 0

    def test_voxel_count_conservation(self):
        g = torch.Generator().manual_seed(0)
        label = torch.randint(0, 5, (16, 16), generator=g)
        ds = BinarizedDataset(ArrayDataset([torch.zeros(1, 16, 16)], [label]))
        _, binary = ds[0]
        brute = sum(int((label == c).sum()) for c in range(1, 5))
        assert int((binary == 1).sum()) == brute

    def test_images_untouched(self):
        image = torch.rand(1, 3, 3)
        ds = BinarizedDataset(ArrayDataset([image], [torch.ones(3, 3).long()]))
        assert torch.equal(ds[0][0], image)


class TestMergedDataset:
    def test_prefixed_ids_and_lengths(self):
        merged = MergedDataset([simple_dataset(2), simple_dataset(3)], prefixes=["a", "b"])
        assert len(merged) == 5
        assert merged.case_id(0) == "a/case_0000"
        assert merged.case_id(2) == "b/case_0000"
        assert len(set(merged.case_ids)) == 5

    def test_items_pass_through(self):
        first = simple_dataset(2)
        merged = MergedDataset([first, simple_dataset(1)])
        assert torch.equal(merged[1][0], first[1][0])

    def test_empty_merge_rejected(self):
        with pytest.raises(DatasetError):
            MergedDataset([])


def test_dataset_purity():
    ds = simple_dataset(4)
    a_img, a_lab = ds[2]
    b_img, b_lab = ds[2]
    assert torch.equal(a_img, b_img)
    assert torch.equal(a_lab, b_lab)


def test_device_placement():
    ds = simple_dataset(2).to("cpu")
    image, label = ds[0]
    assert image.device.type == "cpu"
    assert label.device.type == "cpu"
