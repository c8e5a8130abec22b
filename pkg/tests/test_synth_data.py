import numpy as np
import pytest

from CLfD.exceptions import ConfigError, DatasetError
from CLfD.scene import planar_distance, sample_placement, scripted_trajectory
from CLfD.synth_data import (
    GeneratorConfig,
    frame_path,
    generate_dataset,
    load_dataset,
    sample_contrastive_batch,
    sample_pair_indices,
    split_counts,
)
from CLfD.utils import rng_for

from .conftest import TINY_CONFIG


def test_split_counts():
    assert split_counts(150) == (100, 25, 25)
    assert split_counts(12) == (8, 2, 2)


def test_invalid_demo_count():
    with pytest.raises(ConfigError):
        GeneratorConfig(demos=0).validate()


def test_manifest_layout(tiny_dataset):
    manifest = tiny_dataset.manifest
    assert manifest.demo_count == 12
    assert manifest.view_count == 5
    assert manifest.frames == [10] * 12
    assert sorted(sum(manifest.splits.values(), [])) == list(range(12))
    assert not set(manifest.split("train")) & set(manifest.split("test"))


def test_same_seed_same_hash(tiny_dataset, tmp_path):
    manifest = generate_dataset(1, tmp_path / "again", GeneratorConfig(**TINY_CONFIG))
    assert manifest.content_hash == tiny_dataset.manifest.content_hash


def test_different_seed_different_hash(tiny_dataset, tmp_path):
    manifest = generate_dataset(2, tmp_path / "other", GeneratorConfig(**TINY_CONFIG))
    assert manifest.content_hash != tiny_dataset.manifest.content_hash


def test_frames_and_labels(tiny_dataset):
    video = tiny_dataset.video(0, 2)
    assert video.shape == (10, 64, 64, 3)
    assert video.dtype == np.float32
    labels = tiny_dataset.labels(0)
    assert len(labels) == 10
    assert set(labels["stage"]) == {"pick", "place"}
    assert labels.loc[0, "velocity_0"] == 0.0


def test_synchronized_views_share_timestamps(tiny_dataset):
    # every camera renders the same scene state at each t
    for view in range(5):
        assert len(tiny_dataset.video(3, view)) == len(tiny_dataset.labels(3))


def test_out_of_range_index_names_location(tiny_dataset):
    with pytest.raises(DatasetError, match="demo=0"):
        tiny_dataset.frame(0, 1, 99)


def test_truncated_frame_file(tmp_path):
    root = tmp_path / "data"
    generate_dataset(3, root, GeneratorConfig(demos=6, frames_per_demo=6))
    path = frame_path(root, 0, 0)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DatasetError):
        load_dataset(root)
    dataset = load_dataset(root, verify=False)
    with pytest.raises(DatasetError):
        dataset.video(0, 0)


def test_pair_sampling_contract(tiny_dataset):
    rng = np.random.default_rng(0)
    demos, timesteps, views = sample_pair_indices(tiny_dataset, "train", 16, rng)
    train = set(tiny_dataset.split("train"))
    assert all(d in train for d in demos)
    assert len(set(zip(demos.tolist(), timesteps.tolist()))) == 16
    assert all(a != b for a, b in views)


def test_pair_sampling_too_large_batch(tiny_dataset):
    with pytest.raises(DatasetError):
        sample_pair_indices(tiny_dataset, "train", 81, np.random.default_rng(0))


def test_contrastive_batch_interleaves(tiny_dataset):
    batch = sample_contrastive_batch(tiny_dataset, "train", 4, np.random.default_rng(1), views=[0, 1])
    assert batch.images.shape == (8, 64, 64, 3)
    d, t, (va, vb) = int(batch.demos[0]), int(batch.timesteps[0]), batch.views[0]
    assert np.array_equal(batch.images[0], tiny_dataset.frame(d, int(va), t))
    assert np.array_equal(batch.images[1], tiny_dataset.frame(d, int(vb), t))


def test_view_pairs_are_uniform(tiny_dataset):
    rng = np.random.default_rng(11)
    counts = {}
    batches, size = 2000, 50
    for _ in range(batches):
        _, _, views = sample_pair_indices(tiny_dataset, "train", size, rng)
        for a, b in views.tolist():
            counts[(a, b)] = counts.get((a, b), 0) + 1
    assert len(counts) == 5 * 4
    expected = batches * size / 20
    sigma = np.sqrt(batches * size * (1 / 20) * (19 / 20))
    assert all(abs(c - expected) <= 4 * sigma for c in counts.values())


def test_fixed_rng_gives_identical_batch(tiny_dataset):
    first = sample_contrastive_batch(tiny_dataset, "train", 6, np.random.default_rng(7))
    second = sample_contrastive_batch(tiny_dataset, "train", 6, np.random.default_rng(7))
    assert np.array_equal(first.images, second.images)
    assert np.array_equal(first.demos, second.demos)
    assert np.array_equal(first.timesteps, second.timesteps)
    assert np.array_equal(first.views, second.views)


def test_stage_labels_follow_the_scene(tiny_dataset):
    config = GeneratorConfig(**TINY_CONFIG)
    for demo in range(tiny_dataset.manifest.demo_count):
        start = sample_placement(rng_for(1, "data", demo), placement_range=config.placement_range)
        states = scripted_trajectory(start, config.frames_per_demo)
        labels = tiny_dataset.labels(demo)
        assert labels["stage"].tolist() == [s.stage for s in states]
        assert labels["gripper_closed"].tolist() == [int(s.holding) for s in states]
        for state in states:
            moved = not np.array_equal(state.box, start.box)
            assert (state.stage == "place") == (state.holding or moved)
        assert states[-1].box_on_goal()
        assert planar_distance(states[-1].box, start.goal) <= 0.02
