import numpy as np
import pytest

from CLfD.evaluation import (
    ProbeConfig,
    alignment_error,
    alignment_error_from_embeddings,
    alignment_suite,
    build_stage_dataset,
    nearest_distance,
    stage_probe_eval,
    synchronized_distance,
)
from CLfD.exceptions import ConfigError, DatasetError, ShapeError
from CLfD.models import build_model


def distinct(t, dim=4):
    return np.arange(t * dim, dtype=np.float64).reshape(t, dim)


def test_identical_videos_align_perfectly():
    emb = distinct(6)
    assert alignment_error_from_embeddings(emb, emb) == 0.0


def test_reversed_video():
    emb = distinct(4)
    assert alignment_error_from_embeddings(emb, emb[::-1]) == pytest.approx(0.5)


def test_ties_pick_smallest_index():
    a = np.zeros((3, 2))
    b = np.zeros((3, 2))
    # every j ties, so j* = 0 and the offsets are 0, 1, 2
    assert alignment_error_from_embeddings(a, b) == pytest.approx((0 + 1 + 2) / 3 / 3)


def test_random_embeddings_near_one_third():
    rng = np.random.default_rng(0)
    value = alignment_error_from_embeddings(rng.normal(size=(400, 8)), rng.normal(size=(400, 8)))
    assert value == pytest.approx(1 / 3, abs=0.05)


def test_unequal_lengths():
    with pytest.raises(ShapeError):
        alignment_error_from_embeddings(distinct(3), distinct(4))


def test_distance_diagnostics():
    a = distinct(3, 2)
    assert nearest_distance(a, a) == 0.0
    assert synchronized_distance(a, a + np.array([3.0, 4.0])) == pytest.approx(5.0)


def test_alignment_error_on_frames(tiny_dataset):
    model = build_model(seed=0)
    video = tiny_dataset.video(0, 1)
    assert alignment_error(model, video, video) == 0.0


def test_suite_averages_ordered_view_pairs(tiny_dataset):
    model = build_model(seed=0)
    report = alignment_suite(model, tiny_dataset, "val", threads=2)
    assert report.count == len(tiny_dataset.split("val"))
    assert all(0.0 <= v < 1.0 for v in report.per_demo.values())
    assert len(report.to_frame()) == report.count * 5 * 4
    assert report.percent == report.mean * 100
    summary = report.summary()
    assert set(summary["per_demo"]) == {str(d) for d in tiny_dataset.split("val")}


def test_stage_dataset_is_balanced_and_even(tiny_dataset):
    examples = build_stage_dataset(tiny_dataset, "seen", per_class=10, rng=np.random.default_rng(0))
    labels = examples.labels
    assert (labels == 0).sum() == (labels == 1).sum() == 10
    per_view = np.bincount(examples.keys[:, 1], minlength=5)[[0, 1, 2]]
    assert per_view.max() - per_view.min() <= 1
    assert set(examples.keys[:, 1]) <= {0, 1, 2}


def test_stage_dataset_respects_exclusion(tiny_dataset):
    rng = np.random.default_rng(0)
    first = build_stage_dataset(tiny_dataset, "all", per_class=6, rng=rng)
    second = build_stage_dataset(tiny_dataset, "all", per_class=6, rng=rng, exclude=first.key_set())
    assert not first.key_set() & second.key_set()


def test_stage_dataset_too_large(tiny_dataset):
    with pytest.raises(DatasetError):
        build_stage_dataset(tiny_dataset, "unseen", per_class=1000, split="test")


def test_unknown_view_group(tiny_dataset):
    with pytest.raises(ConfigError):
        build_stage_dataset(tiny_dataset, "hidden", per_class=2)


def test_probe_runs_and_reports_sizes(tiny_dataset):
    config = ProbeConfig(epochs=20, train_per_class=12, test_per_class=4, seed=1)
    report = stage_probe_eval(build_model(seed=0), tiny_dataset, config, "seen", "unseen")
    assert 0.0 <= report.accuracy <= 1.0
    assert report.n_train == 24 and report.n_test == 8
    assert report.test_views == [3, 4]


@pytest.mark.slow
def test_probe_transfers_to_unseen_views(tmp_path):
    from CLfD.synth_data import generate_dataset, load_dataset
    from CLfD.training import TrainConfig, train

    generate_dataset(1, tmp_path / "data", None)
    dataset = load_dataset(tmp_path / "data")
    config = TrainConfig(dataset=str(tmp_path / "data"), train_views=[0, 1, 2], seed=1)
    encoder = train(config, dataset).last.best_model()
    unseen = stage_probe_eval(encoder, dataset, ProbeConfig(), "seen", "unseen")
    shuffled = stage_probe_eval(encoder, dataset, ProbeConfig(shuffle_labels=True), "seen", "unseen")
    assert unseen.n_test >= 200
    assert unseen.accuracy >= 0.9
    assert 0.4 <= shuffled.accuracy <= 0.6


def test_suite_reports_both_distance_diagnostics(tiny_dataset):
    report = alignment_suite(build_model(seed=0), tiny_dataset, "val", views=[0, 1])
    frame = report.to_frame()
    assert list(frame.columns) == [
        "demo", "view_a", "view_b", "alignment_error", "nearest_distance", "synchronized_distance"
    ]
    assert (frame["nearest_distance"] <= frame["synchronized_distance"] + 1e-9).all()
    summary = report.summary()
    assert summary["synchronized_distance"] == pytest.approx(frame["synchronized_distance"].mean())
    assert summary["nearest_distance"] == pytest.approx(frame["nearest_distance"].mean())
