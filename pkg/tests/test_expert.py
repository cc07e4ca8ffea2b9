import json

import numpy as np
import pytest

from trajdistill.data import generate_blobs
from trajdistill.errors import InputError, IntegrityError, TrainingError, VersionError
from trajdistill.expert import (Trajectory, load_pool, load_trajectory, sample_segment,
                                save_trajectory, sgd_train, train_teacher)
from trajdistill.model import ArchSpec, init_params

ARCH = ArchSpec("mlp", 1, 8, (1, 8, 8), 3, "none")


@pytest.fixture(scope="module")
def real():
    return generate_blobs(3, 30, 8, seed=2)


@pytest.fixture(scope="module")
def traj(real):
    return train_teacher(real, ARCH, 3, teacher_lr=0.05, batch_size=16, seed=4)


def test_snapshot_count(traj):
    assert traj.snapshots.shape == (4, 8 * 64 + 8 + 8 * 3 + 3)


def test_first_snapshot_is_init(traj):
    assert np.array_equal(traj.snapshots[0], init_params(ARCH, 4).values)


def test_zero_lr_freezes_parameters(real):
    t = train_teacher(real, ARCH, 3, teacher_lr=0.0, batch_size=16, seed=0)
    assert all(np.array_equal(t.snapshots[0], s) for s in t.snapshots)


def test_teacher_deterministic(real, traj):
    again = train_teacher(real, ARCH, 3, teacher_lr=0.05, batch_size=16, seed=4)
    assert again.snapshots.tobytes() == traj.snapshots.tobytes()
    assert again.dataset_sha256 == real.fingerprint()


def test_training_loss_decreases(real):
    losses = []
    params = init_params(ARCH, 0).values
    sgd_train(ARCH, params, real.images, real.labels, 10, 0.05, 16, np.random.default_rng(0),
              on_epoch=lambda e, p, l: losses.append(l))
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(real):
    with pytest.raises(TrainingError) as info:
        train_teacher(real, ARCH, 5, teacher_lr=1e30, batch_size=16, seed=0)
    assert info.value.epoch == 1


def test_needs_two_epochs(real):
    with pytest.raises(InputError):
        train_teacher(real, ARCH, 1)


def test_roundtrip_bit_exact(traj, tmp_path):
    save_trajectory(traj, tmp_path / "t")
    back = load_trajectory(tmp_path / "t", ARCH)
    assert back.snapshots.tobytes() == traj.snapshots.tobytes()
    assert (back.seed, back.epochs, back.arch) == (4, 3, ARCH)
    manifest = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert manifest["dataset_sha256"] == traj.dataset_sha256


def test_missing_record_raises(tmp_path):
    count = len(init_params(ARCH, 0).values)
    t = Trajectory(np.zeros((11, count), np.float32), ARCH, 0, 10, 0.01, 16)
    d = save_trajectory(t, tmp_path / "t")
    (d / "snapshots.bin").write_bytes(np.zeros((9, count), "<f4").tobytes())
    with pytest.raises(IntegrityError, match="records"):
        load_trajectory(d)


def test_layout_mismatch_raises(traj, tmp_path):
    d = save_trajectory(traj, tmp_path / "t")
    with pytest.raises(IntegrityError):
        load_trajectory(d, ArchSpec("mlp", 1, 9, (1, 8, 8), 3, "none"))


def test_param_count_mismatch_raises(traj, tmp_path):
    d = save_trajectory(traj, tmp_path / "t")
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["param_count"] += 1
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_trajectory(d)


def test_version_check(traj, tmp_path):
    d = save_trajectory(traj, tmp_path / "t")
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load_trajectory(d)


def test_load_pool_sorted(traj, tmp_path):
    for name in ("expert_0002", "expert_0001"):
        save_trajectory(traj, tmp_path / name)
    assert len(load_pool(tmp_path)) == 2
    with pytest.raises(InputError):
        load_pool(tmp_path / "empty")


def _counting_traj(epochs):
    count = len(init_params(ARCH, 0).values)
    snaps = np.repeat(np.arange(epochs + 1, dtype=np.float32)[:, None], count, axis=1)
    return Trajectory(snaps, ARCH, 0, epochs, 0.01, 16)


def test_segment_first_epochs():
    seg = sample_segment([_counting_traj(4)], 0, 0, 2, np.random.default_rng(0))
    assert (seg.theta_start[0], seg.theta_mid[0], seg.theta_target[0]) == (0, 1, 2)


@pytest.mark.parametrize("M, offset", [(2, 1), (3, 1), (5, 2)])
def test_segment_mid_index(M, offset):
    rng = np.random.default_rng(1)
    for _ in range(20):
        seg = sample_segment([_counting_traj(12)], 0, 6, M, rng)
        assert seg.theta_mid[0] == seg.t + offset == seg.mid_epoch
        assert seg.theta_target[0] == seg.t + M
        assert seg.t < seg.mid_epoch < seg.t + M


def test_segment_covers_start_range():
    rng = np.random.default_rng(0)
    starts = {sample_segment([_counting_traj(10)], 2, 5, 2, rng).t for _ in range(200)}
    assert starts == {2, 3, 4, 5}


@pytest.mark.parametrize("kwargs", [dict(t_min=0, t_max=9, M=2), dict(t_min=3, t_max=2, M=2),
                                    dict(t_min=0, t_max=0, M=1)])
def test_segment_bad_bounds(kwargs):
    with pytest.raises(InputError):
        sample_segment([_counting_traj(10)], rng=np.random.default_rng(0), **kwargs)


def test_segment_empty_pool():
    with pytest.raises(InputError, match="empty"):
        sample_segment([], 0, 0, 2, np.random.default_rng(0))
