import struct

import numpy as np
import pytest

from cagevit.data import SyntheticTask, gen_dataset, stack_images
from cagevit.errors import ContractError, ParseError
from cagevit.model import TINY, partition_for
from cagevit.salience import encode_bundle, patch_scores, select_and_rearrange, weighted_salience
from cagevit.serialization import MAGIC, decode_tnsr, encode_tnsr, load_params, read_tnsr, save_params, write_tnsr
from cagevit.tensor import Tensor


# synthetic task

def test_labels_are_balanced():
    labels = [s.label for s in gen_dataset(SyntheticTask(), 1000)]
    assert np.bincount(labels).tolist() == [500, 500]


def test_labels_balanced_within_one_for_odd_sizes():
    counts = np.bincount([s.label for s in gen_dataset(SyntheticTask(n_classes=3), 100)])
    assert counts.max() - counts.min() <= 1


def test_same_seed_gives_identical_dataset():
    task = SyntheticTask(seed=5, noise=0.1, n_maps=3, cam_error=0.3)
    a, b = gen_dataset(task, 40), gen_dataset(task, 40)
    for x, y in zip(a, b):
        assert x.label == y.label
        assert x.image.tobytes() == y.image.tobytes()
        assert encode_bundle(x.bundle) == encode_bundle(y.bundle)
    c = gen_dataset(SyntheticTask(seed=6, noise=0.1, n_maps=3, cam_error=0.3), 40)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_hot_patches_recovered_at_matching_rho():
    task = SyntheticTask(n_hot=2)
    rho = task.n_hot / 16
    for s in gen_dataset(task, 200):
        scores = patch_scores(weighted_salience(s.bundle), task.grid, task.patch[:2])
        part = select_and_rearrange(scores, rho)
        assert sorted(part.major.tolist()) == s.hot.tolist()


def test_hot_patches_rank_strictly_above_others_with_several_maps():
    task = SyntheticTask(n_hot=3, n_maps=4)
    for s in gen_dataset(task, 100):
        scores = patch_scores(weighted_salience(s.bundle), task.grid, task.patch[:2]).data
        cold = np.setdiff1d(np.arange(16), s.hot)
        assert scores[s.hot].min() > scores[cold].max()


def test_class_pixels_live_only_in_hot_patches():
    samples = gen_dataset(SyntheticTask(), 50)
    for s in samples:
        patches = s.image.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16)
        cold = np.setdiff1d(np.arange(16), s.hot)
        assert np.all(patches[cold] == 0.5)
        assert np.all(patches[s.hot] != 0.5)


def test_images_lie_in_unit_interval():
    imgs = stack_images(gen_dataset(SyntheticTask(noise=0.5), 30))
    assert imgs.shape == (30, 16, 16, 1)
    assert imgs.min() >= 0 and imgs.max() <= 1


def test_bundle_matches_model_geometry():
    s = gen_dataset(SyntheticTask(), 1)[0]
    assert partition_for(TINY, s.bundle).major.size == TINY.n_major


def test_task_validation():
    with pytest.raises(ContractError):
        SyntheticTask(n_hot=17)
    with pytest.raises(ContractError):
        SyntheticTask(cam_error=1.5)
    with pytest.raises(ContractError):
        gen_dataset(SyntheticTask(), 0)


def test_sample_unpacks_as_triple():
    image, bundle, label = gen_dataset(SyntheticTask(), 1)[0]
    assert image.shape == (16, 16, 1) and bundle.k == 1 and label in (0, 1)


# TNSR

def test_f64_round_trip_is_bit_identical(rng, tmp_path):
    x = rng.standard_normal((3, 4, 5))
    write_tnsr(tmp_path / "x.tnsr", x)
    assert read_tnsr(tmp_path / "x.tnsr").data.tobytes() == x.tobytes()


def test_f32_round_trip_keeps_dtype(rng):
    x = rng.standard_normal(7).astype(np.float32)
    y, end = decode_tnsr(encode_tnsr(x))
    assert y.dtype == np.float32 and y.tobytes() == x.tobytes() and end == len(encode_tnsr(x))


def test_header_layout():
    buf = encode_tnsr(np.zeros((2, 3)))
    assert buf[:4] == MAGIC and buf[4] == 1 and buf[5] == 2
    assert struct.unpack_from("<I2Q", buf, 6) == (2, 2, 3)
    assert len(buf) == 10 + 16 + 6 * 8


def test_zero_ndim_file_rejected():
    buf = MAGIC + bytes([1, 2]) + struct.pack("<I", 0) + struct.pack("<d", 1.0)
    with pytest.raises(ParseError) as err:
        decode_tnsr(buf)
    assert err.value.offset == 6


def test_parse_errors_carry_offsets():
    good = encode_tnsr(np.ones(4))
    cases = {b"XXXX" + good[4:]: 0, good[:4] + b"\x07" + good[5:]: 4, good[:5] + b"\x09" + good[6:]: 5}
    for buf, offset in cases.items():
        with pytest.raises(ParseError) as err:
            decode_tnsr(buf)
        assert err.value.offset == offset
    with pytest.raises(ParseError, match="truncated"):
        decode_tnsr(good[:-1])


def test_trailing_bytes_rejected(tmp_path):
    (tmp_path / "x.tnsr").write_bytes(encode_tnsr(np.ones(2)) + b"\0")
    with pytest.raises(ParseError, match="trailing"):
        read_tnsr(tmp_path / "x.tnsr")


def test_unsupported_dtype_rejected():
    with pytest.raises(ContractError):
        encode_tnsr(np.ones(3, dtype=np.int32))


# parameter directories

def test_param_directory_round_trip(rng, tmp_path):
    params = {"a.w": Tensor(rng.standard_normal((2, 3))), "b": Tensor(rng.standard_normal(4).astype(np.float32))}
    save_params(tmp_path / "p", params)
    back = load_params(tmp_path / "p")
    assert back.keys() == params.keys()
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()
    manifest = (tmp_path / "p" / "manifest.txt").read_text().splitlines()
    assert manifest[0] == "a.w a.w.tnsr 2x3"


def test_param_directory_refuses_overwrite(tmp_path):
    save_params(tmp_path / "p", {"a": Tensor(np.ones(1))})
    with pytest.raises(FileExistsError):
        save_params(tmp_path / "p", {"a": Tensor(np.ones(1))})


def test_manifest_shape_mismatch_is_parse_error(tmp_path):
    save_params(tmp_path / "p", {"a": Tensor(np.ones(3))})
    (tmp_path / "p" / "manifest.txt").write_text("a a.tnsr 4\n")
    with pytest.raises(ParseError):
        load_params(tmp_path / "p")
