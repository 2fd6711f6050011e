import json

import numpy as np
import pytest

from tuckerattn.attention_reference import MhaWeights
from tuckerattn.tensor_io import (
    FormatVersionError,
    ShapeLengthError,
    TruncatedBlobError,
    load_container,
    load_weights,
    save_container,
    save_weights,
)
from tuckerattn.tucker import TuckerAttentionParams, random_params
from tuckerattn.variants import GqaWeights, MlaWeights

SEEDS = [0, 1, 2]


def test_empty_container(tmp_path):
    manifest, blob = save_container(tmp_path / "empty", {})
    data = json.loads(manifest.read_text())
    assert data["format"] == "ATNZ" and data["version"] == 1 and data["entries"] == []
    assert blob.read_bytes() == b""
    assert load_container(tmp_path / "empty").tensors == {}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("shared", [False, True])
def test_tucker_round_trip_bit_exact(tmp_path, seed, shared):
    p = random_params(3, 12, (2, 5, 4), shared_kv=shared, rng=seed, scale_dim=3.7)
    save_weights(tmp_path / "p", p)
    q = load_weights(tmp_path / "p.json")
    assert isinstance(q, TuckerAttentionParams)
    assert q.shared_kv == shared and q.scale_dim == 3.7
    assert q.arrays().keys() == p.arrays().keys()
    for name, arr in p.arrays().items():
        assert q.arrays()[name].tobytes() == arr.tobytes()


@pytest.mark.parametrize("make", [
    lambda rng: MhaWeights.random(2, 8, rng=rng),
    lambda rng: GqaWeights.random(4, 2, 8, rng=rng),
    lambda rng: MlaWeights.random(2, 8, 4, 6, shared_kv=False, rope_dim=2, rng=rng),
])
def test_weight_kinds_round_trip(tmp_path, make):
    w = make(np.random.default_rng(0))
    save_weights(tmp_path / "w", w)
    back = load_weights(tmp_path / "w")
    assert type(back) is type(w)
    for name, val in vars(w).items():
        if isinstance(val, np.ndarray):
            np.testing.assert_array_equal(getattr(back, name), val)


def test_blob_layout_little_endian_row_major(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    _, blob = save_container(tmp_path / "a", {"a": a, "b": np.ones(2)})
    raw = blob.read_bytes()
    assert raw[:48] == np.array([0, 1, 2, 3, 4, 5], dtype="<f8").tobytes()
    entries = json.loads((tmp_path / "a.json").read_text())["entries"]
    assert [e["byte_offset"] for e in entries] == [0, 48]
    assert [e["byte_length"] for e in entries] == [48, 16]


def test_f32_narrowing_error_bound(tmp_path):
    a = np.random.default_rng(3).standard_normal((4, 5)) * 1e3
    save_container(tmp_path / "n", {"a": a}, dtype="f32")
    back = load_container(tmp_path / "n").tensors["a"]
    assert np.all(np.abs(back - a) <= np.finfo(np.float32).eps * np.abs(a))


def _corrupt_manifest(tmp_path, edit):
    save_container(tmp_path / "c", {"a": np.ones((2, 2))})
    path = tmp_path / "c.json"
    data = json.loads(path.read_text())
    edit(data)
    path.write_text(json.dumps(data))
    return tmp_path / "c"


def test_wrong_magic(tmp_path):
    with pytest.raises(FormatVersionError):
        load_container(_corrupt_manifest(tmp_path, lambda d: d.update(format="NPZ")))


def test_wrong_version(tmp_path):
    with pytest.raises(FormatVersionError):
        load_container(_corrupt_manifest(tmp_path, lambda d: d.update(version=2)))


def test_shape_length_inconsistent(tmp_path):
    with pytest.raises(ShapeLengthError):
        load_container(_corrupt_manifest(tmp_path, lambda d: d["entries"][0].update(shape=[3, 2])))


def test_truncated_blob(tmp_path):
    save_container(tmp_path / "t", {"a": np.ones((4, 4))})
    blob = tmp_path / "t.bin"
    blob.write_bytes(blob.read_bytes()[:50])
    with pytest.raises(TruncatedBlobError):
        load_container(tmp_path / "t")


def test_manifest_validated_before_blob(tmp_path):
    path = _corrupt_manifest(tmp_path, lambda d: d.update(version=9))
    (tmp_path / "c.bin").unlink()
    with pytest.raises(FormatVersionError):
        load_container(path)


def test_distinct_error_types():
    kinds = {FormatVersionError, TruncatedBlobError, ShapeLengthError}
    assert len(kinds) == 3
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_container(tmp_path / "nothing")
