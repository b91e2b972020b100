import json

import numpy as np
import pytest
from scipy import ndimage

from ear3d import reference
from ear3d.data import (DatasetManifest, ManifestEntry, PhantomSpec, RecordStore, generate_phantom,
                        load_record, make_record, make_split, network_input, rotate_augment,
                        save_dataset, save_record)
from ear3d.errors import ConfigError, DataError, DimensionError, FormatError, LeakageError


def _record(rng, t=3, h=6, w=8, subject="S1"):
    image = rng.standard_normal((4, t, h, w)).astype(np.float32)
    image[1:] = np.clip(image[1:], -5, 5)
    mask = (rng.random((t, h, w)) > 0.5).astype(np.uint8)
    return make_record(subject, "a", image, mask)


def test_round_trip_is_bitwise(tmp_path, rng):
    rec = _record(rng)
    save_record(rec, tmp_path / "r")
    back = load_record(tmp_path / "r")
    assert back.image.tobytes() == rec.image.tobytes()
    assert back.mask.tobytes() == rec.mask.tobytes()
    assert (back.subject_id, back.slice_id, back.spacing_mm, back.venc_cm_s) == \
        (rec.subject_id, rec.slice_id, rec.spacing_mm, rec.venc_cm_s)
    assert (tmp_path / "r" / "image.raw").stat().st_size == 4 * rec.image.size


def test_short_payload_is_a_format_error(tmp_path, rng):
    save_record(_record(rng), tmp_path / "r")
    raw = tmp_path / "r" / "image.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError) as info:
        load_record(tmp_path / "r")
    assert isinstance(info.value, DataError)
    assert "image.raw" in str(info.value)


def test_long_mask_is_a_format_error(tmp_path, rng):
    save_record(_record(rng), tmp_path / "r")
    with open(tmp_path / "r" / "mask.raw", "ab") as fh:
        fh.write(b"\x00")
    with pytest.raises(FormatError):
        load_record(tmp_path / "r")


def test_mask_value_two_is_a_dimension_error(tmp_path, rng):
    save_record(_record(rng), tmp_path / "r")
    path = tmp_path / "r" / "mask.raw"
    data = bytearray(path.read_bytes())
    data[5] = 2
    path.write_bytes(bytes(data))
    with pytest.raises(DimensionError, match="5"):
        load_record(tmp_path / "r")


def test_bad_meta_is_rejected(tmp_path, rng):
    save_record(_record(rng), tmp_path / "r")
    meta_path = tmp_path / "r" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["format_version"] = 99
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_record(tmp_path / "r")
    meta_path.write_text("{not json")
    with pytest.raises(FormatError):
        load_record(tmp_path / "r")


def test_velocity_above_venc_is_rejected(rng):
    image = np.zeros((4, 1, 2, 2), np.float32)
    image[3, 0, 0, 0] = 31.0
    with pytest.raises(DataError, match="v_z"):
        make_record("S", "a", image, np.zeros((1, 2, 2)))


def test_rotation_identities(rng):
    rec = _record(rng, h=6, w=6)
    four = rec
    for _ in range(4):
        four = rotate_augment(four, 90)
    assert four.image.tobytes() == rec.image.tobytes() and four.mask.tobytes() == rec.mask.tobytes()
    two = rotate_augment(rotate_augment(rec, 180), 180)
    assert two.image.tobytes() == rec.image.tobytes()
    with pytest.raises(ValueError):
        rotate_augment(rec, 45)


def test_rotation_index_map(rng):
    s = 5
    for r, c in [(0, 0), (1, 3), (4, 2)]:
        mask = np.zeros((1, s, s), np.uint8)
        mask[0, r, c] = 1
        image = np.zeros((4, 1, s, s), np.float32)
        rec = make_record("S", "a", image, mask)
        out = rotate_augment(rec, 90)
        assert np.argwhere(out.mask[0]).tolist() == [[s - 1 - c, r]]
        assert np.array_equal(out.mask[0], reference.rotate90_ref(mask[0]))


def test_rotation_moves_every_channel_alike(rng):
    rec = _record(rng, h=4, w=6)
    out = rotate_augment(rec, 270)
    index = np.arange(24).reshape(4, 6)
    moved = np.rot90(index, 3)
    for ch in range(4):
        for t in range(rec.frames):
            assert np.array_equal(out.image[ch, t], rec.image[ch, t].ravel()[moved])
    assert out.spacing_mm == rec.spacing_mm[::-1]
    assert rotate_augment(rec, seed=3).image.shape[2:] in ((4, 6), (6, 4))


def test_network_input_scaling(rng):
    rec = _record(rng)
    x = network_input(rec)
    assert x.shape == (1, 4, 3, 6, 8) and x.dtype == np.float32
    assert x[0, 0].min() == 0.0 and x[0, 0].max() == 1.0
    assert np.allclose(x[0, 3], rec.image[3] / 30.0, atol=1e-7)


def test_split_of_eighteen_subjects():
    subjects = [f"S{i:02d}" for i in range(18)]
    plan = make_split(subjects, 0.2, 5, seed=0)
    assert len(plan.test_subjects) == 4 and len(plan.train_subjects) == 14
    assert not set(plan.test_subjects) & set(plan.train_subjects)
    flat = [s for f in plan.folds for s in f]
    assert sorted(flat) == sorted(plan.train_subjects) and len(flat) == len(set(flat))
    assert sorted(len(f) for f in plan.folds) == [2, 3, 3, 3, 3]
    for j in range(5):
        tr, val = plan.fold(j)
        assert not set(tr) & set(val) and set(tr) | set(val) == set(plan.train_subjects)
    assert make_split(subjects, 0.2, 5, seed=0) == plan
    assert make_split(subjects, 0.2, 5, seed=1) != plan


def test_split_errors_and_degenerate_k():
    with pytest.raises(ConfigError):
        make_split([f"S{i}" for i in range(5)], 0.2, 5)
    with pytest.raises(ConfigError):
        make_split(["a", "b"], 1.0, 1)
    plan = make_split(["a", "b", "c"], 0.0, 1)
    assert plan.folds == [] and plan.test_subjects == []


def test_phantom_is_deterministic_and_annular():
    a = generate_phantom(2, 3, 32, 32, seed=4)
    b = generate_phantom(2, 3, 32, 32, seed=4)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert generate_phantom(1, 3, 32, 32, seed=5)[0].image.tobytes() != a[0].image.tobytes()
    for t in range(3):
        mask = a[0].mask[t].astype(bool)
        _, ring = ndimage.label(mask)
        _, background = ndimage.label(~mask)
        assert ring == 1 and background == 2
    with pytest.raises(ConfigError):
        generate_phantom(1, 2, 31, 32)


def test_phantom_subject_grouping():
    recs = generate_phantom(4, 1, 16, 16, spec=PhantomSpec(records_per_subject=2))
    assert [r.name for r in recs] == ["P000/s00", "P000/s01", "P001/s00", "P001/s01"]


def test_store_access_log_and_leakage(tmp_path):
    recs = generate_phantom(4, 1, 16, 16, spec=PhantomSpec(records_per_subject=2))
    save_dataset(recs, tmp_path)
    store = RecordStore.open(tmp_path)
    assert len(store) == 4 and store.indices_for(["P001"]) == [2, 3]
    store.forbid(["P001"])
    store.get(0)
    with pytest.raises(LeakageError):
        store.get(3)
    assert store.subjects_touched() == {"P000"}
    store.allow_all()
    assert store.get(3).name == "P001/s01"


def test_manifest_rejects_duplicates():
    entry = ManifestEntry("A", "s", "A_s")
    with pytest.raises(DataError):
        DatasetManifest([entry, entry]).validate()
