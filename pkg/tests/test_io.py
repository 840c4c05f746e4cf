import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_seg.config import ConfigError, load_config
from cascade_seg.nifti import (
    DEFAULT_VOX_OFFSET,
    FormatError,
    make_header,
    parse_header,
    read_nifti,
    read_sidecar,
    write_nifti,
    write_sidecar,
)
from cascade_seg.phantom import PhantomSpec, cohort_specs, generate_phantom, phantom_anatomy
from cascade_seg.volume import GeometryError, LabelMap, Volume, extract_slices, stack_slices, zscore_normalize


def raw_nifti(hdr, data: np.ndarray) -> bytes:
    return hdr.tobytes() + b"\x00" * (DEFAULT_VOX_OFFSET - 348) + data.tobytes(order="F")


# -- volumes ----------------------------------------------------------------


def test_volume_invariants():
    v = Volume(np.zeros((3, 4, 5)), (1.667, 1.667, 10.0))
    assert v.extents == (3, 4, 5)
    assert v.voxels.size == 3 * 4 * 5
    assert v.voxel_volume_mm3 == pytest.approx(1.667 * 1.667 * 10.0)
    with pytest.raises(GeometryError):
        Volume(np.zeros((3, 4, 5)), (1.0, 0.0, 1.0))
    with pytest.raises(GeometryError):
        Volume(np.zeros((3, 4)), (1.0, 1.0, 1.0))


def test_labelmap_vocabulary():
    assert LabelMap(np.arange(5).reshape(5, 1, 1)).voxels.dtype == np.uint8
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2, 2), 5))
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2, 2), -1))


# -- NIfTI ------------------------------------------------------------------


def test_nifti_float_roundtrip(tmp_path):
    vox = np.random.default_rng(0).standard_normal((4, 4, 2)).astype(np.float32)
    v = Volume(vox, (1.667, 1.667, 10.0), "case")
    write_nifti(v, tmp_path / "case.nii")
    back = read_nifti(tmp_path / "case.nii")
    assert back.voxels.dtype == np.float32
    assert np.array_equal(back.voxels, vox)
    assert back.spacing == (1.667, 1.667, 10.0)
    assert back == v


def test_nifti_label_roundtrip(tmp_path):
    lab = LabelMap(np.random.default_rng(1).integers(0, 5, (5, 6, 3)), (2.0, 2.5, 8.0), "seg")
    write_nifti(lab, tmp_path / "seg.nii")
    back = read_nifti(tmp_path / "seg.nii")
    assert isinstance(back, LabelMap)
    assert back == lab


def test_nifti_int16_roundtrip(tmp_path):
    v = Volume(np.arange(24, dtype=np.int16).reshape(2, 3, 4) - 10, (1.0, 1.0, 1.0), "i")
    write_nifti(v, tmp_path / "i.nii")
    assert read_nifti(tmp_path / "i.nii") == v


def test_header_166_270_7(tmp_path):
    hdr = make_header((166, 270, 7), (1.667, 1.667, 10.0), np.uint8)
    parsed = parse_header(hdr.tobytes())
    assert parsed["dim"][:4].tolist() == [3, 166, 270, 7]
    path = tmp_path / "n042.nii"
    path.write_bytes(raw_nifti(hdr, np.zeros((166, 270, 7), np.uint8)))
    v = read_nifti(path)
    assert v.extents == (166, 270, 7)
    assert v.spacing == (1.667, 1.667, 10.0)


def test_header_scaling_applied(tmp_path):
    hdr = make_header((1, 1, 1), (1.0, 1.0, 1.0), np.int16)
    hdr["scl_slope"] = 2.0
    hdr["scl_inter"] = 1.0
    path = tmp_path / "s.nii"
    path.write_bytes(raw_nifti(hdr, np.array([[[3]]], dtype="<i2")))
    assert read_nifti(path).voxels[0, 0, 0] == 7.0


def test_fortran_order_is_x_fastest(tmp_path):
    hdr = make_header((2, 3, 1), (1.0, 1.0, 1.0), np.uint8)
    path = tmp_path / "o.nii"
    # bytes run over x first
    path.write_bytes(hdr.tobytes() + b"\x00" * 4 + bytes([0, 1, 2, 3, 4, 0]))
    v = read_nifti(path, labels=False)
    assert v.voxels[:, :, 0].tolist() == [[0, 2, 4], [1, 3, 0]]


def test_vox_offset_honored(tmp_path):
    hdr = make_header((2, 2, 1), (1.0, 1.0, 1.0), np.float32, vox_offset=400)
    data = np.arange(4, dtype="<f4").reshape(2, 2, 1)
    path = tmp_path / "off.nii"
    path.write_bytes(hdr.tobytes() + b"\xff" * (400 - 348) + data.tobytes(order="F"))
    assert np.array_equal(read_nifti(path).voxels, data)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda b: b[:100], "sizeof_hdr"),
        (lambda b: b"\x00\x00\x01\x5c" + b[4:], "sizeof_hdr"),
        (lambda b: b[:344] + b"ni1\x00" + b[348:], "magic"),
        (lambda b: b[:-3], "vox_offset"),
    ],
)
def test_corrupted_headers_raise_format_error(tmp_path, mutate, field):
    path = tmp_path / "x.nii"
    write_nifti(Volume(np.ones((3, 3, 2), np.float32)), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as info:
        read_nifti(path)
    assert info.value.field == field
    assert str(path) in str(info.value)


def test_unsupported_datatype(tmp_path):
    hdr = make_header((1, 1, 1), (1.0, 1.0, 1.0), np.float32)
    hdr["datatype"] = 64
    hdr["bitpix"] = 64
    path = tmp_path / "d.nii"
    path.write_bytes(raw_nifti(hdr, np.zeros(1)))
    with pytest.raises(FormatError) as info:
        read_nifti(path)
    assert info.value.field == "datatype"


@settings(max_examples=200, deadline=None)
@given(pos=st.integers(0, 347), value=st.integers(0, 255))
def test_header_byte_corruption_never_crashes(tmp_path_factory, pos, value):
    path = tmp_path_factory.mktemp("fuzz") / "f.nii"
    write_nifti(LabelMap(np.ones((3, 3, 2), np.uint8)), path)
    data = bytearray(path.read_bytes())
    data[pos] = value
    path.write_bytes(bytes(data))
    try:
        read_nifti(path)
    except FormatError:
        pass


# -- sidecar ----------------------------------------------------------------


def test_sidecar_roundtrip(tmp_path):
    arr = np.random.default_rng(0).random((5, 4, 3, 2)).astype(np.float32)
    write_sidecar(arr, tmp_path / "p", (1.667, 1.667, 10.0), "c1", channels=[f"p{i}" for i in range(5)])
    back, meta = read_sidecar(tmp_path / "p")
    assert np.array_equal(back, arr)
    assert meta == {
        "case_id": "c1",
        "extents": [4, 3, 2],
        "spacing_mm": [1.667, 1.667, 10.0],
        "dtype": "<f4",
        "channels": ["p0", "p1", "p2", "p3", "p4"],
    }


def test_sidecar_schema_violation(tmp_path):
    write_sidecar(np.zeros((2, 2, 2), np.uint8), tmp_path / "s", (1, 1, 1))
    meta = json.loads((tmp_path / "s.json").read_text())
    meta["extents"] = [2, 2]
    (tmp_path / "s.json").write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        read_sidecar(tmp_path / "s")


def test_sidecar_size_mismatch(tmp_path):
    write_sidecar(np.zeros((2, 2, 2), np.uint8), tmp_path / "s", (1, 1, 1))
    (tmp_path / "s.raw").write_bytes(b"\x00" * 7)
    with pytest.raises(FormatError):
        read_sidecar(tmp_path / "s")


# -- normalization and slicing ----------------------------------------------


def test_zscore_constant_volume():
    out = zscore_normalize(Volume(np.full((3, 3, 3), 7.0)))
    assert np.all(out.voxels == 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3), shift=st.floats(-1e3, 1e3))
def test_zscore_statistics_and_idempotence(seed, scale, shift):
    x = np.random.default_rng(seed).standard_normal((6, 5, 4)) * scale + shift
    once = zscore_normalize(Volume(x))
    assert abs(once.voxels.mean()) < 1e-9
    assert abs(once.voxels.var() - 1) < 1e-6
    twice = zscore_normalize(once)
    np.testing.assert_allclose(twice.voxels, once.voxels, atol=1e-6)


def test_extract_slices_native_shape():
    v = Volume(np.zeros((166, 270, 7), np.float32), (1.667, 1.667, 10.0))
    slices = extract_slices(v)
    assert len(slices) == 7
    assert all(s.shape == (166, 270) for s in slices)


def test_slices_roundtrip_and_single():
    v = Volume(np.random.default_rng(0).random((4, 5, 3)), (1.0, 2.0, 3.0), "c")
    assert stack_slices(extract_slices(v), v.spacing, "c") == v
    one = Volume(np.ones((4, 4, 1)))
    assert len(extract_slices(one)) == 1
    with pytest.raises(GeometryError):
        stack_slices([np.zeros((2, 2)), np.zeros((2, 3))])


# -- phantoms ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), pathological=st.booleans())
def test_phantom_construction_invariants(seed, pathological):
    spec = PhantomSpec(seed=seed, extents=(48, 48, 6), spacing=(2.0, 2.0, 10.0), pathological=pathological, noreflow_probability=0.7)
    image, labels = generate_phantom(spec)
    anatomy = phantom_anatomy(spec)
    lab = labels.voxels
    assert image.same_geometry(labels)
    assert set(np.unique(lab)) <= {0, 1, 2, 3, 4}
    assert not np.any(anatomy.cavity & anatomy.annulus)
    assert np.all(anatomy.annulus[lab == 4])
    assert np.all(anatomy.wedge[lab == 4])
    assert np.all(anatomy.annulus[lab == 3] & anatomy.wedge[lab == 3])
    assert np.all(np.isin(lab[anatomy.annulus], [2, 3, 4]))
    if not pathological:
        assert not np.any(np.isin(lab, [3, 4]))
    assert np.all(np.isfinite(image.voxels))


def test_phantom_deterministic():
    a = generate_phantom(PhantomSpec(seed=11))
    b = generate_phantom(PhantomSpec(seed=11))
    c = generate_phantom(PhantomSpec(seed=12))
    assert a[0] == b[0] and a[1] == b[1]
    assert not np.array_equal(a[0].voxels, c[0].voxels)


def test_phantom_default_geometry_and_contrast():
    image, labels = generate_phantom(PhantomSpec(seed=3, noise_sigma=0.0))
    assert image.extents == (64, 64, 8)
    assert image.spacing == (1.667, 1.667, 10.0)
    lab, img = labels.voxels, image.voxels
    assert img[lab == 1].mean() > img[lab == 2].mean()
    if np.any(lab == 3):
        assert img[lab == 3].mean() > img[lab == 2].mean()


def test_cohort_pathology_rate():
    specs = cohort_specs(100, seed=0, pathology_rate=0.67)
    n = sum(s.pathological for s in specs)
    assert 60 <= n <= 74
    assert len({s.case_id for s in specs}) == 100
    assert cohort_specs(100, seed=0) == specs


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(cavity_radius_mm=(15, 25), outer_radius_mm=(20, 26)).validate()
    with pytest.raises(ValueError):
        PhantomSpec(noreflow_probability=1.5).validate()


# -- configuration ----------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 4\nfolds: 3\ntrain3d: {epochs: 2}\nmodel2d: {depth: 2}\n")
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.folds == 3
    assert cfg.train3d.epochs == 2 and cfg.train3d.lr0 == 0.01
    assert cfg.unet2d().depth == 2 and cfg.unet2d().base_channels == 8
    cfg.dump(tmp_path / "again.yaml")
    assert load_config(tmp_path / "again.yaml") == cfg


@pytest.mark.parametrize(
    "text",
    ["sed: 1\n", "folds: 1\n", "train2d: {epochs: 0}\n", "model3d: {pool_factors: [[2, 2]]}\n", "[1, 2]\n", "dtype: float16\n"],
)
def test_config_rejects_invalid(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)
