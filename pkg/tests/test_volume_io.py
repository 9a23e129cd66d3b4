import gzip
import struct

import numpy as np
import pytest

from dwiseg.errors import FormatError, GeometryError, ShapeError, UnsupportedError, ValidationError
from dwiseg.io import read_gradient_table, read_nifti, write_gradient_table, write_nifti
from dwiseg.volume import (GradientTable, LabelVolume, Volume, multishell_table, voxel_to_world,
                           world_to_voxel)

nib = pytest.importorskip("nibabel")


def random_affine(rng):
    a = np.eye(4)
    a[:3, :3] = rng.normal(size=(3, 3)) + 2 * np.eye(3)
    a[:3, 3] = rng.normal(scale=20, size=3)
    return a


def rigid_affine(rng, zooms=(1.25, 1.5, 2.0)):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    a = np.eye(4)
    a[:3, :3] = q * np.asarray(zooms)
    a[:3, 3] = rng.normal(scale=30, size=3)
    return a


# --- geometry ---

def test_volume_rejects_singular_affine():
    with pytest.raises(GeometryError):
        Volume(np.zeros((2, 2, 2)), np.diag([1.0, 0.0, 1.0, 1.0]))


def test_volume_rejects_bad_shape():
    with pytest.raises(ShapeError):
        Volume(np.zeros((4, 4)))


def test_volume_is_read_only():
    v = Volume(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_voxel_size_is_column_norm():
    rng = np.random.default_rng(0)
    a = random_affine(rng)
    v = Volume(np.zeros((2, 2, 2)), a)
    np.testing.assert_allclose(v.voxel_size, np.linalg.norm(a[:3, :3], axis=0), rtol=1e-12)


def test_label_table_must_cover_labels():
    with pytest.raises(ValidationError):
        LabelVolume(np.array([[[0, 1], [2, 2]]]), np.eye(4), {0: "bg", 1: "a"})


def test_world_to_voxel_examples():
    assert np.allclose(world_to_voxel(np.eye(4), (3, 4, 5)), (3, 4, 5))
    a = np.diag([2.0, 2.0, 2.0, 1.0])
    assert np.allclose(world_to_voxel(Volume(np.zeros((2, 2, 2)), a), (4, 4, 4)), (2, 2, 2))


def test_world_to_voxel_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = random_affine(rng)
        ijk = rng.uniform(-10, 70, size=(20, 3))
        back = world_to_voxel(a, voxel_to_world(a, ijk))
        assert np.max(np.abs(back - ijk)) < 1e-6
        # independent oracle: explicit matrix inverse
        pts = voxel_to_world(a, ijk)
        inv = np.linalg.inv(a)
        np.testing.assert_allclose(world_to_voxel(a, pts), pts @ inv[:3, :3].T + inv[:3, 3],
                                   atol=1e-8)


def test_world_to_voxel_singular():
    with pytest.raises(GeometryError):
        world_to_voxel(np.diag([1.0, 1.0, 0.0, 1.0]), (1, 2, 3))


# --- NIfTI ---

@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_round_trip(tmp_path, dtype, suffix):
    rng = np.random.default_rng(2)
    data = rng.integers(0, 200, size=(5, 6, 7)).astype(np.float32)
    if np.issubdtype(dtype, np.floating):
        data = rng.normal(size=(5, 6, 7, 3)).astype(np.float32)
    v = Volume(data, rigid_affine(rng))
    p = tmp_path / f"v{suffix}"
    write_nifti(v, p, dtype=dtype)
    back = read_nifti(p)
    assert np.array_equal(back.data, v.data)
    assert np.max(np.abs(back.affine - v.affine)) < 1e-5


def test_zero_volume(tmp_path):
    p = tmp_path / "z.nii.gz"
    write_nifti(Volume(np.zeros((64, 64, 64), np.float32), np.eye(4)), p)
    v = read_nifti(p)
    assert v.dims == (64, 64, 64) and not v.data.any()


def test_labels_round_trip(tmp_path):
    lab = LabelVolume(np.arange(24).reshape(2, 3, 4) % 3, np.diag([2, 2, 2, 1.0]),
                      {0: "background", 1: "cortex", 2: "white_matter"})
    p = tmp_path / "lab.nii.gz"
    write_nifti(lab, p)
    back = read_nifti(p)
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.labels, lab.labels)
    assert back.label_table == lab.label_table


def test_matches_external_reader(tmp_path):
    rng = np.random.default_rng(3)
    v = Volume(rng.normal(size=(4, 5, 6, 2)).astype(np.float32), rigid_affine(rng))
    p = tmp_path / "x.nii.gz"
    write_nifti(v, p)
    img = nib.load(str(p))
    assert np.array_equal(np.asarray(img.dataobj), v.data)
    np.testing.assert_allclose(img.affine, v.affine, atol=1e-5)
    qf = img.get_qform()
    np.testing.assert_allclose(qf, v.affine, atol=1e-4)


def test_reads_external_file_with_scaling(tmp_path):
    data = np.full((2, 2, 2), 3, dtype=np.int16)
    img = nib.Nifti1Image(data, np.diag([1.5, 1.5, 1.5, 1.0]))
    img.header.set_slope_inter(2.0, 1.0)
    p = tmp_path / "scaled.nii"
    nib.save(img, str(p))
    v = read_nifti(p)
    assert np.all(v.data == 7.0)
    assert np.allclose(np.asarray(nib.load(str(p)).get_fdata()), 7.0)
    np.testing.assert_allclose(v.affine, np.diag([1.5, 1.5, 1.5, 1.0]))


def test_qform_only_file(tmp_path):
    rng = np.random.default_rng(4)
    a = rigid_affine(rng)
    img = nib.Nifti1Image(np.ones((3, 3, 3), np.float32), None)
    img.set_qform(a, code=1)
    img.set_sform(None, code=0)
    p = tmp_path / "q.nii"
    nib.save(img, str(p))
    np.testing.assert_allclose(read_nifti(p).affine, a, atol=1e-5)


def test_sform_preferred(tmp_path):
    img = nib.Nifti1Image(np.ones((3, 3, 3), np.float32), None)
    img.set_qform(np.diag([1.0, 1.0, 1.0, 1.0]), code=1)
    s = np.diag([2.0, 3.0, 4.0, 1.0])
    img.set_sform(s, code=2)
    p = tmp_path / "s.nii"
    nib.save(img, str(p))
    np.testing.assert_allclose(read_nifti(p).affine, s)


def test_big_endian_twin(tmp_path):
    rng = np.random.default_rng(5)
    v = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), rigid_affine(rng))
    write_nifti(v, tmp_path / "le.nii", byteorder="<")
    write_nifti(v, tmp_path / "be.nii", byteorder=">")
    raw = (tmp_path / "be.nii").read_bytes()
    assert struct.unpack("<i", raw[:4])[0] != 348 and struct.unpack(">i", raw[:4])[0] == 348
    le, be = read_nifti(tmp_path / "le.nii"), read_nifti(tmp_path / "be.nii")
    assert np.array_equal(le.data, be.data) and np.array_equal(le.affine, be.affine)


def test_bad_header(tmp_path):
    p = tmp_path / "bad.nii"
    p.write_bytes(b"\x00" * 400)
    with pytest.raises(FormatError):
        read_nifti(p)


def test_unsupported_datatype(tmp_path):
    img = nib.Nifti1Image(np.ones((2, 2, 2), np.complex64), np.eye(4))
    p = tmp_path / "c.nii"
    nib.save(img, str(p))
    with pytest.raises(UnsupportedError):
        read_nifti(p)


def test_gzip_output_is_deterministic(tmp_path):
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes())[344:348] == b"n+1\x00"


# --- gradient tables ---

def test_gradient_table_small(tmp_path):
    (tmp_path / "bvals").write_text("0 1000\n")
    (tmp_path / "bvecs").write_text("0 1\n0 0\n0 0\n")
    t = read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")
    assert t.n == 2 and np.allclose(t.bvecs[1], (1, 0, 0))


def test_gradient_table_renormalises(tmp_path):
    (tmp_path / "bvals").write_text("0 1000\n")
    (tmp_path / "bvecs").write_text("0 2\n0 0\n0 0\n")
    t = read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")
    assert np.allclose(t.bvecs[1], (1, 0, 0))


def test_gradient_table_288(tmp_path):
    t = multishell_table()
    write_gradient_table(t, tmp_path / "bvals", tmp_path / "bvecs")
    back = read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")
    assert back.n == 288
    assert int(np.sum(back.bvals == 0)) == 18
    assert np.allclose(back.bvecs, t.bvecs, atol=1e-7)


def test_gradient_table_errors(tmp_path):
    (tmp_path / "bvals").write_text("0 1000 2000\n")
    (tmp_path / "bvecs").write_text("0 1\n0 0\n0 0\n")
    with pytest.raises(FormatError):
        read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")
    (tmp_path / "bvals").write_text("0 -5\n")
    with pytest.raises(ValidationError):
        read_gradient_table(tmp_path / "bvals", tmp_path / "bvecs")


def test_gradient_table_requires_unit_directions():
    with pytest.raises(ValidationError):
        GradientTable([0, 1000], [[0, 0, 0], [0.5, 0, 0]])
