import numpy as np
import pytest

from helpers import random_scene
from splatstream.core import SplatCloud
from splatstream.errors import (
    ModelFormatError,
    ModelValidationError,
    PlySchemaError,
)
from splatstream.modelstore import (
    export_ply,
    import_ply,
    load,
    pack_gaussian_block,
    save,
    unpack_gaussian_block,
)


def random_cloud(rng, n=None, degree=None):
    n = int(rng.integers(1, 40)) if n is None else n
    degree = int(rng.integers(0, 4)) if degree is None else degree
    k = (degree + 1) ** 2
    cloud = SplatCloud.from_arrays(
        positions=rng.normal(scale=3.0, size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(-3, 0, size=(n, 3)),
        sh=rng.normal(size=(n, k, 3)),
        opacity_logits=rng.normal(size=n),
        sh_degree=degree,
        revision=int(rng.integers(1, 1000)),
    )
    return cloud


def clouds_equal(a, b):
    return (np.array_equal(a.positions, b.positions)
            and np.array_equal(a.rotations, b.rotations)
            and np.array_equal(a.log_scales, b.log_scales)
            and np.array_equal(a.sh, b.sh)
            and np.array_equal(a.opacity_logits, b.opacity_logits)
            and np.array_equal(a.ids, b.ids)
            and a.sh_degree == b.sh_degree
            and a.revision == b.revision)


class TestSplmRoundtrip:
    def test_empty_cloud(self, tmp_path):
        cloud = SplatCloud(sh_degree=2)
        cloud.revision = 7
        path = tmp_path / "empty.splm"
        nbytes = save(cloud, path)
        assert nbytes == path.stat().st_size
        again = load(path)
        assert len(again) == 0
        assert again.sh_degree == 2
        assert again.revision == 7

    def test_random_clouds_bit_exact(self, tmp_path):
        rng = np.random.default_rng(60)
        for i in range(25):
            cloud = random_cloud(rng)
            path = tmp_path / f"c{i}.splm"
            save(cloud, path)
            assert clouds_equal(cloud, load(path))

    def test_nonzero_id_base_preserved(self, tmp_path):
        rng = np.random.default_rng(61)
        cloud = random_cloud(rng, n=6)
        cloud.keep(np.array([False, True, False, True, True, True]))
        path = tmp_path / "gaps.splm"
        save(cloud, path)
        again = load(path)
        assert again.ids.tolist() == cloud.ids.tolist()

    def test_grid_covers_each_gaussian_once(self, tmp_path):
        rng = np.random.default_rng(62)
        cloud = random_cloud(rng, n=50)
        path = tmp_path / "grid.splm"
        save(cloud, path)
        again = load(path)
        members = np.concatenate(list(again.tiling.values()))
        assert sorted(members.tolist()) == sorted(again.ids.tolist())
        assert again.grid_cell_size == pytest.approx(cloud.grid_cell_size,
                                                     rel=1e-6)

    def test_truncation_never_yields_partial_cloud(self, tmp_path):
        rng = np.random.default_rng(63)
        cloud = random_cloud(rng, n=3, degree=1)
        path = tmp_path / "full.splm"
        save(cloud, path)
        blob = path.read_bytes()
        trunc = tmp_path / "trunc.splm"
        for cut in range(len(blob)):
            trunc.write_bytes(blob[:cut])
            with pytest.raises(ModelFormatError):
                load(trunc)

    def test_nan_parameters_rejected_with_indices(self, tmp_path):
        rng = np.random.default_rng(64)
        cloud = random_cloud(rng, n=5, degree=0)
        cloud.positions[2, 1] = np.nan
        path = tmp_path / "nan.splm"
        save(cloud, path)
        with pytest.raises(ModelValidationError) as info:
            load(path)
        assert ("positions", 2) in info.value.indices

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.splm"
        rng = np.random.default_rng(65)
        save(random_cloud(rng, n=2), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError):
            load(path)

    def test_atomic_save_leaves_no_temp_files(self, tmp_path):
        rng = np.random.default_rng(66)
        save(random_cloud(rng), tmp_path / "a.splm")
        leftovers = [p for p in tmp_path.iterdir() if p.name != "a.splm"]
        assert leftovers == []


class TestPly:
    def test_roundtrip_exact_in_f32(self, tmp_path):
        rng = np.random.default_rng(67)
        for degree in range(4):
            cloud = random_cloud(rng, n=12, degree=degree)
            path = tmp_path / f"d{degree}.ply"
            export_ply(cloud, path)
            again = import_ply(path)
            assert np.array_equal(cloud.positions, again.positions)
            assert np.array_equal(cloud.rotations, again.rotations)
            assert np.array_equal(cloud.log_scales, again.log_scales)
            assert np.array_equal(cloud.sh, again.sh)
            assert np.array_equal(cloud.opacity_logits, again.opacity_logits)
            assert again.ids.tolist() == list(range(12))

    def test_handcrafted_single_gaussian(self, tmp_path):
        # build the file per the documented layout, degree 0
        names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1",
                 "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
                 "rot_0", "rot_1", "rot_2", "rot_3"]
        header = ["ply", "format binary_little_endian 1.0",
                  "element vertex 1"]
        header += [f"property float {n}" for n in names]
        header += ["end_header", ""]
        row = np.array([1.0, 2.0, 3.0, 0, 0, 0, 0.5, -0.25, 0.125,
                        -2.197224577, np.log(0.1), np.log(0.2), np.log(0.3),
                        1.0, 0.0, 0.0, 0.0], dtype="<f4")
        path = tmp_path / "hand.ply"
        path.write_bytes("\n".join(header).encode() + row.tobytes())
        cloud = import_ply(path)
        assert len(cloud) == 1
        assert cloud.sh_degree == 0
        assert np.allclose(cloud.positions[0], [1, 2, 3])
        assert np.allclose(cloud.sh[0, 0], [0.5, -0.25, 0.125])
        assert cloud.opacity_logits[0] == pytest.approx(-2.197224577)

    def test_missing_property_named(self, tmp_path):
        names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2"]
        header = ["ply", "format binary_little_endian 1.0",
                  "element vertex 0"]
        header += [f"property float {n}" for n in names]
        header += ["end_header", ""]
        path = tmp_path / "missing.ply"
        path.write_bytes("\n".join(header).encode())
        with pytest.raises(PlySchemaError) as info:
            import_ply(path)
        assert info.value.property == "rot_3"

    def test_reference_layout_import_renders(self, tmp_path):
        # a degree-3 file laid out exactly like the public splat exporters
        # (f_rest channel-major), imported and pushed through the renderer
        rng = np.random.default_rng(68)
        from helpers import random_scene
        from splatstream.rasterizer import rasterize

        cloud, pose, intr = random_scene(rng, n_gaussians=15, width=32,
                                         height=32, degree=3)
        path = tmp_path / "ref.ply"
        export_ply(cloud, path)
        imported = import_ply(path)
        img = rasterize(imported, pose, intr)
        ref = rasterize(cloud, pose, intr)
        assert np.array_equal(img.pixels, ref.pixels)


class TestGaussianBlock:
    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(69)
        cloud = random_cloud(rng, n=9, degree=1)
        blob = pack_gaussian_block(cloud, [2, 5, 7])
        out, end = unpack_gaussian_block(blob, 3, 1)
        assert end == len(blob)
        assert np.array_equal(out["positions"], cloud.positions[[2, 5, 7]])
        assert np.array_equal(out["sh"], cloud.sh[[2, 5, 7]])
        assert np.array_equal(out["ids"], cloud.ids[[2, 5, 7]])

    def test_short_block_rejected(self):
        with pytest.raises(ModelFormatError):
            unpack_gaussian_block(b"\x00" * 10, 2, 0)
