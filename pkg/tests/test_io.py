import json
import struct

import numpy as np
import pytest

import voxreg as vr
from voxreg import io as vio
from voxreg.errors import (
    DimensionalityError,
    MetaImageError,
    PayloadSizeError,
    UnsupportedElementTypeError,
    ValidationError,
)
from voxreg.optimizer import ObjectiveConfig


class TestMetaImageRoundTrip:
    @pytest.mark.parametrize(
        "element_type,values",
        [
            ("MET_UCHAR", np.arange(24).reshape(2, 3, 4) % 200 + 2),
            ("MET_SHORT", np.arange(24).reshape(2, 3, 4) * -31 + 500),
            ("MET_FLOAT", np.arange(24).reshape(2, 3, 4) * 0.37 - 1.5),
        ],
    )
    def test_volume_bitwise(self, tmp_path, element_type, values):
        v = vr.Volume(values.astype(float), (0.5, 0.75, 1.25), (-3.0, 2.0, 1.0),
                      element_type=element_type)
        path = tmp_path / "vol.mha"
        vio.write_metaimage(v, path)
        back = vio.read_metaimage(path)
        assert isinstance(back, vr.Volume)
        assert back.dims == v.dims
        assert back.spacing == v.spacing
        assert back.origin == v.origin
        native = v.data.astype(vio._ELEMENT_TYPES[element_type])
        assert np.array_equal(back.data.astype(vio._ELEMENT_TYPES[element_type]), native)
        # writing the read-back volume reproduces the file byte for byte
        path2 = tmp_path / "vol2.mha"
        vio.write_metaimage(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_mask_roundtrip(self, tmp_path, rng):
        m = vr.BinaryMask(rng.random((4, 5, 6)) < 0.5, (1.0, 1.0, 2.0), (0.0, 1.0, 2.0))
        path = tmp_path / "mask.mha"
        vio.write_metaimage(m, path)
        back = vio.read_metaimage(path)
        assert isinstance(back, vr.BinaryMask)
        assert np.array_equal(back.data, m.data)
        assert back.spacing == m.spacing

    def test_uchar_with_other_values_reads_as_volume(self, tmp_path):
        v = vr.Volume(np.full((2, 2, 2), 7.0), (1, 1, 1), element_type="MET_UCHAR")
        path = tmp_path / "v.mha"
        vio.write_metaimage(v, path)
        assert isinstance(vio.read_metaimage(path), vr.Volume)


def write_raw_mha(path, header_lines, payload):
    with open(path, "wb") as f:
        f.write(("\n".join(header_lines) + "\n").encode())
        f.write(payload)


class TestMetaImageErrors:
    def test_unknown_element_type(self, tmp_path):
        path = tmp_path / "bad.mha"
        write_raw_mha(path, [
            "NDims = 3", "DimSize = 2 2 2", "ElementType = MET_DOUBLE",
            "ElementDataFile = LOCAL",
        ], b"\x00" * 64)
        with pytest.raises(UnsupportedElementTypeError):
            vio.read_metaimage(path)

    def test_payload_length_mismatch(self, tmp_path):
        path = tmp_path / "short.mha"
        write_raw_mha(path, [
            "NDims = 3", "DimSize = 2 2 2", "ElementType = MET_SHORT",
            "ElementDataFile = LOCAL",
        ], b"\x00" * 15)
        with pytest.raises(PayloadSizeError) as err:
            vio.read_metaimage(path)
        assert "15" in str(err.value) and "16" in str(err.value)

    def test_wrong_ndims(self, tmp_path):
        path = tmp_path / "nd.mha"
        write_raw_mha(path, [
            "NDims = 2", "DimSize = 2 2 2", "ElementType = MET_FLOAT",
            "ElementDataFile = LOCAL",
        ], b"\x00" * 32)
        with pytest.raises(DimensionalityError):
            vio.read_metaimage(path)

    def test_missing_element_data_file(self, tmp_path):
        path = tmp_path / "trunc.mha"
        path.write_bytes(b"NDims = 3\nDimSize = 2 2 2\n")
        with pytest.raises(MetaImageError):
            vio.read_metaimage(path)

    def test_compressed_rejected(self, tmp_path):
        path = tmp_path / "comp.mha"
        write_raw_mha(path, [
            "NDims = 3", "DimSize = 2 2 2", "CompressedData = True",
            "ElementType = MET_FLOAT", "ElementDataFile = LOCAL",
        ], b"\x00" * 32)
        with pytest.raises(MetaImageError):
            vio.read_metaimage(path)

    def test_bad_header_line_names_line(self, tmp_path):
        path = tmp_path / "junk.mha"
        path.write_bytes(b"NDims = 3\nthis is junk\nElementDataFile = LOCAL\n")
        with pytest.raises(MetaImageError) as err:
            vio.read_metaimage(path)
        assert "line 2" in str(err.value)


class TestHandBuiltFixture:
    def test_known_little_endian_bytes(self, tmp_path):
        # byte-level fixture assembled independently with struct
        values = [0, 1, -2, 3, 40, -500, 6, 7]
        payload = b"".join(struct.pack("<h", v) for v in values)
        path = tmp_path / "hand.mha"
        write_raw_mha(path, [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryDataByteOrderMSB = False",
            "DimSize = 2 2 2",
            "ElementSpacing = 1 1 1",
            "Offset = 0 0 0",
            "ElementType = MET_SHORT",
            "ElementDataFile = LOCAL",
        ], payload)
        v = vio.read_metaimage(path)
        assert v.data.ravel().tolist() == values  # x-fastest order

    def test_big_endian_flag_honored(self, tmp_path):
        values = [0, 1, -2, 3, 40, -500, 6, 7]
        payload = b"".join(struct.pack(">h", v) for v in values)
        path = tmp_path / "be.mha"
        write_raw_mha(path, [
            "NDims = 3",
            "BinaryDataByteOrderMSB = True",
            "DimSize = 2 2 2",
            "ElementType = MET_SHORT",
            "ElementDataFile = LOCAL",
        ], payload)
        v = vio.read_metaimage(path)
        assert v.data.ravel().tolist() == values

    def test_external_raw_file(self, tmp_path):
        values = np.arange(8, dtype="<f4")
        (tmp_path / "vol.raw").write_bytes(values.tobytes())
        path = tmp_path / "vol.mhd"
        write_raw_mha(path, [
            "NDims = 3",
            "DimSize = 2 2 2",
            "ElementType = MET_FLOAT",
            "ElementDataFile = vol.raw",
        ], b"")
        v = vio.read_metaimage(path)
        assert np.allclose(v.data.ravel(), values)


class TestLandmarks:
    def test_three_valid_lines(self, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text(
            "# comment\n"
            "0 0 0  1 1 1\n"
            "5 0 0  6 1 1\n\n"
            "0 5 0  1 6 1  # inline comment\n"
        )
        lm = vio.read_landmarks(path)
        assert len(lm) == 3
        assert np.allclose(lm.targets[0], [1, 1, 1])

    def test_two_lines_rejected(self, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text("0 0 0 1 1 1\n5 0 0 6 1 1\n")
        with pytest.raises(ValidationError):
            vio.read_landmarks(path)

    def test_bad_token_names_line(self, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text("0 0 0 1 1 1\n5 0 x 6 1 1\n0 5 0 1 6 1\n")
        with pytest.raises(ValidationError) as err:
            vio.read_landmarks(path)
        assert "line 2" in str(err.value)

    def test_roundtrip(self, tmp_path, rng):
        lm = vr.LandmarkSet(rng.uniform(size=(4, 3)), rng.uniform(size=(4, 3)))
        path = tmp_path / "lm.txt"
        vio.write_landmarks(lm, path)
        back = vio.read_landmarks(path)
        assert np.allclose(back.sources, lm.sources)
        assert np.allclose(back.targets, lm.targets)


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = ObjectiveConfig(alpha=0.01, bins=32)
        path = tmp_path / "cfg.json"
        vio.write_config(cfg, path)
        assert vio.read_config(path) == cfg

    def test_toml(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("alpha = 0.2\nbins = 16\nlevels = 2\n")
        cfg = vio.read_config(path)
        assert cfg.alpha == 0.2 and cfg.bins == 16

    def test_weight_constraint_diagnostic(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"alpha": 0.5, "beta": 0.3, "gamma": 0.2}))
        with pytest.raises(ValidationError) as err:
            vio.read_config(path)
        assert "alpha + beta + gamma" in str(err.value)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"alhpa": 0.5}))
        with pytest.raises(ValidationError) as err:
            vio.read_config(path)
        assert "alhpa" in str(err.value)


class TestAffineAndLattice:
    def test_affine_roundtrip(self, tmp_path, rng):
        a = vr.AffineTransform(np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3)),
                               rng.uniform(-5, 5, 3))
        path = tmp_path / "affine.json"
        vio.write_affine(a, path)
        back = vio.read_affine(path)
        assert np.allclose(back.matrix, a.matrix)
        assert np.allclose(back.translation, a.translation)
        doc = json.loads(path.read_text())
        assert len(doc["affine"]) == 12

    def test_lattice_roundtrip(self, tmp_path, rng):
        lat = vr.lattice_covering((0, 0, 0), (10, 10, 10), (2.5, 2.5, 2.5))
        lat = lat.with_coefficients(
            rng.normal(size=lat.coefficients.shape).astype(np.float32).astype(float)
        )
        stem = tmp_path / "lat"
        vio.write_lattice(lat, stem)
        back = vio.read_lattice(stem)
        assert back.grid_dims == lat.grid_dims
        assert back.spacing == lat.spacing
        assert back.origin == lat.origin
        assert np.array_equal(back.coefficients, lat.coefficients)

    def test_write_result(self, tmp_path, rng):
        from voxreg.optimizer import RegistrationResult, TraceRow

        lat = vr.lattice_covering((0, 0, 0), (8, 8, 8), (4.0, 4.0, 4.0))
        result = RegistrationResult(
            affine=vr.AffineTransform.identity(),
            forward_lattices=[lat],
            backward_lattices=[lat],
            objective_trace=[[TraceRow(0, 1.2, 0.0, 0.0, 0.0, 1.08)]],
            converged_levels=[True],
            config=ObjectiveConfig(),
            level_spacings=[(1.0, 1.0, 1.0)],
        )
        out = tmp_path / "out"
        vio.write_result(result, out)
        assert (out / "affine.json").exists()
        assert (out / "forward_level0.mha").exists()
        assert (out / "trace_level0.csv").exists()
        text = (out / "trace_level0.csv").read_text()
        assert "iteration" in text and "1.2" in text
