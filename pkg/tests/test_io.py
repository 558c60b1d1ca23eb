import numpy as np
import pytest

from blk import io
from blk.musr import MusrDataset
from blk.pet import Image3D, ScannerGeometry
from blk.theory import TheoryBinding


class TestListmodeFile:
    def test_roundtrip(self, tmp_path):
        geom = ScannerGeometry(rings=8, detectors_per_ring=32, pitch=2.2)
        rng = np.random.default_rng(0)
        events = rng.integers(0, geom.n_detectors, (500, 2))
        p = tmp_path / "run.lmpt"
        io.store_lmpt(p, events, geom)
        back, geom2 = io.load_lmpt(p)
        assert np.array_equal(back, events)
        assert geom2.rings == 8
        assert geom2.detectors_per_ring == 32
        assert geom2.pitch == pytest.approx(2.2, rel=1e-6)
        assert geom2.ring_radius == pytest.approx(geom.ring_radius, rel=1e-6)

    def test_empty_event_list(self, tmp_path):
        geom = ScannerGeometry(rings=2, detectors_per_ring=8, pitch=2.0)
        p = tmp_path / "empty.lmpt"
        io.store_lmpt(p, np.zeros((0, 2)), geom)
        back, _ = io.load_lmpt(p)
        assert back.shape == (0, 2)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.lmpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(io.FormatError, match="magic"):
            io.load_lmpt(p)

    def test_truncated_payload(self, tmp_path):
        geom = ScannerGeometry(rings=2, detectors_per_ring=8, pitch=2.0)
        p = tmp_path / "cut.lmpt"
        io.store_lmpt(p, np.ones((10, 2)), geom)
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(io.FormatError, match="truncated"):
            io.load_lmpt(p)

    def test_bad_version(self, tmp_path):
        geom = ScannerGeometry(rings=2, detectors_per_ring=8, pitch=2.0)
        p = tmp_path / "v9.lmpt"
        io.store_lmpt(p, np.ones((1, 2)), geom)
        data = bytearray(p.read_bytes())
        data[4] = 9
        p.write_bytes(bytes(data))
        with pytest.raises(io.FormatError, match="version"):
            io.load_lmpt(p)


class TestImageFile:
    def test_roundtrip(self, tmp_path):
        img = Image3D.centered((6, 5, 4), (0.7, 0.7, 1.4))
        img.data[:] = np.arange(img.n_voxels, dtype=float)
        p = tmp_path / "img.img3"
        io.store_img3(p, img)
        back = io.load_img3(p)
        assert back.dims == img.dims
        assert back.voxel_size == pytest.approx(img.voxel_size, rel=1e-6)
        assert back.origin == pytest.approx(img.origin, rel=1e-6)
        # payload is stored as 32-bit floats
        assert np.array_equal(back.data, img.data.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.img3"
        p.write_bytes(b"PNG\x00" + b"\x00" * 64)
        with pytest.raises(io.FormatError, match="magic"):
            io.load_img3(p)

    def test_truncated(self, tmp_path):
        img = Image3D.centered((4, 4, 4), (1, 1, 1))
        p = tmp_path / "cut.img3"
        io.store_img3(p, img)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(io.FormatError, match="truncated"):
            io.load_img3(p)


def sample_datasets():
    rng = np.random.default_rng(1)
    out = []
    for k in range(3):
        out.append(
            MusrDataset(
                detector_index=k,
                counts=rng.integers(0, 500, 64),
                dt=0.01,
                t0_bin=2,
                binding=TheoryBinding(map=(0, 1, 2, 0), function_values=(22.5 * k,)),
                n0_slot=4,
                nbkg_slot=5,
            )
        )
    return out


class TestHistogramFile:
    def test_roundtrip(self, tmp_path):
        datasets = sample_datasets()
        p = tmp_path / "data.musr"
        io.store_musr_data(p, datasets)
        back = io.load_musr_data(p)
        assert len(back) == 3
        for a, b in zip(datasets, back):
            assert b.detector_index == a.detector_index
            assert np.array_equal(b.counts, a.counts)
            assert b.dt == a.dt
            assert b.t0_bin == a.t0_bin
            assert b.binding.map == a.binding.map
            assert b.binding.function_values == a.binding.function_values
            assert (b.n0_slot, b.nbkg_slot) == (a.n0_slot, a.nbkg_slot)

    def test_negative_count_names_detector_and_bin(self, tmp_path):
        datasets = sample_datasets()
        datasets[1].counts[7] = -3
        p = tmp_path / "neg.musr"
        io.store_musr_data(p, datasets)
        with pytest.raises(io.FormatError, match=r"detector 1.*bin 7"):
            io.load_musr_data(p)

    def test_missing_field_reported(self, tmp_path):
        p = tmp_path / "missing.musr"
        p.write_text("DETECTOR 0\ndt 0.01\ncounts 1 2 3\n")
        with pytest.raises(io.FormatError, match="missing"):
            io.load_musr_data(p)

    def test_garbage_line_reported_with_lineno(self, tmp_path):
        p = tmp_path / "bad.musr"
        p.write_text("DETECTOR 0\ndt zebra\n")
        with pytest.raises(io.FormatError, match="bad.musr:2"):
            io.load_musr_data(p)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.musr"
        p.write_text("# only a comment\n")
        with pytest.raises(io.FormatError, match="no detector blocks"):
            io.load_musr_data(p)


FIT_CFG = """\
[THEORY]
expr = p[m[0]] * sg(t, p[m[1]]) * tf(t, f[m[3]], p[m[2]])
[PARAMETERS]
# name  start  step   lo   hi   flag
A0      0.25   0.01   -    -    free
sigma   0.4    0.01   0    -    free
nu      21.0   0.1    -    -    free
N0      1000   1      0    -    fixed
Nbkg    10     1      0    -    fixed
[DATASETS]
file = data.musr
[RANGE]
start = 0.0
end = 9.0
"""


class TestFitConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "fit.cfg"
        p.write_text(FIT_CFG)
        cfg = io.load_fit_config(p)
        assert cfg.params.names == ["A0", "sigma", "nu", "N0", "Nbkg"]
        assert cfg.params.values[0] == 0.25
        assert cfg.params.fixed.tolist() == [False, False, False, True, True]
        assert cfg.params.bounds[0] is None
        assert cfg.params.bounds[1] == (0.0, np.inf)
        assert cfg.data_files == ["data.musr"]
        assert cfg.fit_range == (0.0, 9.0)
        assert "sg" in cfg.theory.print()

    def test_missing_theory(self, tmp_path):
        p = tmp_path / "no_theory.cfg"
        p.write_text("[PARAMETERS]\nA0 1 0.1 - - free\n[DATASETS]\nfile = d\n")
        with pytest.raises(io.FormatError, match="THEORY"):
            io.load_fit_config(p)

    def test_bad_parameter_row(self, tmp_path):
        p = tmp_path / "bad_row.cfg"
        p.write_text("[THEORY]\nexpr = p[m[0]]\n[PARAMETERS]\nA0 1 0.1 free\n")
        with pytest.raises(io.FormatError, match="6 columns"):
            io.load_fit_config(p)

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "weird.cfg"
        p.write_text("[WEIRD]\nx = 1\n")
        with pytest.raises(io.FormatError, match="unknown section"):
            io.load_fit_config(p)
