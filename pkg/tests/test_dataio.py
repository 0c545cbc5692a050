"""Bundle round trips, the laboratory importer, maps, traces, rendering."""

import json

import numpy as np
import pytest

from scatlab.domain import Circle, ContrastMap, ImagingGrid, SceneSpec
from scatlab.dataio import (
    DatasetBundle,
    export_bundle,
    import_fresnel,
    load_bundle,
    load_config,
    load_contrast_map,
    parse_column_map,
    render_permittivity,
    save_contrast_map,
    write_cost_trace,
    write_lambda_trace,
)
from scatlab.errors import ConfigurationError, DataError, ParseError
from scatlab.inversion import CostBreakdown


def make_bundle(K=2, P=3, Q=5, with_incident=True, with_scene=True, seed=0):
    rng = np.random.default_rng(seed)
    rx = np.tile(np.linspace(60, 300, Q), (K, P, 1))
    return DatasetBundle(
        radius_m=1.67,
        tx_angles_deg=np.arange(P) * 45.0,
        rx_angles_deg=rx,
        frequencies_hz=np.array([2e9, 4e9])[:K],
        e_scat=rng.normal(size=(K, P, Q)) + 1j * rng.normal(size=(K, P, Q)),
        e_inc_rx=(rng.normal(size=(K, P, Q)) + 1j * rng.normal(size=(K, P, Q)))
        if with_incident else None,
        provenance={"source": "test"},
        scene=SceneSpec(primitives=(Circle((0.0, 0.0), 0.03, 2.0),))
        if with_scene else None,
    )


class TestBundleRoundTrip:
    def test_lossless_round_trip(self, tmp_path):
        bundle = make_bundle()
        export_bundle(bundle, tmp_path / "b")
        loaded = load_bundle(tmp_path / "b")
        np.testing.assert_array_equal(loaded.e_scat, bundle.e_scat)
        np.testing.assert_array_equal(loaded.e_inc_rx, bundle.e_inc_rx)
        np.testing.assert_array_equal(loaded.rx_angles_deg, bundle.rx_angles_deg)
        np.testing.assert_array_equal(loaded.frequencies_hz, bundle.frequencies_hz)
        assert loaded.scene == bundle.scene
        assert loaded.units == "V/m"

    def test_manifest_counts_match_csv_rows(self, tmp_path):
        bundle = make_bundle(K=1, P=2, Q=7, with_incident=False)
        export_bundle(bundle, tmp_path / "b")
        manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
        lines = (tmp_path / "b" / "fields_k1_p1.csv").read_text().strip().splitlines()
        assert manifest["n_rx"] == 7
        assert len(lines) - 1 == manifest["n_rx"]
        assert lines[0] == "rx_angle_deg,re_vpm,im_vpm"

    def test_decreasing_rx_angles_rejected(self):
        bundle_kwargs = make_bundle(K=1, P=1, Q=4).__dict__.copy()
        bundle_kwargs["rx_angles_deg"] = np.array([[[10.0, 9.0, 11.0, 12.0]]])
        with pytest.raises(DataError, match="strictly increasing"):
            DatasetBundle(**bundle_kwargs)

    def test_common_rx_angles_helper(self):
        bundle = make_bundle()
        assert bundle.common_rx_angles().shape == (5,)
        mixed = make_bundle()
        angles = mixed.rx_angles_deg.copy()
        angles[0, 1] += 1.0
        mixed.rx_angles_deg = angles
        with pytest.raises(DataError, match="differ"):
            mixed.common_rx_angles()


class TestFresnelImporter:
    def _write_fixture(self, path, K=2, P=2, Q=4, scramble=True):
        rng = np.random.default_rng(5)
        lines = [
            "# laboratory multistatic sweep",
            "% columns: tx_deg rx_deg freq_GHz re_tot im_tot re_inc im_inc",
        ]
        rows = []
        for f in range(1, K + 1):
            for tx in range(P):
                for q in range(Q):
                    rx = 60.0 + q
                    tot = rng.normal() + 1j * rng.normal()
                    inc = rng.normal() + 1j * rng.normal()
                    rows.append(
                        f"{tx * 45.0:.2f} {rx:.2f} {float(f):.3f} "
                        f"{tot.real:.8e} {tot.imag:.8e} {inc.real:.8e} {inc.imag:.8e}"
                    )
        if scramble:
            rng.shuffle(rows)
        path.write_text("\n".join(lines + rows) + "\n")
        return path

    def test_import_shapes_and_grouping(self, tmp_path):
        fixture = self._write_fixture(tmp_path / "data.txt", K=2, P=2, Q=4)
        bundle = import_fresnel(fixture)
        assert bundle.shape == (2, 2, 4)
        assert bundle.frequencies_hz == pytest.approx([1e9, 2e9])
        assert bundle.tx_angles_deg == pytest.approx([0.0, 45.0])
        assert np.all(np.diff(bundle.rx_angles_deg, axis=2) > 0)

    def test_scattered_is_total_minus_incident(self, tmp_path):
        fixture = tmp_path / "tiny.txt"
        fixture.write_text("0.0 60.0 1.0 3.0 1.0 1.0 0.25\n")
        bundle = import_fresnel(fixture)
        assert bundle.e_scat[0, 0, 0] == pytest.approx(2.0 + 0.75j)
        assert bundle.e_inc_rx[0, 0, 0] == pytest.approx(1.0 + 0.25j)
        assert bundle.provenance["scattered_from_total_minus_incident"] is True

    def test_nan_row_rejected_with_line_number(self, tmp_path):
        fixture = tmp_path / "bad.txt"
        fixture.write_text(
            "0.0 60.0 1.0 1.0 1.0 0.5 0.5\n"
            "0.0 61.0 1.0 nan 1.0 0.5 0.5\n"
        )
        with pytest.raises(ParseError, match="line 2"):
            import_fresnel(fixture)

    def test_inconsistent_counts_rejected_with_details(self, tmp_path):
        fixture = tmp_path / "ragged.txt"
        fixture.write_text(
            "0.0 60.0 1.0 1.0 1.0 0.5 0.5\n"
            "0.0 61.0 1.0 1.0 1.0 0.5 0.5\n"
            "45.0 60.0 1.0 1.0 1.0 0.5 0.5\n"
        )
        with pytest.raises(ParseError, match="inconsistent") as info:
            import_fresnel(fixture)
        assert any("45" in d for d in info.value.details)

    def test_column_map_remapping(self, tmp_path):
        fixture = tmp_path / "swapped.txt"
        # freq first, then tx, rx
        fixture.write_text("1.0 0.0 60.0 3.0 1.0 1.0 0.25\n")
        bundle = import_fresnel(
            fixture, column_map=parse_column_map("freq=0,tx=1,rx=2")
        )
        assert bundle.frequencies_hz[0] == pytest.approx(1e9)
        assert bundle.e_scat[0, 0, 0] == pytest.approx(2.0 + 0.75j)

    def test_round_trip_through_bundle(self, tmp_path):
        fixture = self._write_fixture(tmp_path / "data.txt")
        bundle = import_fresnel(fixture)
        export_bundle(bundle, tmp_path / "b")
        again = load_bundle(tmp_path / "b")
        np.testing.assert_array_equal(again.e_scat, bundle.e_scat)
        np.testing.assert_array_equal(again.rx_angles_deg, bundle.rx_angles_deg)


class TestContrastMapFiles:
    def test_round_trip(self, tmp_path):
        grid = ImagingGrid(5, 4, 0.05, 0.04)
        rng = np.random.default_rng(9)
        chi = ContrastMap(grid, rng.normal(size=20) + 1j * rng.normal(size=20))
        save_contrast_map(chi, tmp_path / "chi.csv")
        loaded = load_contrast_map(tmp_path / "chi.csv")
        assert loaded.grid == grid
        np.testing.assert_array_equal(loaded.values, chi.values)


class TestTraces:
    def test_cost_trace_row_count(self, tmp_path):
        history = [
            CostBreakdown(0.5, 0.3, 0.1, 0.05, 0.95),
            CostBreakdown(0.4, 0.2, 0.1, 0.05, 0.75),
        ]
        write_cost_trace(history, tmp_path / "cost.csv")
        lines = (tmp_path / "cost.csv").read_text().strip().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("iteration,")

    def test_lambda_trace_rows(self, tmp_path):
        lams = [np.ones((1, 2), dtype=complex), 2.0 * np.ones((1, 2), dtype=complex)]
        write_lambda_trace(lams, tmp_path / "lam.csv")
        lines = (tmp_path / "lam.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 2


class TestRender:
    def test_two_disk_map_renders_distinct_regions(self, tmp_path):
        grid = ImagingGrid(24, 24, 0.15, 0.15)
        from scatlab.domain import foam_diel_ext_scene, rasterize

        chi = rasterize(foam_diel_ext_scene(), grid)
        out = tmp_path / "map.png"
        render_permittivity(chi, out)
        assert out.exists() and out.stat().st_size > 1000
        # underlying pixel assertion: centers of the two disks differ
        img = chi.eps_r.reshape(24, 24)
        centers = grid.cell_centers
        foam_idx = np.argmin(np.abs(centers[:, 0]) + np.abs(centers[:, 1]))
        plast_idx = np.argmin(np.abs(centers[:, 0] + 0.0555) + np.abs(centers[:, 1]))
        assert img.ravel()[plast_idx] > img.ravel()[foam_idx] > 1.0

    def test_constant_map_warns(self, tmp_path):
        grid = ImagingGrid(4, 4, 0.04, 0.04)
        chi = ContrastMap(grid, np.zeros(16))
        with pytest.warns(UserWarning, match="constant"):
            render_permittivity(chi, tmp_path / "flat.png")


class TestConfig:
    def _write(self, tmp_path, text):
        path = tmp_path / "run.toml"
        path.write_text(text)
        return path

    def test_minimal_config(self, tmp_path):
        path = self._write(
            tmp_path,
            'schema = "scatlab-config/1"\nseed = 5\nfreqs = [3e9]\n'
            "[grid]\nnx = 16\nny = 16\nextent = 0.15\n",
        )
        cfg = load_config(path)
        assert cfg["seed"] == 5
        assert cfg["grid"]["nx"] == 16

    def test_wrong_schema_rejected(self, tmp_path):
        path = self._write(tmp_path, 'schema = "other/9"\n')
        with pytest.raises(ConfigurationError, match="schema"):
            load_config(path)

    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = self._write(
            tmp_path, 'schema = "scatlab-config/1"\nbogus = 1\n'
        )
        with pytest.raises(ConfigurationError, match="bogus"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = self._write(
            tmp_path,
            'schema = "scatlab-config/1"\n[inversion]\nbeta = 0.1\nbta = 0.2\n',
        )
        with pytest.raises(ConfigurationError, match="inversion.bta"):
            load_config(path)
