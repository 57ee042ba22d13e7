import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gloria import geoviz
from gloria.interp import Location, NmfFactors
from gloria.matcore import InputError, make_rng

SVG = "{http://www.w3.org/2000/svg}"


def toy_factors(k=3, n=10, seed=0):
    rng = make_rng(seed)
    f = NmfFactors(s=rng.uniform(0.1, 1, (6, k)), l=rng.uniform(0, 1, (k, n)))
    locs = [Location(lat=40.0 + 0.3 * i, lng=-100.0 + 0.5 * i, region=i % 3)
            for i in range(n)]
    return f, locs


class TestMapLayer:
    def test_point_count_and_raw_values(self):
        f, locs = toy_factors()
        layer = geoviz.make_map_layer(f, locs, 1)
        assert len(layer.points) == 10
        np.testing.assert_array_equal([p.raw for p in layer.points], f.l[1])

    def test_normalization_hits_zero_and_one(self):
        f, locs = toy_factors()
        layer = geoviz.make_map_layer(f, locs, 0)
        norms = [p.normalized for p in layer.points]
        assert min(norms) == 0.0 and max(norms) == 1.0
        assert norms.index(max(norms)) == int(np.argmax(f.l[0]))

    def test_normalization_is_monotone(self):
        f, locs = toy_factors(seed=3)
        layer = geoviz.make_map_layer(f, locs, 2)
        order_raw = np.argsort([p.raw for p in layer.points])
        order_norm = np.argsort([p.normalized for p in layer.points])
        np.testing.assert_array_equal(order_raw, order_norm)

    def test_constant_activation_maps_to_half(self):
        f, locs = toy_factors()
        f.l[1][:] = 0.7
        layer = geoviz.make_map_layer(f, locs, 1)
        assert all(p.normalized == 0.5 for p in layer.points)

    def test_component_out_of_range(self):
        f, locs = toy_factors()
        with pytest.raises(InputError):
            geoviz.make_map_layer(f, locs, 3)

    def test_location_count_mismatch(self):
        f, locs = toy_factors()
        with pytest.raises(InputError):
            geoviz.make_map_layer(f, locs[:-1], 0)


class TestMapCsv:
    def test_header_and_row_count(self, tmp_path):
        f, locs = toy_factors()
        path = tmp_path / "map.csv"
        geoviz.export_map_csv(f, locs, 0, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "lng,lat,activation,normalized"
        assert len(lines) == 11

    def test_values_round_trip(self, tmp_path):
        f, locs = toy_factors(seed=5)
        path = tmp_path / "map.csv"
        geoviz.export_map_csv(f, locs, 2, path)
        rows = [l.split(",") for l in path.read_text().splitlines()[1:]]
        for i, row in enumerate(rows):
            assert float(row[0]) == locs[i].lng
            assert float(row[1]) == locs[i].lat
            assert float(row[2]) == f.l[2, i]

    def test_byte_identical_determinism(self, tmp_path):
        f, locs = toy_factors(seed=6)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        geoviz.export_map_csv(f, locs, 1, a)
        geoviz.export_map_csv(f, locs, 1, b)
        assert a.read_bytes() == b.read_bytes()


class TestMapSvg:
    def test_well_formed_with_one_circle_per_point(self, tmp_path):
        f, locs = toy_factors()
        layer = geoviz.make_map_layer(f, locs, 0)
        path = tmp_path / "map.svg"
        geoviz.export_map_svg(layer, path)
        root = ET.parse(path).getroot()
        assert root.tag == f"{SVG}svg"
        assert len(root.findall(f"{SVG}circle")) == 10

    def test_opacity_floor(self, tmp_path):
        f, locs = toy_factors()
        layer = geoviz.make_map_layer(f, locs, 0)
        path = tmp_path / "map.svg"
        geoviz.export_map_svg(layer, path)
        ops = [float(c.get("fill-opacity"))
               for c in ET.parse(path).getroot().findall(f"{SVG}circle")]
        assert min(ops) >= 0.05 and max(ops) == 1.0

    def test_north_is_up(self, tmp_path):
        f, locs = toy_factors()
        layer = geoviz.make_map_layer(f, locs, 0)
        path = tmp_path / "map.svg"
        geoviz.export_map_svg(layer, path)
        circles = ET.parse(path).getroot().findall(f"{SVG}circle")
        # locations were built with strictly increasing latitude, so the
        # rendered y coordinates must be strictly decreasing
        ys = [float(c.get("cy")) for c in circles]
        assert all(ys[i] > ys[i + 1] for i in range(len(ys) - 1))

    def test_circles_inside_viewbox(self, tmp_path):
        f, locs = toy_factors(seed=7)
        layer = geoviz.make_map_layer(f, locs, 1)
        path = tmp_path / "map.svg"
        geoviz.export_map_svg(layer, path)
        root = ET.parse(path).getroot()
        w, h = float(root.get("width")), float(root.get("height"))
        for c in root.findall(f"{SVG}circle"):
            assert 0 <= float(c.get("cx")) <= w
            assert 0 <= float(c.get("cy")) <= h

    def test_byte_identical_determinism(self, tmp_path):
        f, locs = toy_factors(seed=8)
        layer = geoviz.make_map_layer(f, locs, 0)
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        geoviz.export_map_svg(layer, a)
        geoviz.export_map_svg(layer, b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_layer_rejected(self, tmp_path):
        layer = geoviz.MapLayer(points=[], component=0, raw_min=0.0, raw_max=0.0)
        with pytest.raises(InputError):
            geoviz.export_map_svg(layer, tmp_path / "x.svg")


class TestHeatmap:
    def export(self, tmp_path, agg, row_order=None, col_order=None):
        k, r = agg.shape
        path = tmp_path / "heat.svg"
        geoviz.export_heatmap_svg(
            agg,
            row_order or list(range(k)),
            col_order or list(range(r)),
            [f"c{i}" for i in range(k)],
            [f"r{i}" for i in range(r)],
            path)
        return path

    def test_cell_count_is_k_times_r(self, tmp_path):
        agg = make_rng(9).uniform(0, 1, (4, 6))
        root = ET.parse(self.export(tmp_path, agg)).getroot()
        assert len(root.findall(f"{SVG}rect")) == 24
        assert len(root.findall(f"{SVG}text")) == 10

    def test_min_and_max_cells(self, tmp_path):
        agg = make_rng(10).uniform(0, 1, (3, 5))
        root = ET.parse(self.export(tmp_path, agg)).getroot()
        ops = [float(r.get("fill-opacity")) for r in root.findall(f"{SVG}rect")]
        assert min(ops) == 0.0 and max(ops) == 1.0

    def test_constant_matrix_maps_to_half(self, tmp_path):
        agg = np.full((2, 3), 4.2)
        root = ET.parse(self.export(tmp_path, agg)).getroot()
        assert all(float(r.get("fill-opacity")) == 0.5
                   for r in root.findall(f"{SVG}rect"))

    def test_row_order_reorders_labels(self, tmp_path):
        agg = make_rng(11).uniform(0, 1, (3, 3))
        root = ET.parse(self.export(tmp_path, agg, row_order=[2, 0, 1])).getroot()
        texts = [t.text for t in root.findall(f"{SVG}text")]
        assert texts[3:] == ["c2", "c0", "c1"]

    def test_bad_permutation_rejected(self, tmp_path):
        agg = np.ones((2, 2))
        with pytest.raises(InputError):
            geoviz.export_heatmap_svg(agg, [0, 0], [0, 1], ["a", "b"],
                                      ["x", "y"], tmp_path / "h.svg")

    def test_label_count_mismatch_rejected(self, tmp_path):
        agg = np.ones((2, 2))
        with pytest.raises(InputError):
            geoviz.export_heatmap_svg(agg, [0, 1], [0, 1], ["a"],
                                      ["x", "y"], tmp_path / "h.svg")

    def test_byte_identical_determinism(self, tmp_path):
        agg = make_rng(12).uniform(0, 1, (4, 5))
        a = self.export(tmp_path, agg)
        data = a.read_bytes()
        b = self.export(tmp_path, agg)
        assert b.read_bytes() == data
