"""Footprint parsing, terrain sampling, and prior extrusion."""

import math

import numpy as np
import pytest

from osmscan.cloud import CLASS_FACADE, CLASS_GROUND
from osmscan.osm_prior import (
    DemFormatError,
    DemGrid,
    DemNodataError,
    DemRangeError,
    EmptyPriorError,
    OsmFootprint,
    OsmParseError,
    build_prior,
    clip_prior,
    footprints_to_osm,
    parse_dem,
    parse_osm,
    project_lonlat,
    remove_footprints,
    sample_dem,
    unproject_xy,
    EARTH_RADIUS,
)


def osm_doc(ways, nodes):
    node_xml = "".join(
        '<node id="%d" lat="%.10f" lon="%.10f"/>' % (i, lat, lon)
        for i, (lat, lon) in nodes.items()
    )
    way_xml = ""
    for wid, refs, tags in ways:
        nds = "".join('<nd ref="%d"/>' % r for r in refs)
        tgs = "".join('<tag k="%s" v="%s"/>' % kv for kv in tags.items())
        way_xml += '<way id="%d">%s%s</way>' % (wid, nds, tgs)
    return ('<?xml version="1.0"?><osm version="0.6">%s%s</osm>' % (node_xml, way_xml)).encode()


def square_nodes(start_id, cx_deg=0.0, cy_deg=0.0, side_deg=1e-4):
    ids = list(range(start_id, start_id + 4))
    h = side_deg / 2.0
    coords = [
        (cy_deg - h, cx_deg - h),
        (cy_deg - h, cx_deg + h),
        (cy_deg + h, cx_deg + h),
        (cy_deg + h, cx_deg - h),
    ]
    return ids, dict(zip(ids, coords))


def test_three_height_rules():
    ids1, n1 = square_nodes(1, cx_deg=0.0)
    ids2, n2 = square_nodes(5, cx_deg=0.01)
    ids3, n3 = square_nodes(9, cx_deg=0.02)
    nodes = {**n1, **n2, **n3}
    doc = osm_doc(
        [
            (101, ids1 + [ids1[0]], {"building": "yes", "height": "10.5"}),
            (102, ids2 + [ids2[0]], {"building": "yes", "building:levels": "2"}),
            (103, ids3 + [ids3[0]], {"building": "yes"}),
        ],
        nodes,
    )
    result = parse_osm(doc)
    by_id = {fp.way_id: fp for fp in result.footprints}
    assert by_id[101].height == pytest.approx(10.5)
    assert by_id[101].source_tag == "explicit_height"
    assert by_id[101].reliability == 1.0
    assert by_id[102].height == pytest.approx(6.0)
    assert by_id[102].source_tag == "levels"
    assert by_id[102].reliability == 0.8
    assert by_id[103].height == pytest.approx(3.0)
    assert by_id[103].source_tag == "default"
    assert by_id[103].reliability == 0.5


def test_explicit_height_beats_levels():
    ids, nodes = square_nodes(1)
    doc = osm_doc(
        [(7, ids + [ids[0]], {"building": "yes", "height": "4.2", "building:levels": "9"})],
        nodes,
    )
    fp = parse_osm(doc).footprints[0]
    assert fp.height == pytest.approx(4.2)
    assert fp.source_tag == "explicit_height"


def test_malformed_ways_are_skipped_not_fatal():
    ids, nodes = square_nodes(1)
    open_way = (201, ids, {"building": "yes"})  # not closed
    ghost = (202, [1, 2, 99, 1], {"building": "yes"})  # unknown node
    not_building = (203, ids + [ids[0]], {"highway": "residential"})
    refused = (204, ids + [ids[0]], {"building": "no"})
    good = (205, ids + [ids[0]], {"building": "yes"})
    doc = osm_doc([open_way, ghost, not_building, refused, good], nodes)
    result = parse_osm(doc)
    assert [fp.way_id for fp in result.footprints] == [205]
    # Tagged non-buildings are not counted as skips, malformed buildings are.
    assert result.skipped_ways == 2


def test_self_intersecting_ring_skipped():
    nodes = {
        1: (0.0, 0.0),
        2: (1e-4, 1e-4),
        3: (0.0, 1e-4),
        4: (1e-4, 0.0),
    }
    doc = osm_doc([(301, [1, 2, 3, 4, 1], {"building": "yes"})], nodes)
    result = parse_osm(doc)
    assert result.footprints == []
    assert result.skipped_ways == 1


def test_broken_xml_raises():
    with pytest.raises(OsmParseError):
        parse_osm(b"<osm><node id=")


def test_rings_normalized_to_ccw():
    ids, nodes = square_nodes(1)
    cw = list(reversed(ids))
    doc = osm_doc([(401, cw + [cw[0]], {"building": "yes"})], nodes)
    ring = parse_osm(doc).footprints[0].ring
    area = 0.0
    for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]):
        area += x0 * y1 - x1 * y0
    assert area > 0.0


def test_projection_round_trip_and_scale():
    origin = (40.0, -3.0)
    lat, lon = 40.001, -2.9987
    x, y = project_lonlat(lat, lon, origin)
    assert y == pytest.approx(EARTH_RADIUS * math.radians(lat - origin[0]), rel=1e-12)
    assert x == pytest.approx(
        EARTH_RADIUS * math.cos(math.radians(origin[0])) * math.radians(lon - origin[1]),
        rel=1e-12,
    )
    back = unproject_xy(x, y, origin)
    assert back == pytest.approx((lat, lon), abs=1e-12)


def test_osm_round_trip_preserves_footprints():
    ids1, n1 = square_nodes(1, cx_deg=0.0)
    ids2, n2 = square_nodes(5, cx_deg=0.02)
    doc = osm_doc(
        [
            (501, ids1 + [ids1[0]], {"building": "yes", "height": "7.5"}),
            (502, ids2 + [ids2[0]], {"building": "yes", "building:levels": "3"}),
        ],
        {**n1, **n2},
    )
    first = parse_osm(doc).footprints
    again = parse_osm(footprints_to_osm(first)).footprints
    assert len(again) == len(first)
    for a, b in zip(first, again):
        assert a.way_id == b.way_id
        assert a.ring.shape == b.ring.shape
        assert np.abs(a.ring - b.ring).max() < 1e-6
        assert b.height == pytest.approx(a.height, abs=1e-6)


def dem_text(heights, xll=0.0, yll=0.0, cell=1.0, nodata=-9999.0):
    h = np.asarray(heights, dtype=float)
    lines = [
        "ncols %d" % h.shape[1],
        "nrows %d" % h.shape[0],
        "xllcorner %g" % xll,
        "yllcorner %g" % yll,
        "cellsize %g" % cell,
        "NODATA_value %g" % nodata,
    ]
    lines += [" ".join("%g" % v for v in row) for row in h]
    return "\n".join(lines)


def oracle_bilinear(dem, x, y):
    # Straight textbook bilinear on the south-up grid, independent of the
    # row-flipped storage in DemGrid.
    xmin, ymin, _, _ = dem.hull_bounds()
    south_up = dem.heights[::-1]
    gx = (x - xmin) / dem.cell_size
    gy = (y - ymin) / dem.cell_size
    i0 = min(int(gx), dem.n_cols - 2)
    j0 = min(int(gy), dem.n_rows - 2)
    fx, fy = gx - i0, gy - j0
    z00 = south_up[j0, i0]
    z10 = south_up[j0, i0 + 1]
    z01 = south_up[j0 + 1, i0]
    z11 = south_up[j0 + 1, i0 + 1]
    return (
        z00 * (1 - fx) * (1 - fy)
        + z10 * fx * (1 - fy)
        + z01 * (1 - fx) * fy
        + z11 * fx * fy
    )


def test_dem_parse_and_cell_center_values():
    dem = parse_dem(dem_text([[5.0, 6.0], [1.0, 2.0]]))
    # Row order in the file is north first; y increases toward the first row.
    assert sample_dem(dem, (0.5, 0.5)) == pytest.approx(1.0)
    assert sample_dem(dem, (1.5, 0.5)) == pytest.approx(2.0)
    assert sample_dem(dem, (0.5, 1.5)) == pytest.approx(5.0)


def test_dem_bilinear_matches_oracle():
    rng = np.random.default_rng(40)
    for _ in range(20):
        rows = int(rng.integers(2, 7))
        cols = int(rng.integers(2, 7))
        dem = DemGrid(
            float(rng.uniform(-5, 5)),
            float(rng.uniform(-5, 5)),
            float(rng.uniform(0.5, 3.0)),
            rng.uniform(-50.0, 50.0, size=(rows, cols)),
        )
        xmin, ymin, xmax, ymax = dem.hull_bounds()
        for _ in range(50):
            x = float(rng.uniform(xmin, xmax))
            y = float(rng.uniform(ymin, ymax))
            assert sample_dem(dem, (x, y)) == pytest.approx(
                oracle_bilinear(dem, x, y), abs=1e-12
            )


def test_dem_error_paths():
    with pytest.raises(DemFormatError):
        parse_dem("ncols 2\nnrows 2\nxllcorner 0\n")
    with pytest.raises(DemFormatError):
        parse_dem(dem_text([[1.0, 2.0], [3.0, 4.0]]) + " 9.0")
    dem = parse_dem(dem_text([[1.0, 2.0], [3.0, -9999.0]]))
    with pytest.raises(DemRangeError):
        sample_dem(dem, (99.0, 0.5))
    with pytest.raises(DemNodataError):
        sample_dem(dem, (0.9, 0.6))


def flat_dem(size=20.0, z=2.0):
    n = int(size) + 1
    return DemGrid(-size / 2.0, -size / 2.0, 1.0, np.full((n, n), z))


def unit_square_footprint(way_id=1, half=2.0, height=6.0):
    ring = np.array(
        [[-half, -half], [half, -half], [half, half], [-half, half], [-half, -half]]
    )
    return OsmFootprint(way_id, ring, height, "explicit_height", 1.0)


def test_prior_facades_sit_on_terrain_with_outward_normals():
    dem = flat_dem(z=2.0)
    fp = unit_square_footprint(height=6.0)
    prior = build_prior([fp], dem, facade_spacing=1.0, ground_spacing=50.0)
    facades = prior.select(prior.classes == CLASS_FACADE)
    assert len(facades) > 0
    assert facades.points[:, 2].min() == pytest.approx(2.0)
    assert facades.points[:, 2].max() == pytest.approx(8.0)
    assert np.all(facades.weights == 1.0)
    # Outward: the normal points away from the footprint center.
    centered = facades.points[:, :2]
    outward = np.einsum("ij,ij->i", facades.normals[:, :2], centered)
    assert np.all(outward > 0.0)
    assert np.allclose(facades.normals[:, 2], 0.0)


def test_prior_ground_follows_dem():
    dem = flat_dem(z=-1.5)
    prior = build_prior([], dem, facade_spacing=0.5, ground_spacing=2.0)
    ground = prior.select(prior.classes == CLASS_GROUND)
    assert len(ground) > 0
    assert np.allclose(ground.points[:, 2], -1.5)
    assert np.allclose(ground.normals, [0.0, 0.0, 1.0])
    assert np.all(ground.weights == 1.0)


def test_prior_empty_inputs_raise():
    with pytest.raises(EmptyPriorError):
        build_prior([], DemGrid(0.0, 0.0, 1.0, np.full((3, 3), -9999.0)), 0.5, 2.0)


def test_facade_spacing_respected():
    dem = flat_dem()
    fp = unit_square_footprint(half=2.0, height=2.0)
    prior = build_prior([fp], dem, facade_spacing=0.5, ground_spacing=50.0)
    facades = prior.select(prior.classes == CLASS_FACADE)
    base = facades.select(np.isclose(facades.points[:, 2], facades.points[:, 2].min()))
    south = base.select(np.isclose(base.points[:, 1], -2.0))
    xs = np.sort(np.unique(np.round(south.points[:, 0], 9)))
    assert np.diff(xs).max() <= 0.5 + 1e-9


def test_clip_prior_keeps_horizontal_disc():
    dem = flat_dem()
    prior = build_prior([unit_square_footprint()], dem, 0.5, 2.0)
    clipped = clip_prior(prior, (0.0, 0.0), 2.5)
    d = np.linalg.norm(clipped.points[:, :2], axis=1)
    assert len(clipped) > 0
    assert d.max() <= 2.5 + 1e-12


def test_remove_footprints_by_id():
    fps = [unit_square_footprint(way_id=i) for i in (1, 2, 3)]
    kept = remove_footprints(fps, {2})
    assert [fp.way_id for fp in kept] == [1, 3]
    with pytest.raises(ValueError):
        remove_footprints(fps, {9})
