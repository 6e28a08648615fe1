"""Coarse geometric prior from building footprints and a terrain grid.

Footprints come from OSM XML (closed building ways); heights follow the
precedence explicit height tag > building:levels * 3 m > 3 m default, and
each footprint carries a reliability weight reflecting which rule fired.
The prior cloud extrudes footprint walls into facade samples with outward
normals and adds ground samples from the elevation grid.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from io import BytesIO

import numpy as np

from .cloud import CLASS_FACADE, CLASS_GROUND, WeightedCloud

EARTH_RADIUS = 6378137.0

METERS_PER_LEVEL = 3.0
DEFAULT_HEIGHT = 3.0

SOURCE_EXPLICIT = "explicit_height"
SOURCE_LEVELS = "levels"
SOURCE_DEFAULT = "default"

_RELIABILITY = {SOURCE_EXPLICIT: 1.0, SOURCE_LEVELS: 0.8, SOURCE_DEFAULT: 0.5}

DEFAULT_FACADE_SPACING = 0.5
DEFAULT_GROUND_SPACING = 2.0


class OsmParseError(ValueError):
    """Malformed OSM XML."""


class DemFormatError(ValueError):
    """Malformed ESRI ASCII grid."""


class DemRangeError(ValueError):
    """DEM query outside the interpolation hull."""


class DemNodataError(ValueError):
    """DEM query touching a nodata cell."""


class EmptyPriorError(ValueError):
    """No footprints and no usable terrain to sample."""


def project_lonlat(lat: float, lon: float, origin: tuple[float, float]) -> tuple[float, float]:
    """Equirectangular local projection (degrees in, meters out)."""
    lat0, lon0 = origin
    x = EARTH_RADIUS * math.cos(math.radians(lat0)) * math.radians(lon - lon0)
    y = EARTH_RADIUS * math.radians(lat - lat0)
    return x, y


def unproject_xy(x: float, y: float, origin: tuple[float, float]) -> tuple[float, float]:
    lat0, lon0 = origin
    lat = lat0 + math.degrees(y / EARTH_RADIUS)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS * math.cos(math.radians(lat0))))
    return lat, lon


@dataclass
class OsmFootprint:
    """Closed building outline in local meters, CCW, first vertex repeated."""

    way_id: int
    ring: np.ndarray
    height: float
    source_tag: str
    reliability: float

    def __post_init__(self) -> None:
        self.ring = np.asarray(self.ring, dtype=float).reshape(-1, 2)
        if len(self.ring) < 4 or not np.array_equal(self.ring[0], self.ring[-1]):
            raise ValueError("ring must be closed with at least 3 distinct vertices")
        if len(np.unique(self.ring[:-1], axis=0)) < 3:
            raise ValueError("ring must have at least 3 distinct vertices")
        if self.height <= 0.0:
            raise ValueError("height must be positive")
        if not 0.0 < self.reliability <= 1.0:
            raise ValueError("reliability must lie in (0, 1]")


@dataclass
class OsmParseResult:
    footprints: list
    skipped_ways: int


def _ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area; positive for CCW."""
    x, y = ring[:-1, 0], ring[:-1, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(a, b, c, d) -> bool:
    """Proper crossing test for open segments ab and cd."""

    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0.0) and (o3 * o4 < 0.0)


def _ring_is_simple(ring: np.ndarray) -> bool:
    segs = [(ring[i], ring[i + 1]) for i in range(len(ring) - 1)]
    n = len(segs)
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # closing segment is adjacent to the first
            if _segments_cross(*segs[i], *segs[j]):
                return False
    return True


def _parse_height(tags: dict) -> tuple[float, str]:
    raw = tags.get("height")
    if raw is not None:
        try:
            return float(raw.strip().rstrip("m").strip()), SOURCE_EXPLICIT
        except ValueError:
            pass
    raw = tags.get("building:levels")
    if raw is not None:
        try:
            return float(raw) * METERS_PER_LEVEL, SOURCE_LEVELS
        except ValueError:
            pass
    return DEFAULT_HEIGHT, SOURCE_DEFAULT


def parse_osm(xml_bytes: bytes, origin: tuple[float, float] = (0.0, 0.0)) -> OsmParseResult:
    """Extract building footprints from OSM XML.

    Ways are kept when they are tagged as buildings, closed, reference only
    known nodes, and project to a simple ring; anything else increments the
    skipped-way count. Rings are normalized to CCW winding so wall normals
    point outward.
    """
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        raise OsmParseError(str(exc)) from exc

    nodes = {}
    for el in root.iter("node"):
        nodes[el.attrib["id"]] = (float(el.attrib["lat"]), float(el.attrib["lon"]))

    footprints = []
    skipped = 0
    for way in root.iter("way"):
        tags = {t.attrib["k"]: t.attrib["v"] for t in way.findall("tag")}
        building = tags.get("building")
        if building is None or building == "no":
            continue
        refs = [nd.attrib["ref"] for nd in way.findall("nd")]
        if len(refs) < 4 or refs[0] != refs[-1]:
            skipped += 1
            continue
        if any(r not in nodes for r in refs):
            skipped += 1
            continue
        ring = np.array(
            [project_lonlat(*nodes[r], origin) for r in refs], dtype=float
        )
        if len(np.unique(ring[:-1], axis=0)) < 3 or not _ring_is_simple(ring):
            skipped += 1
            continue
        if _ring_area(ring) < 0.0:
            ring = ring[::-1].copy()
        height, source = _parse_height(tags)
        if height <= 0.0:
            skipped += 1
            continue
        footprints.append(
            OsmFootprint(
                way_id=int(way.attrib["id"]),
                ring=ring,
                height=height,
                source_tag=source,
                reliability=_RELIABILITY[source],
            )
        )
    return OsmParseResult(footprints, skipped)


def footprints_to_osm(
    footprints, origin: tuple[float, float] = (0.0, 0.0), heights: bool = True
) -> bytes:
    """Serialize footprints back to OSM XML with explicit height tags."""
    root = ET.Element("osm", version="0.6", generator="osmscan")
    next_node = 1
    ways = []
    for fp in footprints:
        refs = []
        for x, y in fp.ring[:-1]:
            lat, lon = unproject_xy(x, y, origin)
            ET.SubElement(
                root, "node", id=str(next_node), lat="%.12f" % lat, lon="%.12f" % lon
            )
            refs.append(next_node)
            next_node += 1
        ways.append((fp, refs))
    for fp, refs in ways:
        way = ET.SubElement(root, "way", id=str(fp.way_id))
        for r in refs + [refs[0]]:
            ET.SubElement(way, "nd", ref=str(r))
        ET.SubElement(way, "tag", k="building", v="yes")
        if heights:
            ET.SubElement(way, "tag", k="height", v="%.6f" % fp.height)
    buf = BytesIO()
    ET.ElementTree(root).write(buf, encoding="utf-8", xml_declaration=True)
    return buf.getvalue()


@dataclass
class DemGrid:
    """ESRI ASCII style elevation grid, rows stored north first."""

    xllcorner: float
    yllcorner: float
    cell_size: float
    heights: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self) -> None:
        self.heights = np.asarray(self.heights, dtype=float)
        if self.heights.ndim != 2 or self.heights.shape[0] < 2 or self.heights.shape[1] < 2:
            raise ValueError("grid must be at least 2x2")
        if self.cell_size <= 0.0:
            raise ValueError("cell size must be positive")

    @property
    def n_rows(self) -> int:
        return self.heights.shape[0]

    @property
    def n_cols(self) -> int:
        return self.heights.shape[1]

    def hull_bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) spanned by cell centers."""
        half = 0.5 * self.cell_size
        return (
            self.xllcorner + half,
            self.yllcorner + half,
            self.xllcorner + (self.n_cols - 0.5) * self.cell_size,
            self.yllcorner + (self.n_rows - 0.5) * self.cell_size,
        )


def parse_dem(text: str) -> DemGrid:
    tokens = text.split()
    header = {}
    i = 0
    while i + 1 < len(tokens) and tokens[i].lower() in (
        "ncols",
        "nrows",
        "xllcorner",
        "yllcorner",
        "cellsize",
        "nodata_value",
    ):
        header[tokens[i].lower()] = tokens[i + 1]
        i += 2
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise DemFormatError("missing header field %s" % key)
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        xll = float(header["xllcorner"])
        yll = float(header["yllcorner"])
        cell = float(header["cellsize"])
        nodata = float(header.get("nodata_value", -9999.0))
        values = np.array([float(t) for t in tokens[i:]], dtype=float)
    except ValueError as exc:
        raise DemFormatError(str(exc)) from exc
    if values.size != ncols * nrows:
        raise DemFormatError(
            "expected %d values, found %d" % (ncols * nrows, values.size)
        )
    return DemGrid(xll, yll, cell, values.reshape(nrows, ncols), nodata)


def format_dem(dem: DemGrid) -> str:
    lines = [
        "ncols %d" % dem.n_cols,
        "nrows %d" % dem.n_rows,
        "xllcorner %.9g" % dem.xllcorner,
        "yllcorner %.9g" % dem.yllcorner,
        "cellsize %.9g" % dem.cell_size,
        "NODATA_value %.9g" % dem.nodata,
    ]
    for row in dem.heights:
        lines.append(" ".join("%.9g" % v for v in row))
    return "\n".join(lines) + "\n"


def sample_dem(dem: DemGrid, xy) -> float:
    """Bilinear elevation at a point inside the cell-center hull."""
    x, y = float(xy[0]), float(xy[1])
    xmin, ymin, xmax, ymax = dem.hull_bounds()
    if not (xmin <= x <= xmax and ymin <= y <= ymax):
        raise DemRangeError("query (%g, %g) outside DEM hull" % (x, y))
    gx = (x - xmin) / dem.cell_size
    gy = (y - ymin) / dem.cell_size
    i0 = min(int(gx), dem.n_cols - 2)
    j0 = min(int(gy), dem.n_rows - 2)
    fx = gx - i0
    fy = gy - j0
    # Row 0 is the north edge; j counts from the south.
    r1 = dem.n_rows - 1 - j0
    r0 = r1 - 1
    corners = np.array(
        [
            [dem.heights[r1, i0], dem.heights[r1, i0 + 1]],
            [dem.heights[r0, i0], dem.heights[r0, i0 + 1]],
        ]
    )
    if np.any(corners == dem.nodata):
        raise DemNodataError("query (%g, %g) touches nodata" % (x, y))
    top = corners[0, 0] * (1.0 - fx) + corners[0, 1] * fx
    bot = corners[1, 0] * (1.0 - fx) + corners[1, 1] * fx
    return float(top * (1.0 - fy) + bot * fy)


def _wall_stations(ring: np.ndarray, spacing: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sample points along ring walls, endpoints included, deduplicated.

    Each wall is split into ceil(len/spacing) equal steps so the step never
    exceeds the requested spacing; shared corners appear once.
    """
    seen = set()
    stations = []
    for a, b in zip(ring[:-1], ring[1:]):
        length = float(np.linalg.norm(b - a))
        if length == 0.0:
            continue
        n_steps = max(1, math.ceil(length / spacing - 1e-12))
        for t in np.linspace(0.0, 1.0, n_steps + 1):
            p = (1.0 - t) * a + t * b
            key = (float(p[0]), float(p[1]))
            if key in seen:
                continue
            seen.add(key)
            stations.append((p, (b - a) / length))
    return stations


def _wall_normal(direction: np.ndarray) -> np.ndarray:
    # CCW ring: outward is to the right of the walk direction.
    return np.array([direction[1], -direction[0], 0.0])


def build_prior(
    footprints,
    dem: DemGrid,
    facade_spacing: float = DEFAULT_FACADE_SPACING,
    ground_spacing: float = DEFAULT_GROUND_SPACING,
) -> WeightedCloud:
    """Extrude footprints into a facade/ground prior cloud.

    Facade points sit on each wall at facade_spacing in both directions
    (wall base from the DEM), carry the outward wall normal and the
    footprint reliability. Ground points sample the DEM hull at
    ground_spacing with +z normals and weight 1. Roofs are not modeled.
    """
    points, normals, weights, classes = [], [], [], []
    for fp in footprints:
        n_lvl = max(1, math.ceil(fp.height / facade_spacing - 1e-12))
        rel_heights = np.linspace(0.0, fp.height, n_lvl + 1)
        for p, direction in _wall_stations(fp.ring, facade_spacing):
            base = sample_dem(dem, p)
            n = _wall_normal(direction)
            for dz in rel_heights:
                points.append([p[0], p[1], base + dz])
                normals.append(n)
                weights.append(fp.reliability)
                classes.append(CLASS_FACADE)

    xmin, ymin, xmax, ymax = dem.hull_bounds()
    xs = np.arange(xmin, xmax + 1e-9, ground_spacing)
    ys = np.arange(ymin, ymax + 1e-9, ground_spacing)
    for y in ys:
        for x in xs:
            try:
                z = sample_dem(dem, (x, y))
            except DemNodataError:
                continue
            points.append([x, y, z])
            normals.append([0.0, 0.0, 1.0])
            weights.append(1.0)
            classes.append(CLASS_GROUND)

    if not points:
        raise EmptyPriorError("no footprints and no usable terrain")
    return WeightedCloud(
        np.array(points),
        np.array(normals),
        np.array(weights),
        np.array(classes, dtype=np.uint8),
    )


def clip_prior(prior: WeightedCloud, center, radius: float) -> WeightedCloud:
    """Keep points within horizontal distance radius of center."""
    center = np.asarray(center, dtype=float).reshape(-1)[:2]
    d = np.linalg.norm(prior.points[:, :2] - center, axis=1)
    return prior.select(d <= radius)


def remove_footprints(footprints, removal_ids) -> list:
    """Drop footprints by way id; unknown ids are an error."""
    known = {fp.way_id for fp in footprints}
    unknown = set(removal_ids) - known
    if unknown:
        raise ValueError("unknown footprint ids: %s" % sorted(unknown))
    return [fp for fp in footprints if fp.way_id not in removal_ids]
