import xml.etree.ElementTree as ET

from lws_forge.svg import line_chart


def test_one_polyline_per_series():
    svg = line_chart({"a": [(0, 1), (1, 2)], "b<&>": [(0, 3), (2, 1)]}, title="t", xlabel="x", ylabel="y")
    root = ET.fromstring(svg)
    lines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert [e.get("data-series") for e in lines] == ["a", "b<&>"]
    assert len(lines[1].get("points").split()) == 2


def test_empty_and_flat_series():
    ET.fromstring(line_chart({}))
    ET.fromstring(line_chart({"flat": [(1, 5), (1, 5)]}))
