"""CSV layouts are versioned; changing a header must be a deliberate
schema bump that also updates these files."""
from pathlib import Path

import pytest

from ultrapos.detector import write_detections_csv
from ultrapos.harness.experiments import cdf_2d
from ultrapos.harness.pipeline import locate
from ultrapos.locator import write_fixes_csv

GOLDEN = Path(__file__).parent / "golden"


def head(path, n):
    return Path(path).read_text().splitlines()[:n]


@pytest.fixture(scope="module")
def located(clean_recording):
    scn, rec = clean_recording
    return locate(rec.secondary, rec.detector, scn.anchor_map(), dims=scn.dims, z_fixed=scn.z_fixed, c=scn.c)


def test_detections_header(tmp_path, located, clean_recording):
    p = tmp_path / "d.csv"
    write_detections_csv(p, located.detections, clean_recording[1].detector)
    assert head(p, 2) == head(GOLDEN / "detections_header.csv", 2)
    assert len(head(p, 100)) == 2 + len(located.detections)


def test_fixes_header(tmp_path, located):
    p = tmp_path / "f.csv"
    write_fixes_csv(p, [located.fix])
    assert head(p, 2) == head(GOLDEN / "fixes_header.csv", 2)


def test_report_header(tmp_path):
    p = tmp_path / "r.csv"
    cdf_2d(trials=1, snr_db=None, sync_std=0.0, seed=5).to_csv(p)
    assert head(p, 3) == head(GOLDEN / "report_cdf2d_header.csv", 3)
